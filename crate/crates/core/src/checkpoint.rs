//! Saving and restoring trained classifiers.
//!
//! A checkpoint directory holds one tensor file per parameter and a
//! `manifest.json` naming the fusion strategy and the context it was built
//! for, so loading rebuilds the same architecture through the registry and
//! then overwrites every parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionContext, FusionRegistry};
use crate::rng::stream;
use crate::tensor::{load_named, save_named, TensorEntry};
use crate::trainer::Classifier;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub fusion: String,
    pub context: FusionContext,
    pub n_classes: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &Classifier, fusion: &str, context: &FusionContext, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tensors = save_named(dir, &model.named_params())?;
    let manifest = CheckpointManifest {
        fusion: fusion.to_string(),
        context: context.clone(),
        n_classes: model.n_classes(),
        tensors,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path, registry: &FusionRegistry) -> Result<(Classifier, CheckpointManifest)> {
    let path = dir.join(MANIFEST);
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    // the initialization is overwritten below; the stream only has to exist
    let mut rng = stream(0, "checkpoint/load");
    let fusion = registry.build(&manifest.fusion, &manifest.context, &mut rng)?;
    let mut model = Classifier::new(fusion, manifest.n_classes, &mut rng);
    let expected = model.named_params().len();
    if manifest.tensors.len() != expected {
        return Err(Error::Format {
            path,
            reason: format!("{} tensors listed, the {} model has {expected}", manifest.tensors.len(), manifest.fusion),
        });
    }
    for (name, slot) in model.named_params_mut() {
        let t = load_named(dir, &path, &manifest.tensors, &name)?;
        if t.shape() != slot.shape() {
            return Err(Error::Format {
                path,
                reason: format!("tensor {name} has shape {:?}, the model expects {:?}", t.shape(), slot.shape()),
            });
        }
        *slot = t;
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{ModelConfig, DCA_WITH_DQE, ONE_TO_ONE};
    use crate::synthscene::{generate_scene, SceneConfig};
    use crate::trainer::{context_for, evaluate};

    fn scene() -> Vec<crate::synthscene::LabeledScene> {
        vec![generate_scene(&SceneConfig {
            n_points: 24,
            image_px: 128,
            max_range_m: 6.0,
            ..SceneConfig::default()
        })
        .unwrap()]
    }

    #[test]
    fn round_trip_preserves_parameters_and_predictions() {
        let scenes = scene();
        let registry = FusionRegistry::standard();
        for fusion in [ONE_TO_ONE, DCA_WITH_DQE] {
            let ctx = context_for(&scenes, &ModelConfig::default()).unwrap();
            let mut rng = stream(3, "t");
            let mut model = Classifier::new(registry.build(fusion, &ctx, &mut rng).unwrap(), 4, &mut rng);
            let dir = tempfile::tempdir().unwrap();
            save_checkpoint(&model, fusion, &ctx, dir.path()).unwrap();
            let (mut back, manifest) = load_checkpoint(dir.path(), &registry).unwrap();
            assert_eq!(manifest.fusion, fusion);
            for ((na, a), (nb, b)) in model.named_params().into_iter().zip(back.named_params()) {
                assert_eq!(na, nb);
                // the payload is stored as f32
                assert!(a.max_abs_diff(b) < 1e-6, "{na}");
            }
            let x = evaluate(&mut model, &scenes, None, 0).unwrap();
            let y = evaluate(&mut back, &scenes, None, 0).unwrap();
            assert!((x.accuracy - y.accuracy).abs() <= 1.0 / x.n_points as f64);
        }
    }

    #[test]
    fn tampered_manifest_is_a_format_error() {
        let scenes = scene();
        let registry = FusionRegistry::standard();
        let ctx = context_for(&scenes, &ModelConfig::default()).unwrap();
        let mut rng = stream(4, "t");
        let model = Classifier::new(registry.build(ONE_TO_ONE, &ctx, &mut rng).unwrap(), 4, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, ONE_TO_ONE, &ctx, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut m: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m.tensors.pop();
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), &registry), Err(Error::Format { .. })));

        m.fusion = "two_to_two".into();
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), &registry), Err(Error::Unknown { .. })));
    }
}
