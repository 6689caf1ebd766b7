//! Training loop, evaluation and the calibration-robustness experiment.

mod experiment;
mod loss;
mod model;
mod optim;

pub use experiment::{robustness_experiment, CellResult, CellSummary, ExperimentConfig, RobustnessReport};
pub use loss::{argmax, cross_entropy_loss};
pub use model::Classifier;
pub use optim::{build_optimizer, AdamW, Optimizer, OptimizerKind, Sgd};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionBatch, FusionContext, FusionRegistry, ModelConfig};
use crate::geometry::{disturb_calibration, project, DisturbanceConfig};
use crate::rng::stream;
use crate::synthscene::LabeledScene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Points per optimizer step, drawn from one scene.
    pub batch_points: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// Only used by SGD.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Learning-rate multiplier for the sampling-offset head. Offsets live in
    /// normalized image units, so a full-rate step can carry a sample several
    /// pixels away, off the objects and into background where the image
    /// gradient is zero and the offset never recovers.
    #[serde(default = "default_offset_lr_scale")]
    pub offset_lr_scale: f64,
    /// Re-drawn for every scene in every epoch when present.
    #[serde(default)]
    pub train_disturbance: Option<DisturbanceConfig>,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_offset_lr_scale() -> f64 {
    0.1
}

impl Default for TrainConfig {
    /// AdamW, learning rate 1e-4, weight decay 0.01.
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_points: 64,
            lr: 1e-4,
            weight_decay: 0.01,
            optimizer: OptimizerKind::Adamw,
            momentum: default_momentum(),
            offset_lr_scale: default_offset_lr_scale(),
            train_disturbance: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_points == 0 {
            return Err(Error::config("train.batch_points", "must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.offset_lr_scale >= 0.0 && self.offset_lr_scale.is_finite()) {
            return Err(Error::config("train.offset_lr_scale", "must be finite and >= 0"));
        }
        if let Some(d) = &self.train_disturbance {
            d.validate("train.train_disturbance")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Classifier,
    pub history: Vec<EpochStats>,
}

/// Shapes shared by every scene, or an error naming the first mismatch.
pub fn context_for(scenes: &[LabeledScene], model: &ModelConfig) -> Result<FusionContext> {
    let first = scenes.first().ok_or(Error::config("scenes", "must not be empty"))?;
    let cam = &first.rig.cameras[0];
    let ctx = FusionContext {
        lidar_channels: first.points.channels(),
        level_channels: first.pyramids[0].channels(),
        image_px: (cam.width_px, cam.height_px),
        model: *model,
    };
    for (i, s) in scenes.iter().enumerate() {
        if s.points.channels() != ctx.lidar_channels || s.config.n_classes != first.config.n_classes {
            return Err(Error::dim("scene features", ctx.lidar_channels, format!("scene {i}: {}", s.points.channels())));
        }
        for (pyr, cam) in s.pyramids.iter().zip(&s.rig.cameras) {
            if pyr.channels() != ctx.level_channels {
                return Err(Error::dim("scene pyramid widths", format!("{:?}", ctx.level_channels), format!("scene {i}: {:?}", pyr.channels())));
            }
            pyr.check_camera(cam)?;
        }
    }
    Ok(ctx)
}

pub fn train_model(fusion: &str, model_cfg: &ModelConfig, scenes: &[LabeledScene], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_model_with(&FusionRegistry::standard(), fusion, model_cfg, scenes, cfg)
}

pub fn train_model_with(
    registry: &FusionRegistry,
    fusion: &str,
    model_cfg: &ModelConfig,
    scenes: &[LabeledScene],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ctx = context_for(scenes, model_cfg)?;
    let mut init = stream(cfg.seed, &format!("init/{fusion}"));
    let mut model = Classifier::new(registry.build(fusion, &ctx, &mut init)?, scenes[0].config.n_classes, &mut init);
    let mut opt = build_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.momentum);
    opt.set_lr_scales(
        model
            .named_params()
            .iter()
            .map(|(name, _)| if name.contains(".offset_head.") { cfg.offset_lr_scale } else { 1.0 })
            .collect(),
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let refs: Vec<_> = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| match &cfg.train_disturbance {
                Some(d) => {
                    let mut rng = stream(cfg.seed, &format!("train-disturbance/{}/{epoch}/{i}", d.seed));
                    project(&disturb_calibration(&s.rig, d, &mut rng), &s.points.coords)
                }
                None => project(&s.rig, &s.points.coords),
            })
            .collect::<Result<_>>()?;
        let mut shuffle = stream(cfg.seed, &format!("shuffle/{epoch}"));
        let mut batches = Vec::new();
        for (i, s) in scenes.iter().enumerate() {
            let mut order: Vec<usize> = (0..s.points.len()).collect();
            order.shuffle(&mut shuffle);
            batches.extend(order.chunks(cfg.batch_points).map(|c| (i, c.to_vec())));
        }
        batches.shuffle(&mut shuffle);

        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (i, idx) in &batches {
            let s = &scenes[*i];
            let points = s.points.select(idx);
            let sub_refs = refs[*i].select(idx);
            let labels: Vec<usize> = idx.iter().map(|&n| s.labels[n]).collect();
            let batch = FusionBatch {
                points: &points,
                pyramids: &s.pyramids,
                refs: &sub_refs,
            };
            model.zero_grad();
            let logits = model.forward(&batch)?;
            let (loss, grad) = cross_entropy_loss(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            model.backward(&grad)?;
            model.step(opt.as_mut())?;
            loss_sum += loss * idx.len() as f64;
            correct += (0..logits.rows()).filter(|&r| argmax(logits.row(r)) == labels[r]).count();
            seen += idx.len();
        }
        history.push(EpochStats {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
        });
    }
    Ok(TrainOutcome { model, history })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluation scenes.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub n_points: usize,
}

/// Accuracy over `scenes`. With a disturbance, each scene's rig is perturbed
/// from a stream derived from `seed` and the scene index.
pub fn evaluate(model: &mut Classifier, scenes: &[LabeledScene], disturbance: Option<&DisturbanceConfig>, seed: u64) -> Result<EvalReport> {
    let k = model.n_classes();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (i, s) in scenes.iter().enumerate() {
        let rig = match disturbance {
            Some(d) => disturb_calibration(&s.rig, d, &mut stream(seed, &format!("eval-disturbance/{}/{i}", d.seed))),
            None => s.rig.clone(),
        };
        let refs = project(&rig, &s.points.coords)?;
        let pred = model.predict(&FusionBatch {
            points: &s.points,
            pyramids: &s.pyramids,
            refs: &refs,
        })?;
        for (&p, &y) in pred.iter().zip(&s.labels) {
            if y >= k {
                return Err(Error::Label { label: y, classes: k });
            }
            totals[y] += 1;
            hits[y] += usize::from(p == y);
        }
    }
    let n: usize = totals.iter().sum();
    Ok(EvalReport {
        accuracy: hits.iter().sum::<usize>() as f64 / n.max(1) as f64,
        per_class_accuracy: hits.iter().zip(&totals).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect(),
        n_points: n,
    })
}
