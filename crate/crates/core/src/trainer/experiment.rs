//! The fusion x training-disturbance x evaluation-disturbance grid.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionRegistry, ModelConfig, DCA_NO_DQE, DCA_WITH_DQE, ONE_TO_ONE};
use crate::geometry::DisturbanceConfig;
use crate::rng::split_seed;
use crate::synthscene::{generate_scene, LabeledScene, SceneConfig};

use super::{evaluate, train_model_with, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Template for every scene; its `seed` is replaced per scene.
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default = "ExperimentConfig::default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "ExperimentConfig::default_fusions")]
    pub fusions: Vec<String>,
    /// Disturbance used wherever a condition is "on", for training and
    /// evaluation alike (with independent draws).
    #[serde(default)]
    pub disturbance: DisturbanceConfig,
    /// Seeds `seed, seed + 1, ..., seed + n_seeds - 1`.
    pub n_seeds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ExperimentConfig::default_train_scenes")]
    pub train_scenes: usize,
    #[serde(default = "ExperimentConfig::default_eval_scenes")]
    pub eval_scenes: usize,
    /// Fill the `wall_time_s` column. Off by default so reruns produce
    /// byte-identical output.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    /// The desk-scale preset: AdamW at a higher learning rate than the
    /// large-scale default, since the models here are tiny and trained for
    /// a few thousand steps.
    pub fn default_train() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_points: 64,
            lr: 3e-3,
            ..TrainConfig::default()
        }
    }

    fn default_fusions() -> Vec<String> {
        [ONE_TO_ONE, DCA_NO_DQE, DCA_WITH_DQE].map(String::from).to_vec()
    }

    fn default_train_scenes() -> usize {
        16
    }

    fn default_eval_scenes() -> usize {
        4
    }

    pub fn with_seeds(n_seeds: usize) -> Self {
        ExperimentConfig {
            scene: SceneConfig::default(),
            train: Self::default_train(),
            model: ModelConfig::default(),
            fusions: Self::default_fusions(),
            disturbance: DisturbanceConfig::default(),
            n_seeds,
            seed: 0,
            train_scenes: Self::default_train_scenes(),
            eval_scenes: Self::default_eval_scenes(),
            record_wall_time: false,
        }
    }

    pub fn validate(&self, registry: &FusionRegistry) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        self.disturbance.validate("disturbance")?;
        if self.n_seeds < 3 {
            return Err(Error::config("n_seeds", "must be >= 3"));
        }
        if self.train_scenes == 0 {
            return Err(Error::config("train_scenes", "must be >= 1"));
        }
        if self.eval_scenes == 0 {
            return Err(Error::config("eval_scenes", "must be >= 1"));
        }
        if self.fusions.is_empty() {
            return Err(Error::config("fusions", "must name at least one strategy"));
        }
        for (i, f) in self.fusions.iter().enumerate() {
            registry.check(f).map_err(|e| Error::config(format!("fusions[{i}]"), e.to_string()))?;
        }
        if self.seed.checked_add(self.n_seeds as u64).is_none() {
            return Err(Error::config("seed", "seed + n_seeds overflows"));
        }
        Ok(())
    }

    /// Scene seeds for one run; training and evaluation sets are disjoint.
    pub fn scene_seeds(&self, run_seed: u64) -> (Vec<u64>, Vec<u64>) {
        let train = (0..self.train_scenes).map(|j| split_seed(run_seed, &format!("scene/train/{j}"))).collect();
        let eval = (0..self.eval_scenes).map(|j| split_seed(run_seed, &format!("scene/eval/{j}"))).collect();
        (train, eval)
    }
}

/// One row of the grid: a trained model evaluated under one condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub fusion: String,
    pub train_dist: bool,
    pub eval_dist: bool,
    pub seed: u64,
    pub accuracy: f64,
    /// Clean-evaluation accuracy of the same model minus `accuracy`; zero on
    /// clean rows.
    pub loss_of_disturbance: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub fusion: String,
    pub train_dist: bool,
    pub eval_dist: bool,
    pub n: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub loss_of_disturbance_mean: f64,
    pub loss_of_disturbance_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub rows: Vec<CellResult>,
    pub summary: Vec<CellSummary>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn scenes_for(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<LabeledScene>> {
    seeds
        .par_iter()
        .map(|&s| generate_scene(&SceneConfig { seed: s, ..cfg.scene.clone() }))
        .collect()
}

/// Train every (seed, fusion, training condition) in parallel and evaluate
/// each model clean and disturbed. Rows are ordered by seed, then fusion in
/// configuration order, then training and evaluation condition (off first).
pub fn robustness_experiment(cfg: &ExperimentConfig, registry: &FusionRegistry) -> Result<RobustnessReport> {
    cfg.validate(registry)?;
    let runs: Vec<u64> = (0..cfg.n_seeds as u64).map(|i| cfg.seed + i).collect();
    let mut data = Vec::with_capacity(runs.len());
    for &run in &runs {
        let (train_seeds, eval_seeds) = cfg.scene_seeds(run);
        let train: BTreeSet<u64> = train_seeds.iter().copied().collect();
        if eval_seeds.iter().any(|s| train.contains(s)) || train.len() != train_seeds.len() {
            return Err(Error::config("seed", format!("run {run} produced overlapping scene seeds")));
        }
        data.push((scenes_for(cfg, &train_seeds)?, scenes_for(cfg, &eval_seeds)?));
    }

    let mut jobs = Vec::new();
    for (ri, &run) in runs.iter().enumerate() {
        for fusion in &cfg.fusions {
            for train_dist in [false, true] {
                jobs.push((ri, run, fusion.clone(), train_dist));
            }
        }
    }
    let rows: Vec<Vec<CellResult>> = jobs
        .par_iter()
        .map(|(ri, run, fusion, train_dist)| -> Result<Vec<CellResult>> {
            let (train_scenes, eval_scenes) = &data[*ri];
            let start = Instant::now();
            let train_cfg = TrainConfig {
                seed: split_seed(*run, "train"),
                train_disturbance: train_dist.then_some(cfg.disturbance),
                ..cfg.train.clone()
            };
            let mut outcome = train_model_with(registry, fusion, &cfg.model, train_scenes, &train_cfg)?;
            let eval_seed = split_seed(*run, "eval");
            let clean = evaluate(&mut outcome.model, eval_scenes, None, eval_seed)?;
            let disturbed = evaluate(&mut outcome.model, eval_scenes, Some(&cfg.disturbance), eval_seed)?;
            let wall = cfg.record_wall_time.then(|| start.elapsed().as_secs_f64());
            Ok([(false, &clean), (true, &disturbed)]
                .into_iter()
                .map(|(eval_dist, r)| CellResult {
                    fusion: fusion.clone(),
                    train_dist: *train_dist,
                    eval_dist,
                    seed: *run,
                    accuracy: r.accuracy,
                    loss_of_disturbance: clean.accuracy - r.accuracy,
                    per_class_accuracy: r.per_class_accuracy.clone(),
                    wall_time_s: wall,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<CellResult> = rows.into_iter().flatten().collect();

    let mut summary = Vec::new();
    for fusion in &cfg.fusions {
        for train_dist in [false, true] {
            for eval_dist in [false, true] {
                let cell: Vec<&CellResult> = rows
                    .iter()
                    .filter(|r| &r.fusion == fusion && r.train_dist == train_dist && r.eval_dist == eval_dist)
                    .collect();
                let (am, asd) = mean_std(&cell.iter().map(|r| r.accuracy).collect::<Vec<_>>());
                let (lm, lsd) = mean_std(&cell.iter().map(|r| r.loss_of_disturbance).collect::<Vec<_>>());
                summary.push(CellSummary {
                    fusion: fusion.clone(),
                    train_dist,
                    eval_dist,
                    n: cell.len(),
                    accuracy_mean: am,
                    accuracy_std: asd,
                    loss_of_disturbance_mean: lm,
                    loss_of_disturbance_std: lsd,
                });
            }
        }
    }
    Ok(RobustnessReport { rows, summary })
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl RobustnessReport {
    pub fn cell(&self, fusion: &str, train_dist: bool, eval_dist: bool) -> Option<&CellSummary> {
        self.summary
            .iter()
            .find(|s| s.fusion == fusion && s.train_dist == train_dist && s.eval_dist == eval_dist)
    }

    /// Columns `fusion,train_dist,eval_dist,seed,accuracy,loss_of_disturbance,wall_time_s`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["fusion", "train_dist", "eval_dist", "seed", "accuracy", "loss_of_disturbance", "wall_time_s"])?;
        for r in &self.rows {
            out.write_record([
                r.fusion.clone(),
                on_off(r.train_dist).to_string(),
                on_off(r.eval_dist).to_string(),
                r.seed.to_string(),
                format!("{:.6}", r.accuracy),
                format!("{:.6}", r.loss_of_disturbance),
                r.wall_time_s.map(|t| format!("{t:.3}")).unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }

    /// Human-readable table of the summary.
    pub fn format_grid(&self) -> String {
        let mut s = format!(
            "{:<22} {:>5} {:>5} {:>16} {:>16}\n",
            "fusion", "train", "eval", "accuracy", "loss_of_dist"
        );
        for c in &self.summary {
            s.push_str(&format!(
                "{:<22} {:>5} {:>5} {:>8.4} ±{:<7.4} {:>8.4} ±{:<7.4}\n",
                c.fusion,
                on_off(c.train_dist),
                on_off(c.eval_dist),
                c.accuracy_mean,
                c.accuracy_std,
                c.loss_of_disturbance_mean,
                c.loss_of_disturbance_std
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            scene: SceneConfig {
                n_points: 32,
                image_px: 128,
                max_range_m: 6.0,
                ..SceneConfig::default()
            },
            train: TrainConfig {
                epochs: 1,
                ..ExperimentConfig::default_train()
            },
            model: ModelConfig {
                directions: 2,
                points_per_direction: 1,
                ..ModelConfig::default()
            },
            train_scenes: 1,
            eval_scenes: 1,
            ..ExperimentConfig::with_seeds(3)
        }
    }

    #[test]
    fn grid_has_twelve_rows_per_seed() {
        let r = robustness_experiment(&tiny(), &FusionRegistry::standard()).unwrap();
        assert_eq!(r.rows.len(), 36);
        assert_eq!(r.summary.len(), 12);
        assert!(r.summary.iter().all(|c| c.n == 3 && c.accuracy_mean.is_finite()));
        assert!(r.rows.iter().filter(|c| !c.eval_dist).all(|c| c.loss_of_disturbance == 0.0));
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 37);
        assert!(text.starts_with("fusion,train_dist,eval_dist,seed,accuracy,loss_of_disturbance,wall_time_s\n"));
    }

    #[test]
    fn scene_seed_sets_are_disjoint() {
        let cfg = ExperimentConfig::with_seeds(5);
        for run in 0..5 {
            let (t, e) = cfg.scene_seeds(run);
            assert!(t.iter().all(|s| !e.contains(s)));
        }
    }

    #[test]
    fn validation() {
        let r = FusionRegistry::standard();
        let mut cfg = tiny();
        cfg.n_seeds = 2;
        assert!(matches!(cfg.validate(&r), Err(Error::Config { field, .. }) if field == "n_seeds"));
        let mut cfg = tiny();
        cfg.fusions.push("nope".into());
        assert!(matches!(cfg.validate(&r), Err(Error::Config { field, .. }) if field == "fusions[3]"));
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
