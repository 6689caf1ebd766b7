use dcafuse::fusion::{ModelConfig, DCA_WITH_DQE};
use dcafuse::rng::split_seed;
use dcafuse::synthscene::{generate_scene, LabeledScene, SceneConfig};
use dcafuse::trainer::{evaluate, train_model, ExperimentConfig};

fn scenes(cfg: &ExperimentConfig, run: u64) -> (Vec<LabeledScene>, Vec<LabeledScene>) {
    let (train, eval) = cfg.scene_seeds(run);
    let make = |seeds: Vec<u64>| -> Vec<LabeledScene> {
        seeds
            .into_iter()
            .map(|seed| generate_scene(&SceneConfig { seed, ..cfg.scene.clone() }).unwrap())
            .collect()
    };
    (make(train), make(eval))
}

#[test]
fn dca_with_dqe_learns_the_clean_task() {
    let cfg = ExperimentConfig::with_seeds(3);
    let (train, eval) = scenes(&cfg, 0);
    let train_cfg = dcafuse::trainer::TrainConfig {
        seed: split_seed(0, "train"),
        ..cfg.train.clone()
    };
    let mut outcome = train_model(DCA_WITH_DQE, &ModelConfig::default(), &train, &train_cfg).unwrap();
    assert_eq!(outcome.history.len(), 30);
    let report = evaluate(&mut outcome.model, &eval, None, split_seed(0, "eval")).unwrap();
    assert!(report.accuracy >= 0.95, "held-out accuracy {}", report.accuracy);
}

#[test]
fn training_is_deterministic() {
    let mut cfg = ExperimentConfig::with_seeds(3);
    cfg.scene = SceneConfig {
        n_points: 48,
        image_px: 128,
        max_range_m: 6.0,
        ..SceneConfig::default()
    };
    cfg.train_scenes = 2;
    cfg.train.epochs = 2;
    let (train, _) = scenes(&cfg, 4);
    let a = train_model(DCA_WITH_DQE, &ModelConfig::default(), &train, &cfg.train).unwrap();
    let b = train_model(DCA_WITH_DQE, &ModelConfig::default(), &train, &cfg.train).unwrap();
    assert_eq!(a.history, b.history);
}
