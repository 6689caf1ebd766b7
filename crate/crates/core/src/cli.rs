//! The `dcafuse` command line.
//!
//! Every run reads one JSON document whose `command` field must match the
//! subcommand. The whole document is validated before anything touches the
//! file system. Outputs are staged in a hidden sibling directory and renamed
//! into place once the command succeeds, and the config text is copied into
//! the output directory unchanged.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{FusionRegistry, ModelConfig};
use crate::geometry::DisturbanceConfig;
use crate::gradsuite::{GradSuite, GradSuiteConfig};
use crate::rng::split_seed;
use crate::synthscene::{generate_scene, LabeledScene, SceneConfig};
use crate::trainer::{context_for, evaluate, robustness_experiment, train_model_with, EvalReport, ExperimentConfig, TrainConfig};

pub const THREADS_ENV: &str = "DCAFUSE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "dcafuse", version, about = "Dynamic cross attention fusion experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference check of every analytic gradient.
    Gradcheck(RunArgs),
    /// Train one fusion strategy and evaluate it on held-out scenes.
    Train(RunArgs),
    /// The fusion x disturbance robustness grid.
    Robustness(RunArgs),
    /// Generate and serialize one labeled scene.
    Genscene(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub overwrite: bool,
    /// Worker threads; falls back to DCAFUSE_THREADS, then all cores.
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Command {
    pub fn split(&self) -> (&'static str, &RunArgs) {
        match self {
            Command::Gradcheck(a) => ("gradcheck", a),
            Command::Train(a) => ("train", a),
            Command::Robustness(a) => ("robustness", a),
            Command::Genscene(a) => ("genscene", a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunConfig {
    Gradcheck(GradcheckRun),
    Train(TrainRun),
    Robustness(RobustnessRun),
    Genscene(GensceneRun),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckRun {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub gradcheck: GradSuiteConfig,
}

/// Training and evaluation scenes, the minibatch order and the disturbance
/// draws all derive from `seed`; the nested `scene.seed` and `train.seed`
/// are replaced.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub fusion: String,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "ExperimentConfig::default_train")]
    pub train: TrainConfig,
    #[serde(default = "default_train_scenes")]
    pub train_scenes: usize,
    #[serde(default = "default_eval_scenes")]
    pub eval_scenes: usize,
    /// Also report accuracy under this calibration disturbance.
    #[serde(default)]
    pub eval_disturbance: Option<DisturbanceConfig>,
}

fn default_train_scenes() -> usize {
    16
}

fn default_eval_scenes() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessRun {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub experiment: ExperimentConfig,
}

/// The scene's own `seed` is the top-level seed here.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GensceneRun {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub scene: SceneConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = unknown_field(&msg).unwrap_or_else(|| "config".to_string());
            Error::config(field, msg)
        })
    }

    pub fn command(&self) -> &'static str {
        match self {
            RunConfig::Gradcheck(_) => "gradcheck",
            RunConfig::Train(_) => "train",
            RunConfig::Robustness(_) => "robustness",
            RunConfig::Genscene(_) => "genscene",
        }
    }

    pub fn output_dir(&self) -> Option<&Path> {
        match self {
            RunConfig::Gradcheck(r) => r.output_dir.as_deref(),
            RunConfig::Train(r) => r.output_dir.as_deref(),
            RunConfig::Robustness(r) => r.output_dir.as_deref(),
            RunConfig::Genscene(r) => r.output_dir.as_deref(),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            RunConfig::Gradcheck(r) => r.gradcheck.seed = seed,
            RunConfig::Train(r) => r.seed = seed,
            RunConfig::Robustness(r) => r.experiment.seed = seed,
            RunConfig::Genscene(r) => r.scene.seed = seed,
        }
    }

    pub fn validate(&self, registry: &FusionRegistry, suite: &GradSuite) -> Result<()> {
        match self {
            RunConfig::Gradcheck(r) => r.gradcheck.validate(suite),
            RunConfig::Train(r) => r.validate(registry),
            RunConfig::Robustness(r) => r.experiment.validate(registry),
            RunConfig::Genscene(r) => r.scene.validate(),
        }
    }
}

/// serde reports unknown fields as "unknown field `x`, expected ...".
fn unknown_field(msg: &str) -> Option<String> {
    for prefix in ["unknown field `", "unknown variant `", "missing field `"] {
        if let Some(rest) = msg.split(prefix).nth(1) {
            return rest.split('`').next().map(|s| if prefix == "unknown variant `" { "command".into() } else { s.into() });
        }
    }
    None
}

impl TrainRun {
    pub fn validate(&self, registry: &FusionRegistry) -> Result<()> {
        registry.check(&self.fusion).map_err(|e| Error::config("fusion", e.to_string()))?;
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if let Some(d) = &self.eval_disturbance {
            d.validate("eval_disturbance")?;
        }
        if self.train_scenes == 0 {
            return Err(Error::config("train_scenes", "must be >= 1"));
        }
        if self.eval_scenes == 0 {
            return Err(Error::config("eval_scenes", "must be >= 1"));
        }
        Ok(())
    }

    fn scenes(&self, label: &str, n: usize) -> Result<Vec<LabeledScene>> {
        (0..n)
            .into_par_iter()
            .map(|j| {
                generate_scene(&SceneConfig {
                    seed: split_seed(self.seed, &format!("scene/{label}/{j}")),
                    ..self.scene.clone()
                })
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
pub struct TrainEval {
    pub fusion: String,
    pub clean: EvalReport,
    pub disturbed: Option<EvalReport>,
}

/// What a finished command reports back to the process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The command ran but its check did not pass.
    Failed(String),
}

/// Output staged next to its final location and renamed into place.
struct Staging {
    tmp: PathBuf,
    target: PathBuf,
    overwrite: bool,
    done: bool,
}

impl Staging {
    fn new(target: &Path, overwrite: bool) -> Result<Self> {
        if target.exists() && !overwrite {
            return Err(Error::OutputExists(target.to_path_buf()));
        }
        let name = target
            .file_name()
            .ok_or_else(|| Error::config("output_dir", format!("{} has no final component", target.display())))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)?;
        let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir(&tmp)?;
        Ok(Staging {
            tmp,
            target: target.to_path_buf(),
            overwrite,
            done: false,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    fn commit(mut self) -> Result<()> {
        if self.target.exists() {
            if !self.overwrite {
                return Err(Error::OutputExists(self.target.clone()));
            }
            fs::remove_dir_all(&self.target)?;
        }
        fs::rename(&self.tmp, &self.target)?;
        self.done = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

/// Parse, validate and run one command. Nothing is written unless the config
/// is valid.
pub fn execute(command: &Command, out: &mut impl Write) -> Result<Outcome> {
    let (name, args) = command.split();
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if cfg.command() != name {
        return Err(Error::config("command", format!("config is for `{}` but `{name}` was invoked", cfg.command())));
    }
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    let registry = FusionRegistry::standard();
    let suite = GradSuite::standard();
    cfg.validate(&registry, &suite)?;
    if args.threads == Some(0) {
        return Err(Error::config("--threads", "must be >= 1"));
    }
    let target = args
        .out
        .clone()
        .or_else(|| cfg.output_dir().map(Path::to_path_buf))
        .ok_or_else(|| Error::config("output_dir", "no output directory: set output_dir or pass --out"))?;
    if target.exists() && !args.overwrite {
        return Err(Error::OutputExists(target));
    }

    let pool = match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| Error::config("--threads", e.to_string()))?;

    let staging = Staging::new(&target, args.overwrite)?;
    fs::write(staging.path("config.json"), &text)?;
    // the pool's workers cannot borrow `out`, so the report is buffered
    let mut buf = Vec::new();
    let outcome = pool.install(|| match &cfg {
        RunConfig::Gradcheck(r) => run_gradcheck(r, &suite, &staging, &mut buf),
        RunConfig::Train(r) => run_train(r, &registry, &staging, &mut buf),
        RunConfig::Robustness(r) => run_robustness(r, &registry, &staging, &mut buf),
        RunConfig::Genscene(r) => run_genscene(r, &staging, &mut buf),
    });
    out.write_all(&buf)?;
    let outcome = outcome?;
    staging.commit()?;
    writeln!(out, "wrote {}", target.display())?;
    Ok(outcome)
}

fn run_gradcheck(r: &GradcheckRun, suite: &GradSuite, staging: &Staging, out: &mut impl Write) -> Result<Outcome> {
    let report = suite.run(&r.gradcheck)?;
    fs::write(staging.path("report.json"), serde_json::to_string_pretty(&report)?)?;
    writeln!(out, "{:<18} {:>10} {:>8} {:>12}  result", "primitive", "rtol", "seeds", "max_rel_err")?;
    for c in &report.cases {
        writeln!(
            out,
            "{:<18} {:>10.0e} {:>8} {:>12.3e}  {}",
            c.name,
            c.rtol,
            c.seeds_checked,
            c.max_rel_error,
            if c.passed { "pass" } else { "FAIL" }
        )?;
    }
    let failing = report.failing();
    if failing.is_empty() {
        Ok(Outcome::Success)
    } else {
        Ok(Outcome::Failed(format!("gradient check failed for: {}", failing.join(", "))))
    }
}

fn run_train(r: &TrainRun, registry: &FusionRegistry, staging: &Staging, out: &mut impl Write) -> Result<Outcome> {
    let train_scenes = r.scenes("train", r.train_scenes)?;
    let eval_scenes = r.scenes("eval", r.eval_scenes)?;
    let cfg = TrainConfig {
        seed: split_seed(r.seed, "train"),
        ..r.train.clone()
    };
    let outcome = train_model_with(registry, &r.fusion, &r.model, &train_scenes, &cfg)?;
    let mut model = outcome.model;

    let ctx = context_for(&train_scenes, &r.model)?;
    save_checkpoint(&model, &r.fusion, &ctx, &staging.path("checkpoint"))?;

    let mut history = csv::Writer::from_path(staging.path("history.csv"))?;
    for row in &outcome.history {
        history.serialize(row)?;
    }
    history.flush()?;

    let eval_seed = split_seed(r.seed, "eval");
    let clean = evaluate(&mut model, &eval_scenes, None, eval_seed)?;
    let disturbed = match &r.eval_disturbance {
        Some(d) => Some(evaluate(&mut model, &eval_scenes, Some(d), eval_seed)?),
        None => None,
    };
    writeln!(out, "{}: clean accuracy {:.4} on {} points", r.fusion, clean.accuracy, clean.n_points)?;
    if let Some(d) = &disturbed {
        writeln!(out, "{}: disturbed accuracy {:.4}", r.fusion, d.accuracy)?;
    }
    let report = TrainEval {
        fusion: r.fusion.clone(),
        clean,
        disturbed,
    };
    fs::write(staging.path("eval.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(Outcome::Success)
}

fn run_robustness(r: &RobustnessRun, registry: &FusionRegistry, staging: &Staging, out: &mut impl Write) -> Result<Outcome> {
    let report = robustness_experiment(&r.experiment, registry)?;
    report.write_csv(fs::File::create(staging.path("robustness.csv"))?)?;
    fs::write(staging.path("summary.json"), report.summary_json()?)?;
    write!(out, "{}", report.format_grid())?;
    Ok(Outcome::Success)
}

fn run_genscene(r: &GensceneRun, staging: &Staging, out: &mut impl Write) -> Result<Outcome> {
    let scene = generate_scene(&r.scene)?;
    let dir = staging.path("scene");
    fs::create_dir(&dir)?;
    scene.save(&dir)?;
    writeln!(
        out,
        "scene seed {}: {} points, {} cameras",
        r.scene.seed,
        scene.labels.len(),
        scene.rig.cameras.len()
    )?;
    Ok(Outcome::Success)
}

/// Exit status for an error: 2 for anything the user can fix in the
/// invocation or config, 1 for failures while running.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Unknown { .. } | Error::OutputExists(_) => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_field_is_named() {
        let e = RunConfig::parse(r#"{"command":"genscene","scene":{"n_points":10,"colour":1}}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "colour"), "{e}");
        let e = RunConfig::parse(r#"{"command":"genscene","outptu_dir":"x"}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "outptu_dir"), "{e}");
        let e = RunConfig::parse(r#"{"command":"fly"}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "command"), "{e}");
    }

    #[test]
    fn defaults_fill_every_section() {
        let cfg = RunConfig::parse(r#"{"command":"train","fusion":"dca_with_dqe"}"#).unwrap();
        let RunConfig::Train(t) = cfg else { panic!() };
        assert_eq!(t.train, ExperimentConfig::default_train());
        assert_eq!(t.scene, SceneConfig::default());
        assert_eq!(t.train_scenes, 16);
    }

    #[test]
    fn seed_override_reaches_the_owning_field() {
        let mut cfg = RunConfig::parse(r#"{"command":"robustness","experiment":{"n_seeds":3}}"#).unwrap();
        cfg.set_seed(9);
        let RunConfig::Robustness(r) = cfg else { panic!() };
        assert_eq!(r.experiment.seed, 9);
    }
}
