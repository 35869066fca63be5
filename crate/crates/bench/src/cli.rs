//! Subcommands of the `boxmatch` binary.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use boxmatch::diffnum::Checkpoint;
use boxmatch::model::{InferenceOptions, MatchMode, ModelConfig};
use boxmatch::trainloop::{evaluate, evaluate_baseline, scene_suite, train, LossWeights, TrainConfig};
use boxmatch::worldsim::io::{load_scenes, save_scenes, ScenesHeader};
use boxmatch::worldsim::rng::derive_seed;
use boxmatch::worldsim::{DisturbanceSpec, Scene, SimConfig};
use boxmatch::Model;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use crate::grid::SweepGrid;
use crate::report::write_report;
use crate::sweep::{run_ablation, run_sweep, EvalSetup};
use crate::table::{read_csv, write_csv, SweepRow};
use crate::UsageError;

pub const SEED_ENV: &str = "BOXMATCH_SEED";

#[derive(Debug, Parser)]
#[command(name = "boxmatch", version, about = "Calibration-free box matching: simulate, train, evaluate, sweep")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scene suite as JSONL.
    Gen(GenArgs),
    /// Train a model on a scene file and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate one matcher on a scene file under one disturbance.
    Eval(EvalArgs),
    /// Evaluate both matchers over a disturbance grid into a CSV table.
    Sweep(SweepArgs),
    /// Render charts and a summary from a results table.
    Report(ReportArgs),
    /// Compare inference variants (K, one/two-level, LiDAR only).
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Simulation config JSON (defaults when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    /// Training config JSON (defaults when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Simulation config JSON; the scene settings always come from the scene file.
    #[arg(long)]
    pub sim_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Matcher {
    Fbm,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    TwoLevel,
    OneLevel,
    LidarOnly,
}

impl From<ModeArg> for MatchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TwoLevel => MatchMode::TwoLevel,
            ModeArg::OneLevel => MatchMode::OneLevel,
            ModeArg::LidarOnly => MatchMode::LidarOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct InferenceArgs {
    /// Candidate views per proposal.
    #[arg(long, default_value_t = 2)]
    pub top_k: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::TwoLevel)]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub scenes: PathBuf,
    /// Disturbance JSON (clean when omitted).
    #[arg(long)]
    pub disturb: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Matcher::Fbm)]
    pub matcher: Matcher,
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// Report path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scenes: PathBuf,
    /// Comma-separated axes: clean, async, misalign, drop, noise, multi, calib, or all.
    #[arg(long, default_value = "all")]
    pub grid: String,
    #[command(flatten)]
    pub inference: InferenceArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Svg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results CSV from `sweep` or `ablate`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "match_f1")]
    pub metric: String,
    #[arg(long, value_enum, default_value_t = ReportFormat::Svg)]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// `--seed`, unless `BOXMATCH_SEED` is set.
pub fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| UsageError(format!("{SEED_ENV}=`{v}` is not an unsigned integer")).into()),
        Err(std::env::VarError::NotPresent) => Ok(flag),
        Err(e) => Err(UsageError(format!("{SEED_ENV}: {e}")).into()),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_scene_file(path: &Path) -> Result<(ScenesHeader, Vec<Scene>)> {
    Ok(load_scenes(path)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Simulation settings for evaluating `ck` on scenes from `header`: the
/// checkpoint's own simulation config with the scene file's scene config.
fn eval_sim(ck: Option<&Checkpoint>, header: &ScenesHeader) -> Result<SimConfig> {
    let mut sim = match ck.map(|c| &c.config["extra"]["sim"]) {
        Some(v) if !v.is_null() => {
            serde_json::from_value(v.clone()).context("reading simulation config from checkpoint")?
        }
        _ => SimConfig::default(),
    };
    sim.scene = header.config.clone();
    sim.validate()?;
    Ok(sim)
}

fn loss_weights(ck: &Checkpoint) -> LossWeights {
    serde_json::from_value::<TrainConfig>(ck.config["extra"]["train"].clone())
        .map(|t| t.weights())
        .unwrap_or_default()
}

fn load_model(ck: &Checkpoint, sim: &SimConfig) -> Result<Model> {
    let model = Model::from_checkpoint(ck)?;
    let expected = ModelConfig::from_sim(sim);
    if model.config != expected {
        bail!(
            "checkpoint model {:?} does not fit the scene/simulation settings {:?}",
            model.config,
            expected
        );
    }
    Ok(model)
}

fn inference(args: &InferenceArgs) -> Result<InferenceOptions> {
    if args.top_k == 0 || args.top_k > 64 {
        return Err(UsageError(format!("--top-k must be in 1..=64, got {}", args.top_k)).into());
    }
    Ok(InferenceOptions {
        top_k: args.top_k,
        mode: args.mode.into(),
        ..InferenceOptions::default()
    })
}

fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(&mut f, rows)?;
    f.flush()?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let sim: SimConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    sim.validate()?;
    let scenes = scene_suite(&sim, effective_seed(a.seed)?, a.n)?;
    save_scenes(&a.out, &sim.scene, &scenes)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (header, scenes) = load_scene_file(&a.scenes)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    let seed = effective_seed(a.seed)?;
    cfg.init_seed = derive_seed(seed, 0);
    cfg.shuffle_seed = derive_seed(seed, 1);
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let mut sim: SimConfig = match &a.sim_config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    sim.scene = header.config.clone();
    let out = train(&cfg, &sim, &scenes, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  (det {:.4}  view {:.4}  pro {:.4})",
            e.epoch, e.mean.total, e.mean.det, e.mean.view, e.mean.pro
        );
    })?;
    out.checkpoint(&cfg, &sim)?.save(&a.out)?;
    eprintln!("wrote checkpoint {}", a.out.display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (header, scenes) = load_scene_file(&a.scenes)?;
    let disturb: DisturbanceSpec = match &a.disturb {
        Some(p) => read_json(p)?,
        None => DisturbanceSpec::default(),
    };
    let report = match a.matcher {
        Matcher::Baseline => {
            let ck = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let sim = eval_sim(ck.as_ref(), &header)?;
            evaluate_baseline(&scenes, &sim, &disturb, boxmatch::baseline::IOU_GATE)?
        }
        Matcher::Fbm => {
            let Some(path) = &a.checkpoint else {
                return Err(UsageError("--checkpoint is required for --matcher fbm".into()).into());
            };
            let ck = load_checkpoint(path)?;
            let sim = eval_sim(Some(&ck), &header)?;
            let model = load_model(&ck, &sim)?;
            evaluate(&model, &scenes, &sim, &disturb, &inference(&a.inference)?, &loss_weights(&ck))?
        }
    };
    let mut json = report.to_json()?;
    json.push('\n');
    match &a.out {
        Some(p) => write_file(p, json.as_bytes()),
        None => {
            std::io::stdout().write_all(json.as_bytes())?;
            Ok(())
        }
    }
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let (header, scenes) = load_scene_file(&a.scenes)?;
    let grid = SweepGrid::from_keys(&a.grid, header.config.rig.n_views)?;
    let opts = inference(&a.inference)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let sim = eval_sim(Some(&ck), &header)?;
    let model = load_model(&ck, &sim)?;
    let setup = EvalSetup {
        model: &model,
        scenes: &scenes,
        sim: &sim,
        opts,
        weights: loss_weights(&ck),
    };
    let rows = run_sweep(&setup, &grid)?;
    write_rows(&a.out, &rows)?;
    eprintln!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let f = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let rows = read_csv(BufReader::new(f)).with_context(|| format!("parsing {}", a.input.display()))?;
    if rows.first().and_then(|r| r.metric(&a.metric)).is_none() && !rows.is_empty() {
        return Err(UsageError(format!("unknown metric `{}`", a.metric)).into());
    }
    match a.format {
        ReportFormat::Svg => {
            for p in write_report(&rows, &a.metric, &a.out)? {
                eprintln!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let (header, scenes) = load_scene_file(&a.scenes)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let sim = eval_sim(Some(&ck), &header)?;
    let model = load_model(&ck, &sim)?;
    let setup = EvalSetup {
        model: &model,
        scenes: &scenes,
        sim: &sim,
        opts: InferenceOptions::default(),
        weights: loss_weights(&ck),
    };
    let rows = run_ablation(&setup)?;
    write_rows(&a.out, &rows)?;
    eprintln!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}
