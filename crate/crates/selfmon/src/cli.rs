//! Command-line operator surface: benchmark generation, training,
//! evaluation, the ablation grid, and trace export.
//!
//! Settings resolve as: command-line flag, then SELFMON_OUT_DIR /
//! SELFMON_THREADS environment variables (those two only), then the
//! --config file, then built-in defaults. Every artifact embeds the
//! settings it was produced with.

use crate::agent::ModelDims;
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, run_episode, DecodeMode, EpisodeRun};
use crate::inference::{normalize_progress, StepTrace};
use crate::io;
use crate::metrics::{attention_diagonality, AttentionTrace, EpisodeEval, SplitSummary};
use crate::training::{train_with, Checkpoint, EpochMetrics, TrainConfig};
use crate::worldgen::{generate_benchmark, Benchmark, Episode, GenConfig, Split, WorldParams};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const ARTIFACT_SCHEMA_VERSION: u64 = 1;

/// Optional config file. Any field left null falls back to the built-in
/// default; explicit command-line flags override fields set here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub benchmark: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    // model dims; vocabulary and feature width always come from the benchmark
    pub d_emb: Option<usize>,
    pub d_x: Option<usize>,
    pub d_h: Option<usize>,
    pub d_g: Option<usize>,
    pub d_a: Option<usize>,
    pub l_max: Option<usize>,
    pub k_max: Option<usize>,
    pub use_batch_norm: Option<bool>,
    // hyperparameters
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub lambda: Option<f64>,
    pub beam_size: Option<usize>,
    pub max_steps: Option<usize>,
    // feature flags
    pub progress_monitor: Option<bool>,
    pub beam: Option<bool>,
    pub progress_inference: Option<bool>,
    pub use_pm_score: Option<bool>,
    pub seed: Option<u64>,
    pub deterministic: Option<bool>,
    pub threads: Option<usize>,
}

#[derive(Debug, Parser)]
#[command(
    name = "selfmon",
    version,
    about = "Self-monitoring navigation agent: generate benchmarks, train, evaluate, ablate, trace"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic navigation benchmark
    Gen(GenArgs),
    /// Train the agent on a benchmark
    Train(TrainArgs),
    /// Evaluate a checkpoint under one decoding mode
    Eval(EvalArgs),
    /// Run the 2 (loss) x 3 (inference) ablation grid
    Ablate(AblateArgs),
    /// Export per-step attention and progress traces
    Trace(TraceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// 25-viewpoint worlds with 32-wide direction features
    Desk,
    /// Full-scale feature shapes (d_v = 2176) on a miniature world count
    FullScale,
}

impl Preset {
    fn config(self, seed: u64) -> GenConfig {
        match self {
            Preset::Desk => GenConfig::desk(seed),
            Preset::FullScale => {
                let mut c = GenConfig::desk(seed);
                c.world = WorldParams::full_scale_shapes();
                c.n_train_worlds = 2;
                c.episodes_per_train_world = 2;
                c.n_val_seen_episodes = 2;
                c.n_val_unseen_worlds = 1;
                c.episodes_per_unseen_world = 2;
                c
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Greedy,
    Progress,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    ValSeen,
    ValUnseen,
    All,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Config file (JSON); flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Output file; defaults to <out-dir>/benchmark.json
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    benchmark: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from a saved checkpoint instead of initializing fresh
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Weight on the action term; 1.0 disables the progress-monitor loss
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Force single-threaded, bit-reproducible execution
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    benchmark: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    beam_size: Option<usize>,
    /// Score beams by action probability alone, without the progress factor
    #[arg(long)]
    no_pm_score: bool,
    /// Defaults to both validation splits
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    benchmark: Option<PathBuf>,
    /// Checkpoint trained with the progress-monitor loss (lambda < 1)
    #[arg(long)]
    with_monitor: Option<PathBuf>,
    /// Checkpoint trained without it (lambda = 1)
    #[arg(long)]
    without_monitor: Option<PathBuf>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args)]
struct TraceArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    benchmark: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Trace a single episode by id; default traces the whole split(s)
    #[arg(long)]
    episode: Option<usize>,
    /// Defaults to both validation splits
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Output file; defaults to <out-dir>/traces.jsonl
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
}

/// Parse arguments and dispatch. The binary maps the returned error to
/// an exit code.
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Trace(a) => cmd_trace(a),
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => io::read_json_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn env_threads() -> Result<Option<usize>> {
    match std::env::var("SELFMON_THREADS") {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::Config(format!("SELFMON_THREADS must be an integer, got {s:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("SELFMON_THREADS: {e}"))),
    }
}

fn resolve_out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os("SELFMON_OUT_DIR").map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn required_path(flag: Option<PathBuf>, cfg: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| cfg.cloned())
        .ok_or_else(|| Error::Config(format!("--{what} is required (flag or config file)")))
}

/// Model dims for a fresh run: desk defaults, structural fields from the
/// benchmark, explicit config-file overrides on top.
fn resolve_dims(cfg: &RunConfig, bench: &Benchmark) -> ModelDims {
    let mut dims = ModelDims::desk(bench.vocab.len());
    dims.d_v = bench.gen_config.world.d_v();
    dims.k_max = bench.gen_config.world.k_max;
    dims.l_max = bench.gen_config.l_max;
    if let Some(v) = cfg.d_emb {
        dims.d_emb = v;
    }
    if let Some(v) = cfg.d_x {
        dims.d_x = v;
    }
    if let Some(v) = cfg.d_h {
        dims.d_h = v;
    }
    if let Some(v) = cfg.d_g {
        dims.d_g = v;
    }
    if let Some(v) = cfg.d_a {
        dims.d_a = v;
    }
    if let Some(v) = cfg.l_max {
        dims.l_max = v;
    }
    if let Some(v) = cfg.k_max {
        dims.k_max = v;
    }
    if let Some(v) = cfg.use_batch_norm {
        dims.use_batch_norm = v;
    }
    dims
}

/// A checkpoint only fits benchmarks with the same structural shape.
/// Lists every differing field so the operator sees the full diff.
fn check_compat(dims: &ModelDims, bench: &Benchmark) -> Result<()> {
    let mut diffs = Vec::new();
    if dims.vocab != bench.vocab.len() {
        diffs.push(format!(
            "vocab size: checkpoint {}, benchmark {}",
            dims.vocab,
            bench.vocab.len()
        ));
    }
    let d_v = bench.gen_config.world.d_v();
    if dims.d_v != d_v {
        diffs.push(format!("d_v: checkpoint {}, benchmark {d_v}", dims.d_v));
    }
    let k_max = bench.gen_config.world.k_max;
    if dims.k_max < k_max {
        diffs.push(format!(
            "k_max: checkpoint {} cannot cover benchmark {k_max}",
            dims.k_max
        ));
    }
    if dims.l_max < bench.gen_config.l_max {
        diffs.push(format!(
            "l_max: checkpoint {} would truncate instructions up to {}",
            dims.l_max, bench.gen_config.l_max
        ));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "checkpoint does not fit benchmark: {}",
            diffs.join("; ")
        )))
    }
}

fn resolve_threads(flag: Option<usize>, cfg: &RunConfig, deterministic: bool) -> Result<usize> {
    if deterministic {
        return Ok(1);
    }
    Ok(flag
        .map(Ok)
        .or_else(|| env_threads().transpose())
        .transpose()?
        .or(cfg.threads)
        .unwrap_or(1))
}

fn resolve_mode(
    flag: Option<ModeArg>,
    beam_size: Option<usize>,
    no_pm_score: bool,
    cfg: &RunConfig,
) -> Result<DecodeMode> {
    let beam_size = beam_size.or(cfg.beam_size).unwrap_or(5);
    let use_pm_score = if no_pm_score {
        false
    } else {
        cfg.use_pm_score.unwrap_or(true)
    };
    let chosen = match flag {
        Some(m) => m,
        None => match (
            cfg.beam.unwrap_or(false),
            cfg.progress_inference.unwrap_or(false),
        ) {
            (true, true) => {
                return Err(Error::Config(
                    "config sets both beam and progress_inference; pass --mode to disambiguate"
                        .into(),
                ))
            }
            (true, false) => ModeArg::Beam,
            (false, true) => ModeArg::Progress,
            (false, false) => ModeArg::Greedy,
        },
    };
    Ok(match chosen {
        ModeArg::Greedy => DecodeMode::Greedy,
        ModeArg::Progress => DecodeMode::Progress,
        ModeArg::Beam => DecodeMode::Beam {
            beam_size,
            use_pm_score,
        },
    })
}

fn resolve_splits(arg: Option<SplitArg>) -> Vec<Split> {
    match arg {
        None => vec![Split::ValSeen, Split::ValUnseen],
        Some(SplitArg::All) => vec![Split::Train, Split::ValSeen, Split::ValUnseen],
        Some(SplitArg::Train) => vec![Split::Train],
        Some(SplitArg::ValSeen) => vec![Split::ValSeen],
        Some(SplitArg::ValUnseen) => vec![Split::ValUnseen],
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let seed = args.seed.or(cfg.seed).unwrap_or(7);
    let preset = args.preset.unwrap_or(Preset::Desk);
    let gen_config = preset.config(seed);
    let bench = generate_benchmark(&gen_config)?;
    let out = match args.out {
        Some(p) => p,
        None => {
            let dir = resolve_out_dir(args.out_dir, &cfg);
            ensure_dir(&dir)?;
            dir.join("benchmark.json")
        }
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    bench.save(&out)?;
    let count = |s: Split| bench.episodes_for(s).len();
    println!("benchmark: {}", out.display());
    println!(
        "worlds: {} ({} train + {} unseen)",
        bench.worlds.len(),
        gen_config.n_train_worlds,
        gen_config.n_val_unseen_worlds
    );
    println!(
        "episodes: train {}, val_seen {}, val_unseen {}",
        count(Split::Train),
        count(Split::ValSeen),
        count(Split::ValUnseen)
    );
    println!(
        "vocab: {} tokens; d_v: {}; success threshold: {:.3} m",
        bench.vocab.len(),
        gen_config.world.d_v(),
        bench.success_threshold_m
    );
    Ok(())
}

fn apply_train_settings(tc: &mut TrainConfig, args: &TrainArgs, cfg: &RunConfig, threads: usize) {
    // config file first, explicit flags on top
    if let Some(v) = cfg.seed {
        tc.seed = v;
    }
    if let Some(v) = cfg.lr {
        tc.lr = v;
    }
    if let Some(v) = cfg.batch {
        tc.batch_size = v;
    }
    if let Some(v) = cfg.epochs {
        tc.epochs = v;
    }
    if let Some(v) = cfg.max_steps {
        tc.max_steps = v;
    }
    if let Some(v) = cfg.lambda {
        tc.lambda = v;
    } else if cfg.progress_monitor == Some(false) {
        tc.lambda = 1.0;
    }
    if let Some(v) = args.seed {
        tc.seed = v;
    }
    if let Some(v) = args.lr {
        tc.lr = v;
    }
    if let Some(v) = args.batch {
        tc.batch_size = v;
    }
    if let Some(v) = args.epochs {
        tc.epochs = v;
    }
    if let Some(v) = args.max_steps {
        tc.max_steps = v;
    }
    if let Some(v) = args.lambda {
        tc.lambda = v;
    }
    tc.threads = threads;
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let bench_path = required_path(args.benchmark.clone(), cfg.benchmark.as_ref(), "benchmark")?;
    let bench = Benchmark::load(&bench_path)?;
    let out_dir = resolve_out_dir(args.out_dir.clone(), &cfg);
    ensure_dir(&out_dir)?;
    let deterministic = args.deterministic || cfg.deterministic.unwrap_or(false);
    let threads = resolve_threads(args.threads, &cfg, deterministic)?;
    let resuming = args.resume.is_some();
    let start = match &args.resume {
        Some(path) => {
            let mut ck = Checkpoint::load(path)?;
            apply_train_settings(&mut ck.train_config, &args, &cfg, threads);
            ck
        }
        None => {
            let mut tc = TrainConfig::desk(7);
            apply_train_settings(&mut tc, &args, &cfg, threads);
            let dims = resolve_dims(&cfg, &bench);
            Checkpoint::fresh(&dims, &tc)?
        }
    };
    check_compat(&start.dims, &bench)?;
    println!(
        "training: epochs {}..{}, lr {}, batch {}, lambda {}, seed {}, threads {}",
        start.next_epoch,
        start.train_config.epochs,
        start.train_config.lr,
        start.train_config.batch_size,
        start.train_config.lambda,
        start.train_config.seed,
        start.train_config.threads
    );
    let outcome = train_with(&bench, &start, |m| {
        println!(
            "epoch {:>3} {:<10} NE {:>6.3}  SR {:>5.3}  OSR {:>5.3}  SPL {:>5.3}  loss {:>8.4}",
            m.epoch,
            m.split.to_string(),
            m.ne,
            m.sr,
            m.osr,
            m.spl,
            m.loss
        );
    })?;
    let final_path = out_dir.join("checkpoint.json");
    outcome.final_checkpoint.save(&final_path)?;
    println!(
        "final checkpoint: {} (optimizer step {})",
        final_path.display(),
        outcome.final_checkpoint.step
    );
    if outcome.improved {
        let best_path = out_dir.join("best.json");
        outcome.best_checkpoint.save(&best_path)?;
        println!(
            "best checkpoint: {} (val_unseen SR {:.3})",
            best_path.display(),
            outcome.best_checkpoint.best_val_unseen_sr
        );
    }
    let metrics_path = out_dir.join("metrics.jsonl");
    write_metrics_log(
        &metrics_path,
        resuming,
        &bench_path,
        &outcome.final_checkpoint,
        &outcome.log,
    )?;
    println!("metrics log: {}", metrics_path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricsHeader<'a> {
    schema_version: u64,
    benchmark: String,
    train_config: &'a TrainConfig,
    dims: &'a ModelDims,
    next_epoch_at_start: usize,
}

fn write_metrics_log(
    path: &Path,
    append: bool,
    bench_path: &Path,
    ck: &Checkpoint,
    log: &[EpochMetrics],
) -> Result<()> {
    let mut open = std::fs::OpenOptions::new();
    open.create(true);
    if append {
        open.append(true);
    } else {
        open.write(true).truncate(true);
    }
    let mut file = open.open(path).map_err(|e| Error::io(path, e))?;
    let first_epoch = log.first().map_or(ck.next_epoch, |m| m.epoch);
    io::append_jsonl(
        &mut file,
        &MetricsHeader {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            benchmark: bench_path.display().to_string(),
            train_config: &ck.train_config,
            dims: &ck.dims,
            next_epoch_at_start: first_epoch,
        },
    )?;
    for line in log {
        io::append_jsonl(&mut file, line)?;
    }
    file.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Everything needed to reread one evaluated episode.
#[derive(Debug, Serialize)]
struct EpisodeReport {
    episode_id: usize,
    split: Split,
    trajectory: Vec<usize>,
    stopped: bool,
    fallback_used: bool,
    steps: Vec<StepTrace>,
    ne: f64,
    success: bool,
    oracle: bool,
    spl: f64,
    shortest_m: f64,
    taken_m: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    stitched_trajectory: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stitched: Option<EpisodeEval>,
}

impl EpisodeReport {
    fn from_run(run: EpisodeRun) -> Self {
        let (stitched_trajectory, stitched) = match run.stitched {
            Some((walk, eval)) => (Some(walk), Some(eval)),
            None => (None, None),
        };
        EpisodeReport {
            episode_id: run.episode_id,
            split: run.split,
            trajectory: run.log.trajectory,
            stopped: run.log.stopped,
            fallback_used: run.log.fallback_used,
            steps: run.log.steps,
            ne: run.eval.ne,
            success: run.eval.success,
            oracle: run.eval.oracle,
            spl: run.eval.spl,
            shortest_m: run.eval.shortest_m,
            taken_m: run.eval.taken_m,
            stitched_trajectory,
            stitched,
        }
    }
}

#[derive(Debug, Serialize)]
struct EvalArtifact<'a> {
    schema_version: u64,
    benchmark: String,
    checkpoint: String,
    mode: DecodeMode,
    split: Split,
    max_steps: usize,
    dims: &'a ModelDims,
    train_config: &'a TrainConfig,
    summary: SplitSummary,
    episodes: Vec<EpisodeReport>,
}

fn eval_table_header() -> String {
    format!(
        "{:<11} {:>4} {:>8} {:>7} {:>7} {:>7}",
        "split", "n", "NE", "SR", "OSR", "SPL"
    )
}

fn eval_table_row(split: &str, s: &SplitSummary) -> String {
    format!(
        "{:<11} {:>4} {:>8.3} {:>7.3} {:>7.3} {:>7.3}",
        split, s.n, s.ne, s.sr, s.osr, s.spl
    )
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let bench_path = required_path(args.benchmark, cfg.benchmark.as_ref(), "benchmark")?;
    let bench = Benchmark::load(&bench_path)?;
    let ck_path = args
        .checkpoint
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let ck = Checkpoint::load(&ck_path)?;
    check_compat(&ck.dims, &bench)?;
    let (params, _adam, bn) = ck.restore()?;
    let mode = resolve_mode(args.mode, args.beam_size, args.no_pm_score, &cfg)?;
    let max_steps = args
        .max_steps
        .or(cfg.max_steps)
        .unwrap_or(ck.train_config.max_steps);
    let out_dir = resolve_out_dir(args.out_dir, &cfg);
    ensure_dir(&out_dir)?;
    println!("mode: {}", mode.label());
    println!("{}", eval_table_header());
    for split in resolve_splits(args.split) {
        let (summary, runs) =
            evaluate_split(&params, &ck.dims, &bn, &bench, split, mode, max_steps)?;
        println!("{}", eval_table_row(&split.to_string(), &summary));
        let artifact = EvalArtifact {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            benchmark: bench_path.display().to_string(),
            checkpoint: ck_path.display().to_string(),
            mode,
            split,
            max_steps,
            dims: &ck.dims,
            train_config: &ck.train_config,
            summary,
            episodes: runs.into_iter().map(EpisodeReport::from_run).collect(),
        };
        let file = out_dir.join(format!("eval_{}_{}.json", mode.label(), split));
        io::write_json_file(&file, &artifact)?;
        println!("  wrote {}", file.display());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationRow {
    monitor: bool,
    inference: String,
    mode: DecodeMode,
    seen: SplitSummary,
    unseen: SplitSummary,
}

#[derive(Debug, Serialize)]
struct AblationArtifact {
    schema_version: u64,
    benchmark: String,
    beam_size: usize,
    rows: Vec<AblationRow>,
    skipped: Vec<String>,
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let bench_path = required_path(args.benchmark, cfg.benchmark.as_ref(), "benchmark")?;
    let bench = Benchmark::load(&bench_path)?;
    let out_dir = resolve_out_dir(args.out_dir, &cfg);
    ensure_dir(&out_dir)?;
    let beam_size = args.beam_size.or(cfg.beam_size).unwrap_or(5);
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let variants: [(&str, bool, Option<PathBuf>); 2] = [
        ("no", false, args.without_monitor),
        ("yes", true, args.with_monitor),
    ];
    for (label, monitor, path) in variants {
        let Some(path) = path else {
            skipped.push(format!("monitor={label}: no checkpoint given"));
            continue;
        };
        if !path.exists() {
            skipped.push(format!("monitor={label}: {} not found", path.display()));
            continue;
        }
        let ck = Checkpoint::load(&path)?;
        check_compat(&ck.dims, &bench)?;
        let (params, _adam, bn) = ck.restore()?;
        let max_steps = args
            .max_steps
            .or(cfg.max_steps)
            .unwrap_or(ck.train_config.max_steps);
        // the monitor-less model scores beams without the progress factor
        let modes = [
            ("greedy".to_string(), DecodeMode::Greedy),
            ("progress-inference".to_string(), DecodeMode::Progress),
            (
                if monitor {
                    format!("beam{beam_size} (pm score)")
                } else {
                    format!("beam{beam_size} (plain)")
                },
                DecodeMode::Beam {
                    beam_size,
                    use_pm_score: monitor,
                },
            ),
        ];
        for (inference, mode) in modes {
            let (seen, _) = evaluate_split(
                &params,
                &ck.dims,
                &bn,
                &bench,
                Split::ValSeen,
                mode,
                max_steps,
            )?;
            let (unseen, _) = evaluate_split(
                &params,
                &ck.dims,
                &bn,
                &bench,
                Split::ValUnseen,
                mode,
                max_steps,
            )?;
            rows.push(AblationRow {
                monitor,
                inference,
                mode,
                seen,
                unseen,
            });
        }
    }
    println!(
        "{:<8} {:<22} | {:>33} | {:>33}",
        "", "", "val_seen", "val_unseen"
    );
    println!(
        "{:<8} {:<22} | {:>8} {:>7} {:>8} {:>7} | {:>8} {:>7} {:>8} {:>7}",
        "monitor", "inference", "NE", "SR", "OSR", "SPL", "NE", "SR", "OSR", "SPL"
    );
    for row in &rows {
        println!(
            "{:<8} {:<22} | {:>8.3} {:>7.3} {:>8.3} {:>7.3} | {:>8.3} {:>7.3} {:>8.3} {:>7.3}",
            if row.monitor { "yes" } else { "no" },
            row.inference,
            row.seen.ne,
            row.seen.sr,
            row.seen.osr,
            row.seen.spl,
            row.unseen.ne,
            row.unseen.sr,
            row.unseen.osr,
            row.unseen.spl
        );
    }
    for s in &skipped {
        println!("skipped: {s}");
    }
    let artifact = AblationArtifact {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        benchmark: bench_path.display().to_string(),
        beam_size,
        rows,
        skipped,
    };
    let file = out_dir.join("ablation.json");
    io::write_json_file(&file, &artifact)?;
    println!("wrote {}", file.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TraceHeader<'a> {
    schema_version: u64,
    benchmark: String,
    checkpoint: String,
    mode: &'static str,
    max_steps: usize,
    dims: &'a ModelDims,
}

#[derive(Debug, Serialize)]
struct TraceRecord<'a> {
    episode_id: usize,
    split: Split,
    t: usize,
    viewpoint: usize,
    action: usize,
    p: &'a [f64],
    alpha: &'a [f64],
    beta: &'a [f64],
    p_pm: f64,
}

fn cmd_trace(args: TraceArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let bench_path = required_path(args.benchmark, cfg.benchmark.as_ref(), "benchmark")?;
    let bench = Benchmark::load(&bench_path)?;
    let ck_path = args
        .checkpoint
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let ck = Checkpoint::load(&ck_path)?;
    check_compat(&ck.dims, &bench)?;
    let (params, _adam, bn) = ck.restore()?;
    let max_steps = args
        .max_steps
        .or(cfg.max_steps)
        .unwrap_or(ck.train_config.max_steps);
    let episodes: Vec<&Episode> = match args.episode {
        Some(id) => vec![bench
            .episodes
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Data(format!("no episode with id {id}")))?],
        None => resolve_splits(args.split)
            .into_iter()
            .flat_map(|s| bench.episodes_for(s))
            .collect(),
    };
    let out = match args.out {
        Some(p) => p,
        None => {
            let dir = resolve_out_dir(args.out_dir, &cfg);
            ensure_dir(&dir)?;
            dir.join("traces.jsonl")
        }
    };
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?,
    );
    io::append_jsonl(
        &mut file,
        &TraceHeader {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            benchmark: bench_path.display().to_string(),
            checkpoint: ck_path.display().to_string(),
            mode: "greedy",
            max_steps,
            dims: &ck.dims,
        },
    )?;
    let mut success_traces = Vec::new();
    let mut final_success = Vec::new();
    let mut final_failure = Vec::new();
    for episode in episodes {
        let run = run_episode(
            &params,
            &ck.dims,
            &bn,
            &bench,
            episode,
            DecodeMode::Greedy,
            max_steps,
        )?;
        for step in &run.log.steps {
            io::append_jsonl(
                &mut file,
                &TraceRecord {
                    episode_id: episode.id,
                    split: episode.split,
                    t: step.t,
                    viewpoint: step.viewpoint,
                    action: step.action,
                    p: &step.p,
                    alpha: &step.alpha,
                    beta: &step.beta,
                    p_pm: step.p_pm,
                },
            )?;
        }
        let final_pm = normalize_progress(run.log.steps.last().map_or(0.0, |s| s.p_pm));
        if run.eval.success {
            final_success.push(final_pm);
            success_traces.push(AttentionTrace {
                alphas: run.log.steps.iter().map(|s| s.alpha.clone()).collect(),
                real_len: run.instruction_len.min(ck.dims.l_max),
            });
        } else {
            final_failure.push(final_pm);
        }
    }
    file.flush().map_err(|e| Error::io(&out, e))?;
    println!(
        "traced {} episodes -> {}",
        final_success.len() + final_failure.len(),
        out.display()
    );
    if success_traces.is_empty() {
        println!("attention diagonality: no successful episodes to measure");
    } else {
        let report = attention_diagonality(&success_traces)?;
        println!(
            "attention diagonality (successful episodes): spearman {:.3} over {} step pairs{}",
            report.spearman,
            report.pairs,
            if report.degenerate { " (degenerate)" } else { "" }
        );
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    match (final_success.is_empty(), final_failure.is_empty()) {
        (false, false) => {
            let s = mean(&final_success);
            let f = mean(&final_failure);
            println!(
                "final normalized progress: success {:.3} (n={}), failure {:.3} (n={}), gap {:.3}",
                s,
                final_success.len(),
                f,
                final_failure.len(),
                s - f
            );
        }
        (false, true) => println!(
            "final normalized progress: success {:.3} (n={}); no failures",
            mean(&final_success),
            final_success.len()
        ),
        (true, false) => println!(
            "final normalized progress: failure {:.3} (n={}); no successes",
            mean(&final_failure),
            final_failure.len()
        ),
        (true, true) => println!("final normalized progress: no episodes traced"),
    }
    Ok(())
}
