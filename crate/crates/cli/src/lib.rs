//! Command-line front end: synthetic data, ingestion, training, evaluation,
//! prediction and inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 runtime error (I/O, divergence).

pub mod config;
pub mod heatmap;
pub mod synth;

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use star_core::eval::{
    baseline_historical_average, baseline_persistence, evaluate_rmse, rmse, rollout, series_rmse,
};
use star_core::grid::{count_flows, parse_trajectories, write_trajectories, GridSpec};
use star_core::keyframes::{fit_scaler, instance_at, make_instances, MinMaxScaler};
use star_core::model::{build_model, load_checkpoint, save_checkpoint, Checkpoint, PipelineMeta, StarConfig};
use star_core::series::{FlowFrame, FrameSeries};
use star_core::train::train;
use thiserror::Error;

use config::{require_file, require_parent, RunConfig};
use heatmap::{heatmap_export, Channel};
use synth::{synth_generate, SynthOutput, SynthSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] star_core::Error),

    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_runtime() => 3,
            CliError::Core(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Debug, Parser)]
#[command(name = "star", version, about = "Grid crowd-flow prediction with a single residual network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic frame series or trajectory CSV.
    Synth(SynthArgs),
    /// Count inflow/outflow from a trajectory CSV.
    Ingest(IngestArgs),
    /// Train a model and write its checkpoint.
    Train(RunArgs),
    /// Score the checkpoint on the held-out span against naive baselines.
    Eval(EvalArgs),
    /// Roll the model forward and export predicted frames.
    Predict(PredictArgs),
    /// Print a config, checkpoint or series summary as JSON.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Synthetic data spec (JSON).
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Bundled spec; currently `taxibj-mini`.
    #[arg(long)]
    preset: Option<String>,
    /// `.stf` for a frame series, `.csv` for trajectories (trajectory mode only).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Trajectory CSV: traj_id,timestamp,lat,lon
    #[arg(long)]
    input: PathBuf,
    /// Grid spec (JSON); alternatively take the grid from a run config.
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    grid: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Number of intervals to count; defaults to the span of the data.
    #[arg(long)]
    intervals: Option<usize>,
    /// Skip malformed lines instead of failing.
    #[arg(long)]
    lenient: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Also report per-step RMSE of iterated predictions up to this horizon.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 1)]
    horizon: usize,
    /// First predicted interval; defaults to the start of the held-out span.
    #[arg(long)]
    start: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Also write one PGM per step and channel.
    #[arg(long)]
    heatmaps: bool,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct InspectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    series: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{what} {}: {e}", path.display())))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn save_series(series: &FrameSeries, path: &Path) -> Result<usize, CliError> {
    require_parent(path, "output")?;
    Ok(series.save(path)?)
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let mut spec: SynthSpec = match (&a.spec, &a.preset) {
        (Some(path), _) => read_json(path, "synth spec")?,
        (None, Some(name)) => synth::preset(name)
            .ok_or_else(|| CliError::Usage(format!("unknown preset {name:?} (available: taxibj-mini)")))?,
        (None, None) => unreachable!("clap requires --spec or --preset"),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    require_parent(&a.out, "output")?;
    let out = synth_generate(&spec)?;
    if is_csv(&a.out) {
        let SynthOutput::Trajectories { trajectories, .. } = &out else {
            return Err(CliError::Config("CSV output needs a trajectory-mode spec".into()));
        };
        let file = File::create(&a.out).map_err(io_err(format!("creating {}", a.out.display())))?;
        let mut w = BufWriter::new(file);
        write_trajectories(trajectories, &mut w)?;
        w.flush().map_err(io_err("writing trajectories"))?;
        println!("wrote {} trajectories to {}", trajectories.len(), a.out.display());
    } else {
        let n = save_series(out.series(), &a.out)?;
        println!("wrote {} frames ({n} bytes) to {}", out.series().len(), a.out.display());
    }
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> Result<(), CliError> {
    let grid: GridSpec = match (&a.grid, &a.config) {
        (Some(path), _) => read_json(path, "grid spec")?,
        (None, Some(path)) => RunConfig::load(path)?.grid,
        (None, None) => unreachable!("clap requires --grid or --config"),
    };
    grid.validate()?;
    require_file(&a.input, "trajectory file")?;
    require_parent(&a.out, "output")?;
    let file = File::open(&a.input).map_err(io_err(format!("opening {}", a.input.display())))?;
    let parsed = parse_trajectories(BufReader::new(file), !a.lenient)?;
    let intervals = match a.intervals {
        Some(n) => n,
        None => parsed
            .trajectories
            .iter()
            .flat_map(|t| t.points.iter())
            .filter_map(|p| grid.interval_of(p.timestamp))
            .max()
            .map_or(1, |t| t + 1),
    };
    let series = count_flows(&parsed.trajectories, &grid, 0..intervals)?;
    save_series(&series, &a.out)?;
    println!(
        "counted {} trajectories into {intervals} frames ({} malformed lines skipped) -> {}",
        parsed.trajectories.len(),
        parsed.skipped,
        a.out.display()
    );
    Ok(())
}

fn load_run(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

/// Loads the series and checks it against the config's grid.
fn load_series(cfg: &RunConfig) -> Result<FrameSeries, CliError> {
    require_file(&cfg.io.series, "series")?;
    let series = FrameSeries::load(&cfg.io.series)?;
    let (g, c) = (series.grid(), &cfg.grid);
    if (g.rows, g.cols) != (c.rows, c.cols) {
        return Err(CliError::Config(format!(
            "dimension conflict: series grid is {}×{}, config grid is {}×{}",
            g.rows, g.cols, c.rows, c.cols
        )));
    }
    if g.interval_seconds != c.interval_seconds {
        return Err(CliError::Config(format!(
            "interval conflict: series uses {} s intervals, config {} s",
            g.interval_seconds, c.interval_seconds
        )));
    }
    let needed = cfg.keyframes.max_offset() + cfg.train.test_intervals + 2;
    if series.len() < needed {
        return Err(CliError::Config(format!(
            "series has {} frames; keyframes and the test span need at least {needed}",
            series.len()
        )));
    }
    Ok(series)
}

fn cmd_train(a: RunArgs) -> Result<(), CliError> {
    let cfg = load_run(&a)?;
    require_parent(&cfg.io.checkpoint, "checkpoint")?;
    if let Some(p) = &cfg.io.train_report {
        require_parent(p, "train report")?;
    }
    let series = load_series(&cfg)?;
    let fit_len = series.len() - cfg.train.test_intervals;
    let history = series.prefix(fit_len);
    let scaler = fit_scaler(history.frames());
    let instances = make_instances(&history, &cfg.keyframes, &scaler, &cfg.external)?;

    let star = cfg.star_config();
    let mut model = build_model::<f32>(&star, cfg.train.seed)?;
    println!(
        "training on {} instances ({} parameters, {} frames held out)",
        instances.len(),
        model.num_parameters(),
        cfg.train.test_intervals
    );
    let report = train(&mut model, &instances, &cfg.train_config(), &scaler)?;
    let meta = PipelineMeta {
        grid: series.grid().clone(),
        keyframes: cfg.keyframes,
        external: cfg.external.clone(),
        scaler,
    };
    save_checkpoint(&model, Some(&meta), &cfg.io.checkpoint)?;
    if let Some(p) = &cfg.io.train_report {
        let file = File::create(p).map_err(io_err(format!("creating {}", p.display())))?;
        report.write_csv(BufWriter::new(file))?;
    }
    println!(
        "early stopping ran {} epochs (best {} with validation RMSE {:.4}); checkpoint -> {}",
        report.stopped_epoch,
        report.best_epoch,
        report.best_val_rmse,
        cfg.io.checkpoint.display()
    );
    Ok(())
}

/// Names the first field where the checkpoint and the config disagree.
fn check_compatible(saved: &StarConfig, expected: &StarConfig) -> Result<(), CliError> {
    let fields = [
        ("grid rows", saved.rows, expected.rows),
        ("grid cols", saved.cols, expected.cols),
        ("input channels", saved.input_channels, expected.input_channels),
        ("external features", saved.external_dim, expected.external_dim),
        ("residual blocks", saved.num_residual_blocks, expected.num_residual_blocks),
        ("layers per block", saved.weight_layers_per_block, expected.weight_layers_per_block),
        ("filters", saved.filters, expected.filters),
        ("kernel size", saved.kernel_size, expected.kernel_size),
        ("external embedding", saved.external_embed_dim, expected.external_embed_dim),
    ];
    for (name, s, e) in fields {
        if s != e {
            return Err(CliError::Config(format!(
                "dimension conflict in {name}: checkpoint has {s}, config expects {e}"
            )));
        }
    }
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    series: FrameSeries,
    checkpoint: Checkpoint,
    scaler: MinMaxScaler,
}

fn load_trained(a: &RunArgs) -> Result<Loaded, CliError> {
    let cfg = load_run(a)?;
    require_file(&cfg.io.checkpoint, "checkpoint")?;
    let series = load_series(&cfg)?;
    let checkpoint = load_checkpoint(&cfg.io.checkpoint)?;
    check_compatible(checkpoint.model.config(), &cfg.star_config())?;
    let meta = checkpoint
        .pipeline
        .as_ref()
        .ok_or_else(|| CliError::Config("checkpoint carries no preprocessing metadata".into()))?;
    if meta.keyframes != cfg.keyframes {
        return Err(CliError::Config("checkpoint was trained with different keyframes".into()));
    }
    let scaler = meta.scaler;
    Ok(Loaded {
        cfg,
        series,
        checkpoint,
        scaler,
    })
}

#[derive(Serialize)]
struct EvalReport {
    test_intervals: usize,
    star_rmse: f64,
    persistence_rmse: f64,
    historical_average_rmse: f64,
    /// Per-step RMSE of iterated predictions, step 1 first.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    horizon_rmse: Vec<f64>,
}

/// Per-step RMSE over every rollout start in `starts` that fits in the series.
fn horizon_rmse(l: &Loaded, starts: std::ops::Range<usize>, horizon: usize) -> Result<Vec<f64>, CliError> {
    let (mut sse, mut n) = (vec![0.0f64; horizon], 0usize);
    let model = &l.checkpoint.model;
    for t0 in starts.start..=starts.end.saturating_sub(horizon) {
        let pred = rollout(model, &l.series, t0, horizon, &l.cfg.keyframes, &l.scaler, &l.cfg.external)?;
        for (h, p) in pred.iter().enumerate() {
            let r = rmse(p.data(), l.series.frames()[t0 + h].data());
            sse[h] += r * r;
        }
        n += 1;
    }
    if n == 0 {
        return Err(CliError::Config(format!(
            "horizon {horizon} is longer than the held-out span"
        )));
    }
    Ok(sse.into_iter().map(|s| (s / n as f64).sqrt()).collect())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    if a.horizon == Some(0) {
        return Err(CliError::Usage("--horizon must be at least 1".into()));
    }
    let l = load_trained(&a.run)?;
    if let Some(p) = &l.cfg.io.eval_report {
        require_parent(p, "eval report")?;
    }
    let (total, test) = (l.series.len(), l.cfg.train.test_intervals);
    let targets = total - test..total;
    let instances = targets
        .clone()
        .map(|t| instance_at(&l.series, t, &l.cfg.keyframes, &l.scaler, &l.cfg.external))
        .collect::<star_core::Result<Vec<_>>>()?;
    let star_rmse = evaluate_rmse(&l.checkpoint.model, &instances, &l.scaler)?;
    let persistence_rmse = series_rmse(&l.series, targets.clone(), |t| baseline_persistence(&l.series, t))?;
    let week = 7 * l.cfg.external.intervals_per_day;
    let historical_average_rmse = series_rmse(&l.series, targets.clone(), |t| {
        baseline_historical_average(&l.series, t, week)
    })?;
    let horizon_rmse = match a.horizon {
        Some(h) => horizon_rmse(&l, targets, h)?,
        None => Vec::new(),
    };
    println!("held-out intervals     {test}");
    println!("STAR RMSE              {star_rmse:.4}");
    println!("persistence RMSE       {persistence_rmse:.4}");
    println!("historical avg RMSE    {historical_average_rmse:.4}");
    for (h, r) in horizon_rmse.iter().enumerate() {
        println!("step {:<2} RMSE           {r:.4}", h + 1);
    }
    if let Some(p) = &l.cfg.io.eval_report {
        let report = EvalReport {
            test_intervals: test,
            star_rmse,
            persistence_rmse,
            historical_average_rmse,
            horizon_rmse,
        };
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(p, text + "\n").map_err(io_err(format!("writing {}", p.display())))?;
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), CliError> {
    if a.horizon == 0 {
        return Err(CliError::Usage("--horizon must be at least 1".into()));
    }
    let l = load_trained(&a.run)?;
    let total = l.series.len();
    let start = a.start.unwrap_or(total - l.cfg.train.test_intervals);
    if start > total {
        return Err(CliError::Config(format!("--start {start} is past the end of the series ({total} frames)")));
    }
    std::fs::create_dir_all(&a.out).map_err(io_err(format!("creating {}", a.out.display())))?;
    let model = &l.checkpoint.model;
    let frames = rollout(model, &l.series, start, a.horizon, &l.cfg.keyframes, &l.scaler, &l.cfg.external)?;

    let mut grid = l.series.grid().clone();
    grid.epoch_start = grid.interval_start(start);
    let rebased = frames
        .iter()
        .enumerate()
        .map(|(h, f)| FlowFrame::new(h, f.rows(), f.cols(), f.data().to_vec()))
        .collect::<star_core::Result<Vec<_>>>()?;
    FrameSeries::new(grid, rebased)?.save(a.out.join("predictions.stf"))?;

    let csv_path = a.out.join("rollout.csv");
    let mut csv = String::from("step,rmse\n");
    for (h, f) in frames.iter().enumerate() {
        match l.series.frame(start + h) {
            Some(truth) => csv += &format!("{},{}\n", h + 1, rmse(f.data(), truth.data())),
            None => csv += &format!("{},\n", h + 1),
        }
    }
    std::fs::write(&csv_path, csv).map_err(io_err(format!("writing {}", csv_path.display())))?;

    if a.heatmaps {
        for (h, f) in frames.iter().enumerate() {
            for ch in [Channel::Inflow, Channel::Outflow] {
                let p = a.out.join(format!("step{:02}_{}.pgm", h + 1, ch.name()));
                heatmap_export(f, ch, &p).map_err(io_err(format!("writing {}", p.display())))?;
            }
        }
    }
    println!(
        "predicted {} frames from interval {start} -> {}",
        a.horizon,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct CheckpointSummary<'a> {
    model: &'a StarConfig,
    parameters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pipeline: Option<&'a PipelineMeta>,
}

#[derive(Serialize)]
struct SeriesSummary<'a> {
    grid: &'a GridSpec,
    frames: usize,
    total_inflow: f64,
    total_outflow: f64,
    max_value: f32,
}

fn cmd_inspect(a: InspectArgs) -> Result<(), CliError> {
    let text = if let Some(path) = &a.config {
        RunConfig::load(path)?;
        let raw = std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        RunConfig::from_json(&raw)?.to_normalized_json()
    } else if let Some(path) = &a.checkpoint {
        require_file(path, "checkpoint")?;
        let ck = load_checkpoint(path)?;
        serde_json::to_string_pretty(&CheckpointSummary {
            model: ck.model.config(),
            parameters: ck.model.num_parameters(),
            pipeline: ck.pipeline.as_ref(),
        })
        .expect("summary serializes")
    } else if let Some(path) = &a.series {
        require_file(path, "series")?;
        let s = FrameSeries::load(path)?;
        let sum = |f: fn(&FlowFrame) -> &[f32]| -> f64 {
            s.frames().iter().flat_map(|fr| f(fr).iter()).map(|&v| v as f64).sum()
        };
        serde_json::to_string_pretty(&SeriesSummary {
            grid: s.grid(),
            frames: s.len(),
            total_inflow: sum(FlowFrame::inflow),
            total_outflow: sum(FlowFrame::outflow),
            max_value: s.frames().iter().flat_map(|f| f.data()).fold(0.0, |m, &v| m.max(v)),
        })
        .expect("summary serializes")
    } else {
        unreachable!("clap requires one of --config, --checkpoint, --series")
    };
    println!("{text}");
    Ok(())
}
