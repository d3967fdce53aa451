//! Command-line front end.
//!
//! Report files go to `--report` when given, otherwise to the directory
//! named by [`REPORT_DIR_ENV`], otherwise to `reports/` (the run directory
//! for `train`).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{bench_model_config, run_bench, BenchSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, MODEL_TOL, OP_TOL};
use crate::model::{load_checkpoint, save_checkpoint, Captioner, FusionMode, ModelConfig};
use crate::traineval::data::{load_dataset, save_dataset};
use crate::traineval::eval::{format_sweep, metric_rows};
use crate::traineval::{generate_synthetic, mismatch_sweep, train, Dataset, SyntheticTaskSpec, TrainConfig, EVAL_SEED};

pub const REPORT_DIR_ENV: &str = "AVFUSE_REPORT_DIR";

/// The structured-text config file. Every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: SyntheticTaskSpec,
    pub train: TrainConfig,
    pub bench: BenchSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message().trim())))
    }
}

#[derive(Parser, Debug)]
#[command(name = "avfuse", about = "Entropy-gated audio-visual fusion: train, evaluate, benchmark")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a captioner and write a checkpoint plus metric reports.
    Train(TrainArgs),
    /// Evaluate a checkpoint under test-time shuffling.
    Eval(EvalArgs),
    /// Time gated against concatenation fusion over frame counts.
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset as JSONL.
    GenData(GenDataArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    shuffle_prob: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory with train/val/test JSONL; generated from the
    /// config's task section when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides the config's fusion mode.
    #[arg(long)]
    mode: Option<FusionMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.5,1.0")]
    test_shuffle_grid: Vec<f64>,
    /// Report directory; defaults to the variable, then `--out`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.5,1.0")]
    test_shuffle_grid: Vec<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    frames: Option<Vec<usize>>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random configurations per check.
    #[arg(long, default_value_t = 50)]
    configs: usize,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// TOML file holding a task spec, either bare or under `[task]`.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn report_dir(flag: Option<&Path>) -> PathBuf {
    match (flag, std::env::var_os(REPORT_DIR_ENV)) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(env)) => PathBuf::from(env),
        (None, None) => PathBuf::from("reports"),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map(RunConfig::load).transpose().map(Option::unwrap_or_default)
}

fn dataset(data: Option<&Path>, task: &SyntheticTaskSpec) -> Result<Dataset> {
    match data {
        Some(dir) => load_dataset(dir),
        None => generate_synthetic(task),
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid(format!("test shuffle grid {grid:?} must be nonempty probabilities in [0, 1]")));
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(p) = args.shuffle_prob {
        cfg.train.shuffle_prob = p;
    }
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    if let Some(m) = args.mode {
        cfg.model.fusion_mode = m;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    check_grid(&args.test_shuffle_grid)?;
    cfg.train.validate()?;
    let data = dataset(args.data.as_deref(), &cfg.task)?;
    let model_cfg = cfg.task.fit_config(&cfg.model);
    let mut model = Captioner::new(model_cfg)?;
    writeln!(
        out,
        "training {} model: {} parameters, {} samples, {} epochs, shuffle_prob {}",
        model.mode(),
        model.params().numel(),
        data.train.len(),
        cfg.train.epochs,
        cfg.train.shuffle_prob
    )?;
    let mut report = train(&mut model, &data.train, &cfg.train)?;
    for e in &report.epochs {
        let fmt = |g: Option<f64>| g.map_or("-".to_string(), |g| format!("{g:.6}"));
        writeln!(
            out,
            "epoch {:>3} loss {:.6} gate matched {} mismatched {} ({} re-paired)",
            e.epoch,
            e.loss,
            fmt(e.gate_matched),
            fmt(e.gate_mismatched),
            e.mismatched
        )?;
    }
    let sweep = mismatch_sweep(&model, &data.test, &args.test_shuffle_grid, EVAL_SEED)?;
    write!(out, "{}", format_sweep(model.mode().as_str(), &sweep))?;
    report.sweep = sweep;

    std::fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    let reports = match (&args.report, std::env::var_os(REPORT_DIR_ENV)) {
        (Some(p), _) => p.clone(),
        (None, Some(env)) => PathBuf::from(env),
        (None, None) => args.out.clone(),
    };
    write_file(&reports.join("train_report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_file(&reports.join("metrics.jsonl"), &jsonl(&metric_rows(model.mode().as_str(), &report.sweep))?)?;
    writeln!(out, "parameter checksum {:016x}", model.params().checksum())?;
    writeln!(out, "wrote {} and reports in {}", ckpt.display(), reports.display())?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    check_grid(&args.test_shuffle_grid)?;
    let cfg = load_config(args.config.as_deref())?;
    let model = load_checkpoint(&args.checkpoint)?;
    let data = dataset(args.data.as_deref(), &cfg.task)?;
    let sweep = mismatch_sweep(&model, &data.test, &args.test_shuffle_grid, seed.unwrap_or(EVAL_SEED))?;
    write!(out, "{}", format_sweep(model.mode().as_str(), &sweep))?;
    for row in &sweep {
        if let (Some(m), Some(x)) = (row.gates.matched, row.gates.mismatched) {
            writeln!(out, "shuffle {:.2}: mean gate matched {m:.6} mismatched {x:.6}", row.probability)?;
        }
    }
    let dir = report_dir(args.report.as_deref());
    write_file(&dir.join("metrics.jsonl"), &jsonl(&metric_rows(model.mode().as_str(), &sweep))?)?;
    writeln!(out, "wrote {}", dir.join("metrics.jsonl").display())?;
    Ok(())
}

fn cmd_bench(args: &BenchArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let mut spec = cfg.bench;
    if let Some(f) = &args.frames {
        spec.frame_counts = f.clone();
    }
    if let Some(w) = args.warmup {
        spec.warmup_runs = w;
    }
    if let Some(r) = args.runs {
        spec.timed_runs = r;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let model = bench_model_config(&spec);
    let report = run_bench(&spec, &model)?;
    write!(out, "{}", report.table())?;
    if let Some(s) = report.spread(FusionMode::Gated) {
        writeln!(out, "gated spread over frames >= 1: {:.1}%", s * 100.0)?;
    }
    writeln!(out, "concat strictly increasing: {}", report.strictly_increasing(FusionMode::Concat))?;
    let dir = report_dir(args.report.as_deref());
    let mut rows = Vec::new();
    report.write_rows(&mut rows)?;
    write_file(&dir.join("bench.jsonl"), &rows)?;
    write_file(&dir.join("bench.txt"), report.table().as_bytes())?;
    writeln!(out, "wrote {}", dir.join("bench.jsonl").display())?;
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let r = run_suite(seed.unwrap_or(0), args.configs)?;
    writeln!(out, "configurations {}", r.configurations)?;
    writeln!(
        out,
        "max relative error: operations {:.3e} fusion {:.3e} (tolerance {OP_TOL:e})",
        r.ops_max, r.fusion_max
    )?;
    writeln!(out, "max relative error: captioner {:.3e} (tolerance {MODEL_TOL:e})", r.model_max)?;
    if !r.passed() {
        return Err(Error::State("gradient check failed".into()));
    }
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let mut spec = match &args.spec {
        None => SyntheticTaskSpec::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            match toml::from_str::<SyntheticTaskSpec>(&text) {
                Ok(s) => s,
                Err(_) => {
                    toml::from_str::<RunConfig>(&text)
                        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message().trim())))?
                        .task
                }
            }
        }
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = generate_synthetic(&spec)?;
    save_dataset(&data, &args.out)?;
    let spec_text = toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&args.out.join("spec.toml"), spec_text.as_bytes())?;
    writeln!(
        out,
        "wrote {} train, {} val, {} test samples to {} (checksum {:016x})",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        args.out.display(),
        data.checksum()
    )?;
    Ok(())
}

/// Parses `argv` (program name first) and runs the command. Usage errors
/// return 2, failures 1 with a one-line `error:` diagnostic on `err`.
pub fn dispatch<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let text = e.render().to_string();
                    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("error: bad usage");
                    let _ = writeln!(err, "{line}");
                    2
                }
            };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, cli.seed, out),
        Command::Eval(a) => cmd_eval(a, cli.seed, out),
        Command::Bench(a) => cmd_bench(a, cli.seed, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, cli.seed, out),
        Command::GenData(a) => cmd_gen_data(a, cli.seed, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}
