//! Command implementations behind the `tsfound` binary.
//!
//! Every command is a function of its configuration, input files and seed,
//! so two identical invocations write identical bytes.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};
use tsfound_core::checkpoint::{self, Checkpoint};
use tsfound_core::eval::{last_window_eval, rolling_eval, RollingOptions};
use tsfound_core::seed::sub_seed;
use tsfound_core::series::{read_series_file, write_jsonl};
use tsfound_core::synth::synth_corpus;
use tsfound_core::{
    forecast, CorpusManifest, DatasetNaive, DatasetSpec, Error, EvalReport, ForecastRequest, Forecaster, LogRecord,
    Model, ModelForecaster, Protocol, RunConfig, TimeSeries, Trainer,
};

/// Exit code for bad flags, configs or requests.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit code for failures while doing the work.
pub const EXIT_RUNTIME: i32 = 2;

/// A message plus the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME },
            message: e.to_string(),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(name = "tsfound", version, about = "Multi-resolution patch forecaster: synth, train, forecast, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Config file, or a preset name (base-paper, large-paper, desk-tiny).
    #[arg(long, value_name = "PATH")]
    pub config: Option<String>,
    /// Overrides the root seed of the config.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus described by `[data.synth]`.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train a model, writing checkpoints and a JSON-lines log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Validate the config and print the parameter count only.
        #[arg(long)]
        dry_run: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Forecast every series of an input file.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// JSON-lines or long CSV (`series_id,timestamp,value`).
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// Comma-separated subset of the trained quantile levels.
        #[arg(long, value_delimiter = ',')]
        quantiles: Option<Vec<f64>>,
    },
    /// Score a checkpoint (or the seasonal-naive baseline) on datasets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH", conflicts_with = "baseline", required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Evaluate seasonal naive instead of a model.
        #[arg(long)]
        baseline: bool,
        /// Dataset files; each file is one dataset named after its stem.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        datasets: Vec<PathBuf>,
        /// last_window or rolling.
        #[arg(long)]
        protocol: Option<Protocol>,
        /// Last-window horizon.
        #[arg(long)]
        horizon: Option<usize>,
        /// Rolling horizons, comma-separated.
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        /// Rolling stride (defaults to the horizon).
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Print the analytic parameter count of the configured model.
    ParamCount {
        #[command(flatten)]
        common: Common,
    },
}

/// Loads `--config` (required) and applies `--seed`.
pub fn load_config(common: &Common) -> CliResult<RunConfig> {
    let spec = common
        .config
        .as_deref()
        .ok_or_else(|| Failure::validation("--config is required for this command"))?;
    let mut cfg = RunConfig::load(spec)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> CliResult<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("tsfound-out"));
    fs::create_dir_all(&dir).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("cannot create output directory {}: {e}", dir.display()),
    })?;
    Ok(dir)
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: format!("{}: {e}", path.display()),
    }
}

/// Seed of the synthetic corpus stream for a run.
pub fn corpus_seed(cfg: &RunConfig) -> u64 {
    sub_seed(cfg.seed, "corpus")
}

/// Writes `corpus.jsonl` and `manifest.json` into `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<CorpusManifest> {
    let spec = cfg
        .data
        .synth
        .as_ref()
        .ok_or_else(|| Failure::validation("no generators configured: the config has no [data.synth] section"))?;
    let (series, manifest) = synth_corpus(spec, corpus_seed(cfg))?;
    write_jsonl(out.join("corpus.jsonl"), &series)?;
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| io_failure(&path, e))?;
    Ok(manifest)
}

/// Corpus file when configured, otherwise the synthetic corpus generated in memory.
pub fn training_corpus(cfg: &RunConfig) -> CliResult<Vec<TimeSeries>> {
    if let Some(path) = &cfg.data.corpus {
        return Ok(read_series_file(path, "")?);
    }
    match &cfg.data.synth {
        Some(spec) => Ok(synth_corpus(spec, corpus_seed(cfg))?.0),
        None => Err(Failure::validation("config names neither data.corpus nor [data.synth]")),
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub records: Vec<LogRecord>,
}

/// Runs (or resumes) training. Writes `train_log.jsonl`, periodic
/// checkpoints under `checkpoints/` and the final `model.tsf`. A non-finite
/// loss leaves `diagnostic.json` behind before failing.
pub fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(&LogRecord),
) -> CliResult<TrainOutcome> {
    cfg.check_paths()?;
    let resumed: Option<Checkpoint> = resume.map(checkpoint::load).transpose()?;
    if let Some(ck) = &resumed {
        checkpoint::check_compatible(&cfg.model, ck.model.config())?;
        if ck.seed != cfg.seed {
            return Err(Failure::validation(format!(
                "checkpoint was trained with seed {}, config has {}",
                ck.seed, cfg.seed
            )));
        }
    }
    let corpus = training_corpus(cfg)?;
    let mut trainer = match resumed {
        Some(ck) => {
            let opt = ck
                .opt
                .ok_or_else(|| Failure::validation("checkpoint has no optimizer state to resume from"))?;
            Trainer::new(ck.model, cfg.train.clone(), cfg.seed, corpus)?.resume(opt, ck.step)?
        }
        None => Trainer::new(Model::init(cfg.model.clone(), cfg.seed)?, cfg.train.clone(), cfg.seed, corpus)?,
    };

    let log_path = out.join("train_log.jsonl");
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| io_failure(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_failure(&ckpt_dir, e))?;
    let run = serde_json::to_value(cfg).expect("config serializes");
    let save = |trainer: &Trainer, path: &Path| {
        checkpoint::save(path, &trainer.model, Some(&trainer.opt), trainer.seed, trainer.step, run.clone())
    };

    let mut records = Vec::new();
    while !trainer.is_done() {
        let rec = match trainer.step_once() {
            Ok(r) => r,
            Err(e) => {
                let path = out.join("diagnostic.json");
                let bundle = match &e {
                    Error::NonFiniteTraining { what, step, batch } => {
                        json!({"error": e.to_string(), "what": what, "step": step, "batch": batch})
                    }
                    _ => json!({"error": e.to_string(), "step": trainer.step}),
                };
                let _ = fs::write(&path, serde_json::to_string_pretty(&bundle).expect("json") + "\n");
                return Err(e.into());
            }
        };
        let every = cfg.train.log_every.max(1);
        if rec.step % every == 0 || trainer.is_done() {
            serde_json::to_writer(&mut log, &rec).expect("log record serializes");
            log.write_all(b"\n").and_then(|()| log.flush()).map_err(|e| io_failure(&log_path, e))?;
            progress(&rec);
        }
        records.push(rec);
        if cfg.train.checkpoint_every > 0 && trainer.step % cfg.train.checkpoint_every == 0 && !trainer.is_done() {
            save(&trainer, &ckpt_dir.join(format!("step-{:07}.tsf", trainer.step)))?;
        }
    }
    log.flush().map_err(|e| io_failure(&log_path, e))?;
    let final_checkpoint = out.join("model.tsf");
    save(&trainer, &final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        records,
    })
}

fn level_key(q: f64) -> String {
    format!("{q}")
}

/// One JSON object per input series: `{"id", "point", "quantiles": {level: path}}`.
pub fn cmd_forecast(
    model: &Model<f32>,
    series: &[TimeSeries],
    horizon: usize,
    quantiles: Option<Vec<f64>>,
) -> CliResult<Vec<Value>> {
    series
        .iter()
        .map(|s| {
            let r = forecast(
                model,
                &ForecastRequest {
                    context: s.values().to_vec(),
                    horizon,
                    quantiles: quantiles.clone(),
                },
            )?;
            let mut qs = Map::new();
            for (c, &level) in r.levels.iter().enumerate() {
                qs.insert(level_key(level), json!(r.quantile_path(c)));
            }
            Ok(json!({"id": s.id, "point": r.point, "quantiles": qs}))
        })
        .collect()
}

/// Reads dataset files, naming each after its file stem.
pub fn load_datasets(paths: &[PathBuf], cfg: &RunConfig, horizon: usize) -> CliResult<Vec<DatasetSpec>> {
    paths
        .iter()
        .map(|p| {
            let series = read_series_file(p, "")?;
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
            let freq = series.first().map(|s| s.freq.clone()).unwrap_or_default();
            let period = cfg.eval.periods.get(&name).copied();
            Ok(DatasetSpec::new(name, freq, horizon, period, series)?)
        })
        .collect()
}

/// Runs the configured protocol over `datasets`.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    datasets: &[DatasetSpec],
    forecaster: &dyn Forecaster,
    context_len: usize,
) -> CliResult<EvalReport> {
    let report = match cfg.eval.protocol {
        Protocol::LastWindow => EvalReport::LastWindow(last_window_eval(datasets, forecaster)?),
        Protocol::Rolling => EvalReport::Rolling(rolling_eval(
            datasets,
            forecaster,
            &RollingOptions {
                context_len,
                horizons: cfg.eval.horizons.clone(),
                stride: cfg.eval.stride,
            },
        )?),
    };
    if report.evaluated() == 0 {
        return Err(Failure {
            code: EXIT_RUNTIME,
            message: "no dataset could be evaluated".into(),
        });
    }
    Ok(report)
}

fn write_lines(path: &Path, values: &[Value]) -> CliResult<()> {
    let file = File::create(path).map_err(|e| io_failure(path, e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        serde_json::to_writer(&mut w, v).expect("json value serializes");
        w.write_all(b"\n").map_err(|e| io_failure(path, e))?;
    }
    w.flush().map_err(|e| io_failure(path, e))
}

/// Executes a parsed command line, writing human output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    let say = |out: &mut dyn Write, text: String| {
        let _ = writeln!(out, "{text}");
    };
    match cli.command {
        Command::ParamCount { common } => {
            let cfg = load_config(&common)?;
            say(stdout, cfg.model.param_count().to_string());
        }
        Command::Synth { common } => {
            let cfg = load_config(&common)?;
            if cfg.data.synth.is_none() {
                return Err(Failure::validation("no generators configured"));
            }
            let out = out_dir(&common)?;
            let m = cmd_synth(&cfg, &out)?;
            say(
                stdout,
                format!(
                    "wrote {} series ({} gp, {} mixup) to {}",
                    m.num_series,
                    m.gp_series,
                    m.mixup_series,
                    out.join("corpus.jsonl").display()
                ),
            );
        }
        Command::Train { common, dry_run, resume } => {
            let cfg = load_config(&common)?;
            cfg.check_paths()?;
            if dry_run {
                say(stdout, format!("config ok; parameters: {}", cfg.model.param_count()));
                return Ok(());
            }
            let out = out_dir(&common)?;
            let outcome = cmd_train(&cfg, &out, resume.as_deref(), |r| {
                eprintln!(
                    "step {:>6}  lr {:.3e}  mse {:.5}  ql {:.5}  total {:.5}",
                    r.step, r.lr, r.mse, r.ql, r.total
                );
            })?;
            say(stdout, outcome.final_checkpoint.display().to_string());
        }
        Command::Forecast {
            common,
            checkpoint: ckpt,
            input,
            horizon,
            quantiles,
        } => {
            let ck = checkpoint::load(&ckpt)?;
            if common.config.is_some() {
                let cfg = load_config(&common)?;
                checkpoint::check_compatible(&cfg.model, ck.model.config())?;
            }
            let series = read_series_file(&input, "")?;
            let lines = cmd_forecast(&ck.model, &series, horizon, quantiles)?;
            match &common.out {
                Some(_) => {
                    let out = out_dir(&common)?;
                    let path = out.join("forecasts.jsonl");
                    write_lines(&path, &lines)?;
                    say(stdout, path.display().to_string());
                }
                None => {
                    for l in &lines {
                        say(stdout, l.to_string());
                    }
                }
            }
        }
        Command::Evaluate {
            common,
            checkpoint: ckpt,
            baseline,
            datasets,
            protocol,
            horizon,
            horizons,
            stride,
        } => {
            let ck = ckpt.as_deref().map(checkpoint::load).transpose()?;
            let mut cfg = match (&common.config, &ck) {
                (Some(_), _) => load_config(&common)?,
                (None, Some(ck)) => {
                    let mut cfg = RunConfig::preset("desk-tiny").expect("preset exists")?;
                    cfg.model = ck.model.config().clone();
                    cfg
                }
                (None, None) => RunConfig::preset("desk-tiny").expect("preset exists")?,
            };
            if let Some(ck) = &ck {
                checkpoint::check_compatible(&cfg.model, ck.model.config())?;
            }
            if !datasets.is_empty() {
                cfg.eval.datasets = datasets;
            }
            if let Some(p) = protocol {
                cfg.eval.protocol = p;
            }
            if let Some(h) = horizon {
                cfg.eval.horizon = h;
            }
            if let Some(h) = horizons {
                cfg.eval.horizons = h;
            }
            if stride.is_some() {
                cfg.eval.stride = stride;
            }
            cfg.validate()?;
            if cfg.eval.datasets.is_empty() {
                return Err(Failure::validation("no datasets given (--datasets or eval.datasets)"));
            }
            cfg.check_paths()?;
            let specs = load_datasets(&cfg.eval.datasets, &cfg, cfg.eval.horizon)?;
            let context_len = cfg.model.context_len;
            let report = match &ck {
                Some(ck) => cmd_evaluate(&cfg, &specs, &ModelForecaster { model: &ck.model }, context_len)?,
                None => {
                    debug_assert!(baseline);
                    cmd_evaluate(&cfg, &specs, &DatasetNaive, context_len)?
                }
            };
            let out = out_dir(&common)?;
            report.write(&out.join("report.json"), &out.join("report.csv"))?;
            let mut text = Vec::new();
            tsfound_core::eval::summarize(&report, &mut text).map_err(|e| io_failure(&out, e))?;
            let _ = stdout.write_all(&text);
        }
    }
    Ok(())
}

/// Caps rayon's worker pool from `TSFOUND_THREADS` when set.
pub fn configure_threads() -> CliResult<()> {
    match std::env::var("TSFOUND_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Failure::validation(format!("TSFOUND_THREADS must be a positive integer, got '{v}'")))?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Failure::validation(e.to_string()))
        }
        Err(_) => Ok(()),
    }
}
