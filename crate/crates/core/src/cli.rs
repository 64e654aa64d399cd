//! `fairpref` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input or config,
//! 3 runtime failure (divergence, I/O).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, GridPoint};
use crate::datagen::{load_jsonl, load_scored_pairs, save_jsonl, write_atomic, PreferencePair, World};
use crate::error::{Error, Result};
use crate::eval::{best_of_n, emit_report, evaluate_model, report_from_scores, Report, ReportFormat};
use crate::fairness::FairnessSpec;
use crate::trainer::{resume, train, trace_to_csv, Checkpoint, TrainData, TrainOutput};

/// Overrides the number of sweep worker threads.
pub const WORKERS_ENV: &str = "FAIRPREF_WORKERS";

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep.csv";

#[derive(Debug, Parser)]
#[command(name = "fairpref", version, about = "Fairness-aware preference learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the world and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress messages on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic preference dataset as JSONL.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Also write a held-out set drawn from the same world.
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Train a reward model or policy; writes a checkpoint and a trace CSV.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training pairs (JSONL); generated from the config world if omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on preference pairs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation pairs (JSONL); a held-out set is generated if omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report path; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "json")]
        format: ReportFormat,
    },
    /// Best-of-N selection over candidate pools from the config world.
    Bon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "json")]
        format: ReportFormat,
    },
    /// Report over externally scored pairs, no model needed.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Scored pairs (JSONL with group_id, chosen_score, rejected_score).
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "json")]
        format: ReportFormat,
    },
    /// Train once per point of the config's fairness grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                3
            }
        }
    }
}

fn require_file(flag: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::invalid(flag, format!("no such file: {}", path.display())))
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(path) => {
            require_file("--config", path)?;
            ExperimentConfig::load(path)?
        }
        None => ExperimentConfig::default(),
    };
    let cfg = match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require_file("--checkpoint", path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}

fn training_pairs(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<PreferencePair>> {
    match data {
        Some(path) => {
            require_file("--data", path)?;
            load_jsonl(path)
        }
        None => Ok(World::new(cfg.world.clone())?.generate_pairs()),
    }
}

fn progress(common: &Common, msg: impl AsRef<str>) {
    if !common.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn write_report<R: Report>(report: &R, out: Option<&Path>, format: ReportFormat) -> Result<()> {
    match out {
        Some(path) => emit_report(report, path, format),
        None => {
            print!("{}", report.render(format)?);
            Ok(())
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_run(dir: &Path, output: &TrainOutput) -> Result<()> {
    create_dir(dir)?;
    write_atomic(&dir.join(TRACE_FILE), trace_to_csv(&output.trace).as_bytes())?;
    write_atomic(&dir.join(CHECKPOINT_FILE), output.checkpoint.to_json()?.as_bytes())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen { common, out, heldout } => {
            let cfg = load_config(&common)?;
            let world = World::new(cfg.world.clone())?;
            let pairs = world.generate_pairs();
            save_jsonl(&pairs, &out)?;
            progress(&common, format!("wrote {} pairs to {}", pairs.len(), out.display()));
            if let Some(path) = heldout {
                let held = world.generate_heldout_pairs(cfg.eval.heldout_pairs_per_group);
                save_jsonl(&held, &path)?;
                progress(&common, format!("wrote {} held-out pairs to {}", held.len(), path.display()));
            }
            Ok(())
        }
        Command::Train {
            common,
            data,
            out,
            resume: from,
        } => {
            let cfg = load_config(&common)?;
            let pairs = training_pairs(&cfg, data.as_deref())?;
            let output = match from {
                Some(path) => resume(&load_checkpoint(&path)?, &cfg.train, TrainData::Pairs(&pairs))?,
                None => train(&cfg.train, TrainData::Pairs(&pairs))?,
            };
            write_run(&out, &output)?;
            progress(
                &common,
                format!(
                    "{}: {} steps, final loss {:.6}",
                    cfg.train.objective.as_str(),
                    output.checkpoint.step,
                    output.trace.last().map_or(f64::NAN, |r| r.loss)
                ),
            );
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
            format,
        } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint(&checkpoint)?;
            let pairs = match data {
                Some(path) => {
                    require_file("--data", &path)?;
                    load_jsonl(&path)?
                }
                None => World::new(cfg.world.clone())?.generate_heldout_pairs(cfg.eval.heldout_pairs_per_group),
            };
            let report = evaluate_model(ck.model.net(), &pairs, &cfg.train.fairness)?;
            write_report(&report, out.as_deref(), format)
        }
        Command::Bon {
            common,
            checkpoint,
            out,
            format,
        } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint(&checkpoint)?;
            let world = World::new(cfg.world.clone())?;
            let pools = world.generate_pools(cfg.eval.num_pools, cfg.eval.pool_size);
            let report = best_of_n(ck.model.net(), &pools, &cfg.eval.n_values, cfg.world.num_groups)?;
            write_report(&report, out.as_deref(), format)
        }
        Command::Audit {
            common,
            scores,
            out,
            format,
        } => {
            let cfg = load_config(&common)?;
            require_file("--scores", &scores)?;
            let scored = load_scored_pairs(&scores)?;
            let report = report_from_scores(&scored, &cfg.train.fairness)?;
            write_report(&report, out.as_deref(), format)
        }
        Command::Sweep { common, data, out } => {
            let cfg = load_config(&common)?;
            let pairs = training_pairs(&cfg, data.as_deref())?;
            sweep(&common, &cfg, &pairs, &out)
        }
    }
}

fn worker_count(jobs: usize) -> Result<usize> {
    let n = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::invalid(WORKERS_ENV, format!("`{v}` is not a positive integer")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(n.min(jobs).max(1))
}

fn sweep(common: &Common, cfg: &ExperimentConfig, pairs: &[PreferencePair], out: &Path) -> Result<()> {
    let grid = cfg.sweep.grid();
    let configs: Vec<_> = grid
        .iter()
        .map(|p| {
            let mut train_cfg = cfg.train.clone();
            train_cfg.fairness = FairnessSpec {
                tau: p.tau,
                alpha: p.alpha,
                gamma: p.gamma,
                ..train_cfg.fairness
            };
            train_cfg.validate().map(|()| train_cfg)
        })
        .collect::<Result<_>>()?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<TrainOutput>>>> = Mutex::new((0..grid.len()).map(|_| None).collect());
    std::thread::scope(|s| -> Result<()> {
        for _ in 0..worker_count(grid.len())? {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let r = train(&configs[i], TrainData::Pairs(pairs));
                results.lock().expect("sweep results lock")[i] = Some(r);
            });
        }
        Ok(())
    })?;

    let outputs: Vec<TrainOutput> = results
        .into_inner()
        .expect("sweep results lock")
        .into_iter()
        .map(|r| r.expect("every grid point ran"))
        .collect::<Result<_>>()?;

    create_dir(out)?;
    let mut summary = String::from("tau,alpha,gamma,steps,final_loss,final_utility_term,final_fairness_value,final_batch_jain,trace\n");
    for (point, output) in grid.iter().zip(&outputs) {
        let name = trace_name(point);
        write_atomic(&out.join(&name), trace_to_csv(&output.trace).as_bytes())?;
        let last = output.trace.last().copied();
        let field = |f: fn(&crate::trainer::TraceRow) -> f64| last.as_ref().map_or(f64::NAN, f);
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            point.tau,
            point.alpha,
            point.gamma,
            output.checkpoint.step,
            field(|r| r.loss),
            field(|r| r.utility_term),
            field(|r| r.fairness_value),
            field(|r| r.batch_jain),
            name
        ));
        progress(common, format!("{}: {} steps", point.label(), output.checkpoint.step));
    }
    write_atomic(&out.join(SWEEP_SUMMARY_FILE), summary.as_bytes())
}

pub fn trace_name(point: &GridPoint) -> String {
    format!("trace_{}.csv", point.label())
}
