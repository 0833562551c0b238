use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use treesr_core::arch::MAX_ENUM_DEPTH;
use treesr_core::runner::{self, read_csv, TraceRow, TrialRow, WORKERS_ENV};
use treesr_core::targets::{catalog_json, find_target};
use treesr_core::train::run_trial_observed;
use treesr_core::{
    build_architecture, clopper_pearson, enumerate_expressible, fisher_exact, make_dataset, ExperimentMatrix, Family,
    GridSpec, HpSweep, InitStrategy, Operator, TrainConfig,
};

#[derive(Parser)]
#[command(name = "treesr", version, about = "Symbolic regression with fixed-operator expression trees")]
struct Cli {
    /// XOR-ed into every trial seed.
    #[arg(long, global = true)]
    base_seed: Option<u64>,
    /// Worker threads for experiment runs.
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment matrix.
    Run {
        matrix: PathBuf,
        /// Overrides the matrix's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a hyperparameter sweep over one cell.
    HpSweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once and print the result as JSON.
    Trial {
        #[arg(long)]
        arch: Family,
        /// Checked against the target's operator.
        #[arg(long)]
        op: Option<Operator>,
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        init: Option<InitStrategy>,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        /// JSON object of `TrainConfig` fields to override.
        #[arg(long)]
        config: Option<String>,
        /// Write a per-iteration telemetry CSV here.
        #[arg(long)]
        telemetry: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        every: usize,
    },
    /// List every formula an architecture can express.
    Enumerate {
        #[arg(long)]
        arch: Family,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value = "eml")]
        op: Operator,
        /// Print only the size of the set.
        #[arg(long)]
        count: bool,
    },
    /// Recovery-rate matrix from a trials CSV.
    Heatmap {
        trials: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Mean gradient ratio per sampled iteration from a traces CSV.
    Gradtrace {
        traces: PathBuf,
        #[arg(long)]
        cell: String,
    },
    /// Interval and test helpers.
    #[command(subcommand)]
    Stats(Stats),
    /// Print the target catalog as JSON.
    Catalog,
}

#[derive(Subcommand)]
enum Stats {
    /// Clopper-Pearson interval for k successes in n trials.
    Cp {
        successes: u64,
        trials: u64,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
    },
    /// Two-sided Fisher exact test on the table [[a, b], [c, d]].
    Fisher { a: u64, b: u64, c: u64, d: u64 },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let workers = cli.workers.filter(|&n| n > 0).unwrap_or_else(runner::default_workers);
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Run { matrix, out } => {
            let mut m = ExperimentMatrix::load(&matrix).with_context(|| format!("reading {}", matrix.display()))?;
            if let Some(s) = cli.base_seed {
                m.base_seed = s;
            }
            if out.is_some() {
                m.output_dir = out;
            }
            let bundle = runner::run_matrix(&m, workers)?;
            print_summaries(&mut stdout, &bundle)?;
        }
        Command::HpSweep { config, out } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut sweep = HpSweep::from_json(&text)?;
            if let Some(s) = cli.base_seed {
                sweep.base_seed = s;
            }
            if out.is_some() {
                sweep.output_dir = out;
            }
            let bundle = runner::run_hp_sensitivity(&sweep, workers)?;
            print_summaries(&mut stdout, &bundle)?;
        }
        Command::Trial { arch, op, target, seed, init, depth, config, telemetry, every } => {
            let target = find_target(&target)?;
            if let Some(op) = op {
                if op != target.operator {
                    bail!("target {} uses {}, not {op}", target.name, target.operator);
                }
            }
            let mut cfg: TrainConfig = match config {
                Some(json) => serde_json::from_str(&json).context("parsing --config")?,
                None => TrainConfig::default(),
            };
            cfg.seed = seed ^ cli.base_seed.unwrap_or(0);
            cfg.init_strategy = init.unwrap_or(if arch == Family::Eq6 {
                InitStrategy::Eq6Paper
            } else {
                InitStrategy::GaussSmall
            });
            let spec = build_architecture(arch, depth, target.operator)?;
            let data = make_dataset(&target, GridSpec::default())?;
            let result = match telemetry {
                Some(path) => {
                    let mut w = csv::Writer::from_path(&path)?;
                    let mut failed = None;
                    let r = run_trial_observed(&spec, &data, &cfg, every.max(1), &mut |row| {
                        if failed.is_none() {
                            failed = w.serialize(row).err();
                        }
                    })?;
                    if let Some(e) = failed {
                        return Err(e).context("writing telemetry");
                    }
                    w.flush()?;
                    r
                }
                None => treesr_core::run_trial(&spec, &data, &cfg)?,
            };
            serde_json::to_writer_pretty(&mut stdout, &result)?;
            writeln!(stdout)?;
        }
        Command::Enumerate { arch, depth, op, count } => {
            if depth > MAX_ENUM_DEPTH {
                bail!("enumeration supports depth up to {MAX_ENUM_DEPTH}");
            }
            let set = enumerate_expressible(&build_architecture(arch, depth, op)?)?;
            if count {
                writeln!(stdout, "{}", set.len())?;
            } else {
                for e in &set {
                    writeln!(stdout, "{e}")?;
                }
            }
        }
        Command::Heatmap { trials, svg } => {
            let rows: Vec<TrialRow> = read_csv(&trials).with_context(|| format!("reading {}", trials.display()))?;
            let map = runner::emit_heatmap(&rows)?;
            write!(stdout, "{}", map.to_csv())?;
            if let Some(path) = svg {
                fs::write(&path, map.to_svg()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Gradtrace { traces, cell } => {
            let rows: Vec<TraceRow> = read_csv(&traces).with_context(|| format!("reading {}", traces.display()))?;
            let points = runner::emit_gradient_trace(&rows, &cell)?;
            runner::write_trace_csv(&points, &mut stdout)?;
        }
        Command::Stats(Stats::Cp { successes, trials, confidence }) => {
            let (lo, hi) = clopper_pearson(successes, trials, confidence)?;
            writeln!(stdout, "{lo:.6} {hi:.6}")?;
        }
        Command::Stats(Stats::Fisher { a, b, c, d }) => {
            writeln!(stdout, "{:e}", fisher_exact(a, b, c, d))?;
        }
        Command::Catalog => {
            writeln!(stdout, "{}", catalog_json()?)?;
        }
    }
    Ok(())
}

fn print_summaries(out: &mut impl Write, bundle: &runner::ResultsBundle) -> Result<()> {
    for s in &bundle.summaries {
        writeln!(
            out,
            "{}\t{}/{}\t{:.3}\t[{:.3}, {:.3}]",
            s.cell_id, s.successes, s.trials, s.rate, s.ci_low, s.ci_high
        )?;
    }
    Ok(())
}
