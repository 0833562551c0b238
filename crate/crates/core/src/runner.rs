//! Experiment orchestration: declarative matrices of cells expanded into
//! seeded trials, executed on a worker pool, and written out as CSV.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::RateSummary;
use crate::arch::{build_architecture, Family};
use crate::error::{Error, Result};
use crate::ops::Operator;
use crate::targets::{find_target, make_dataset, GridSpec, Shape, TargetSpec};
use crate::train::{run_trial, InitStrategy, TrainConfig};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "TREESR_WORKERS";
/// Confidence level used for every interval in summaries.
pub const CONFIDENCE: f64 = 0.95;
/// Iteration whose gradient ratio is copied into the per-trial table.
pub const RATIO_ITERATION: usize = 1000;

/// Per-cell changes to the default `TrainConfig`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harden_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_iters: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_points: Option<usize>,
}

impl ConfigOverrides {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.search_iters {
            c.search_iters = v;
        }
        if let Some(v) = self.harden_iters {
            c.harden_iters = v;
        }
        if let Some(v) = self.tau_start {
            c.tau_start = v;
        }
        if let Some(v) = self.tau_end {
            c.tau_end = v;
        }
        if let Some(v) = self.penalty_max {
            c.penalty_max = v;
        }
        if let Some(v) = &self.trace_iters {
            c.trace_iters = v.clone();
        }
        if let Some(v) = self.verify_points {
            c.verify_points = v;
        }
        c
    }

    /// Overrides applied on top of other overrides.
    pub fn merged(&self, over: &ConfigOverrides) -> ConfigOverrides {
        ConfigOverrides {
            learning_rate: over.learning_rate.or(self.learning_rate),
            search_iters: over.search_iters.or(self.search_iters),
            harden_iters: over.harden_iters.or(self.harden_iters),
            tau_start: over.tau_start.or(self.tau_start),
            tau_end: over.tau_end.or(self.tau_end),
            penalty_max: over.penalty_max.or(self.penalty_max),
            trace_iters: over.trace_iters.clone().or_else(|| self.trace_iters.clone()),
            verify_points: over.verify_points.or(self.verify_points),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    /// Defaults to `<architecture>-<operator>-<target>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub architecture: Family,
    pub target: String,
    /// Optional consistency check; the operator always comes from the target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<Operator>,
    /// Seeds per init strategy.
    pub seeds: usize,
    /// Defaults to `Eq6Paper` for Eq6 and the four-way sweep otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategies: Option<Vec<InitStrategy>>,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub overrides: ConfigOverrides,
}

fn default_depth() -> usize {
    3
}

impl CellSpec {
    pub fn new(architecture: Family, target: &str, seeds: usize) -> Self {
        CellSpec {
            id: None,
            architecture,
            target: target.to_string(),
            operator: None,
            seeds,
            strategies: None,
            depth: default_depth(),
            overrides: ConfigOverrides::default(),
        }
    }

    pub fn cell_id(&self) -> String {
        match &self.id {
            Some(id) => id.clone(),
            None => {
                let op = find_target(&self.target)
                    .map(|t| t.operator.label())
                    .unwrap_or("?");
                format!("{}-{}-{}", self.architecture, op, self.target)
            }
        }
    }

    pub fn strategies(&self) -> Vec<InitStrategy> {
        match &self.strategies {
            Some(s) => s.clone(),
            None if self.architecture == Family::Eq6 => vec![InitStrategy::Eq6Paper],
            None => InitStrategy::SWEEP.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentMatrix {
    #[serde(default)]
    pub base_seed: u64,
    /// Directory for `trials.csv`, `summary.csv` and `traces.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Applied to every cell before the cell's own overrides.
    #[serde(default)]
    pub defaults: ConfigOverrides,
    #[serde(default)]
    pub cells: Vec<CellSpec>,
}

impl ExperimentMatrix {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn trial_count(&self) -> usize {
        self.cells.iter().map(|c| c.seeds * c.strategies().len()).sum()
    }
}

/// `base_seed` XOR the leading 8 bytes of SHA-256 over the trial coordinates.
pub fn trial_seed(base_seed: u64, cell_id: &str, seed_index: usize, strategy_index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(cell_id.as_bytes());
    h.update([0u8]);
    h.update((seed_index as u64).to_le_bytes());
    h.update((strategy_index as u64).to_le_bytes());
    let digest = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    base_seed ^ u64::from_le_bytes(head)
}

/// One row of `trials.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub cell_id: String,
    pub architecture: Family,
    pub operator: Operator,
    pub target: String,
    pub shape: Shape,
    pub leaves: String,
    pub seed: u64,
    pub init_strategy: InitStrategy,
    pub recovered: bool,
    pub structural_match: bool,
    pub rmse: f64,
    pub final_loss: f64,
    pub hardened_formula: String,
    pub ratio_at_1000: Option<f64>,
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell_id: String,
    pub architecture: Family,
    pub operator: Operator,
    pub target: String,
    pub shape: Shape,
    pub leaves: String,
    pub successes: u64,
    pub trials: u64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub diverged: u64,
}

/// One row of `traces.csv`: a sampled gradient ratio of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub cell_id: String,
    pub seed: u64,
    pub init_strategy: InitStrategy,
    pub iteration: usize,
    pub ratio: f64,
    pub grad_norm_x: f64,
    pub grad_norm_y: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsBundle {
    pub trials: Vec<TrialRow>,
    pub summaries: Vec<CellSummary>,
    pub traces: Vec<TraceRow>,
}

impl ResultsBundle {
    pub fn summary(&self, cell_id: &str) -> Option<&CellSummary> {
        self.summaries.iter().find(|s| s.cell_id == cell_id)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join("trials.csv"), &self.trials)?;
        write_csv(&dir.join("summary.csv"), &self.summaries)?;
        write_csv(&dir.join("traces.csv"), &self.traces)?;
        Ok(())
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// Worker count from `TREESR_WORKERS`, falling back to the CPU count.
pub fn default_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

struct PreparedCell {
    id: String,
    family: Family,
    target: TargetSpec,
    spec: crate::arch::ArchitectureSpec,
    dataset: crate::targets::Dataset,
    config: TrainConfig,
    strategies: Vec<InitStrategy>,
    seeds: usize,
}

fn prepare(matrix: &ExperimentMatrix) -> Result<Vec<PreparedCell>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(matrix.cells.len());
    for cell in &matrix.cells {
        let id = cell.cell_id();
        if !seen.insert(id.clone()) {
            return Err(Error::Config(format!("duplicate cell id {id:?}")));
        }
        let target = find_target(&cell.target)?;
        if let Some(op) = cell.operator {
            if op != target.operator {
                return Err(Error::Config(format!(
                    "cell {id:?}: target {} uses {}, not {op}",
                    target.name, target.operator
                )));
            }
        }
        let config = matrix.defaults.merged(&cell.overrides).apply(&TrainConfig::default());
        config.validate()?;
        let strategies = cell.strategies();
        if strategies.is_empty() {
            return Err(Error::Config(format!("cell {id:?} has no init strategies")));
        }
        out.push(PreparedCell {
            spec: build_architecture(cell.architecture, cell.depth, target.operator)?,
            dataset: make_dataset(&target, GridSpec::default())?,
            id,
            family: cell.architecture,
            target,
            config,
            strategies,
            seeds: cell.seeds,
        });
    }
    Ok(out)
}

/// Runs every trial of the matrix on `workers` threads and writes the CSV
/// files when the matrix names an output directory. Output does not depend
/// on the worker count.
pub fn run_matrix(matrix: &ExperimentMatrix, workers: usize) -> Result<ResultsBundle> {
    let cells = prepare(matrix)?;
    let mut jobs = Vec::new();
    for (ci, cell) in cells.iter().enumerate() {
        for (si, &strategy) in cell.strategies.iter().enumerate() {
            for k in 0..cell.seeds {
                jobs.push((ci, si, strategy, k));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<(usize, crate::train::TrialResult)>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(ci, si, strategy, k)| {
                let cell = &cells[ci];
                let mut config = cell.config.clone();
                config.seed = trial_seed(matrix.base_seed, &cell.id, k, si);
                config.init_strategy = strategy;
                run_trial(&cell.spec, &cell.dataset, &config).map(|r| (ci, r))
            })
            .collect()
    });

    let mut bundle = ResultsBundle::default();
    let mut per_cell: Vec<(u64, u64, u64)> = vec![(0, 0, 0); cells.len()];
    for res in results {
        let (ci, r) = res?;
        let cell = &cells[ci];
        let counts = &mut per_cell[ci];
        counts.0 += r.recovered as u64;
        counts.1 += 1;
        counts.2 += r.diverged as u64;
        for s in &r.trace.samples {
            bundle.traces.push(TraceRow {
                cell_id: cell.id.clone(),
                seed: r.seed,
                init_strategy: r.init_strategy,
                iteration: s.iteration,
                ratio: s.ratio,
                grad_norm_x: s.grad_norm_x,
                grad_norm_y: s.grad_norm_y,
            });
        }
        bundle.trials.push(TrialRow {
            cell_id: cell.id.clone(),
            architecture: cell.family,
            operator: cell.target.operator,
            target: cell.target.name.clone(),
            shape: cell.target.shape,
            leaves: cell.target.leaves_label(),
            seed: r.seed,
            init_strategy: r.init_strategy,
            recovered: r.recovered,
            structural_match: r.structural_match,
            rmse: r.rmse,
            final_loss: r.final_loss,
            hardened_formula: r.hardened.to_string(),
            ratio_at_1000: r.trace.at(RATIO_ITERATION).map(|s| s.ratio),
        });
    }
    for (cell, &(k, n, div)) in cells.iter().zip(&per_cell) {
        let rate = RateSummary::from_counts(k, n, CONFIDENCE)?;
        bundle.summaries.push(CellSummary {
            cell_id: cell.id.clone(),
            architecture: cell.family,
            operator: cell.target.operator,
            target: cell.target.name.clone(),
            shape: cell.target.shape,
            leaves: cell.target.leaves_label(),
            successes: rate.successes,
            trials: rate.trials,
            rate: rate.rate,
            ci_low: rate.ci_low,
            ci_high: rate.ci_high,
            diverged: div,
        });
    }
    if let Some(dir) = &matrix.output_dir {
        bundle.write_to(dir)?;
    }
    Ok(bundle)
}

/// Hyperparameter sweep over one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpSweep {
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub architecture: Family,
    pub target: String,
    pub seeds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategies: Option<Vec<InitStrategy>>,
    /// Defaults to [`default_hp_grid`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub configs: Option<Vec<ConfigOverrides>>,
}

impl HpSweep {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The equivalent matrix: one cell per configuration, ids suffixed `#<i>`.
    pub fn to_matrix(&self) -> ExperimentMatrix {
        let configs = self.configs.clone().unwrap_or_else(default_hp_grid);
        let base = CellSpec::new(self.architecture, &self.target, self.seeds).cell_id();
        let cells = configs
            .into_iter()
            .enumerate()
            .map(|(i, overrides)| CellSpec {
                id: Some(format!("{base}#{i}")),
                strategies: self.strategies.clone(),
                overrides,
                ..CellSpec::new(self.architecture, &self.target, self.seeds)
            })
            .collect();
        ExperimentMatrix {
            base_seed: self.base_seed,
            output_dir: self.output_dir.clone(),
            defaults: ConfigOverrides::default(),
            cells,
        }
    }
}

/// Six configurations over learning rate {0.01, 0.05}, search iterations
/// {6000, 12000} and starting temperature {1.0, 2.5}: the defaults, each
/// single change, and the pairs that include the lower temperature.
pub fn default_hp_grid() -> Vec<ConfigOverrides> {
    let cfg = |lr: f64, iters: usize, tau: f64| ConfigOverrides {
        learning_rate: Some(lr),
        search_iters: Some(iters),
        tau_start: Some(tau),
        ..ConfigOverrides::default()
    };
    vec![
        cfg(0.01, 6000, 2.5),
        cfg(0.05, 6000, 2.5),
        cfg(0.01, 12000, 2.5),
        cfg(0.01, 6000, 1.0),
        cfg(0.05, 6000, 1.0),
        cfg(0.01, 12000, 1.0),
    ]
}

pub fn run_hp_sensitivity(sweep: &HpSweep, workers: usize) -> Result<ResultsBundle> {
    run_matrix(&sweep.to_matrix(), workers)
}

/// Marker for heatmap cells with no trials.
pub const MISSING: &str = "---";
/// Heatmap column shapes, in display order.
pub const HEATMAP_SHAPES: [Shape; 4] = [Shape::LR, Shape::RL, Shape::RR, Shape::Balanced];

/// Recovery rates by architecture (rows) and operator/shape (columns). Only
/// headline targets count; balanced variants are pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: Vec<Family>,
    pub columns: Vec<(Operator, Shape)>,
    /// `values[row][col]`, `None` where the bundle has no trials.
    pub values: Vec<Vec<Option<f64>>>,
}

impl Heatmap {
    pub fn get(&self, family: Family, op: Operator, shape: Shape) -> Option<f64> {
        let r = self.rows.iter().position(|&f| f == family)?;
        let c = self.columns.iter().position(|&k| k == (op, shape))?;
        self.values[r][c]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("architecture");
        for (op, shape) in &self.columns {
            s.push_str(&format!(",{}/{shape}", op.label()));
        }
        s.push('\n');
        for (family, row) in self.rows.iter().zip(&self.values) {
            s.push_str(family.name());
            for v in row {
                match v {
                    Some(v) => s.push_str(&format!(",{v:.4}")),
                    None => s.push_str(&format!(",{MISSING}")),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let (cw, ch, left, top) = (90.0, 36.0, 80.0, 40.0);
        let width = left + cw * self.columns.len() as f64 + 10.0;
        let height = top + ch * self.rows.len() as f64 + 10.0;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        );
        for (j, (op, shape)) in self.columns.iter().enumerate() {
            let x = left + cw * (j as f64 + 0.5);
            s.push_str(&format!("<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}/{shape}</text>\n", top - 12.0, op.label()));
        }
        for (i, (family, row)) in self.rows.iter().zip(&self.values).enumerate() {
            let y = top + ch * i as f64;
            s.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{family}</text>\n", left - 8.0, y + ch / 2.0 + 4.0));
            for (j, v) in row.iter().enumerate() {
                let x = left + cw * j as f64;
                let (fill, label) = match v {
                    Some(v) => {
                        let c = v.clamp(0.0, 1.0);
                        let r = (255.0 * (1.0 - c)) as u8;
                        let g = (120.0 + 100.0 * c) as u8;
                        (format!("rgb({r},{g},{})", (255.0 * (1.0 - c)) as u8), format!("{:.0}%", v * 100.0))
                    }
                    None => ("#dddddd".to_string(), MISSING.to_string()),
                };
                s.push_str(&format!(
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{cw}\" height=\"{ch}\" fill=\"{fill}\" stroke=\"white\"/>\n"
                ));
                s.push_str(&format!(
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n",
                    x + cw / 2.0,
                    y + ch / 2.0 + 4.0
                ));
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

pub fn emit_heatmap(trials: &[TrialRow]) -> Result<Heatmap> {
    let headline: BTreeMap<String, bool> = crate::targets::catalog()
        .into_iter()
        .map(|t| (t.name.clone(), t.is_headline()))
        .collect();
    let ops: BTreeSet<Operator> = trials.iter().map(|t| t.operator).collect();
    let columns: Vec<(Operator, Shape)> =
        ops.iter().flat_map(|&op| HEATMAP_SHAPES.iter().map(move |&s| (op, s))).collect();
    let mut counts: BTreeMap<(Family, Operator, Shape), (u64, u64)> = BTreeMap::new();
    for t in trials {
        if !headline.get(&t.target).copied().unwrap_or(false) {
            continue;
        }
        let e = counts.entry((t.architecture, t.operator, t.shape)).or_default();
        e.0 += t.recovered as u64;
        e.1 += 1;
    }
    let values = Family::ALL
        .iter()
        .map(|&f| {
            columns
                .iter()
                .map(|&(op, shape)| counts.get(&(f, op, shape)).map(|&(k, n)| k as f64 / n as f64))
                .collect()
        })
        .collect();
    Ok(Heatmap { rows: Family::ALL.to_vec(), columns, values })
}

/// Per-iteration mean and standard error of the gradient ratio in one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub n: usize,
    pub mean: f64,
    /// `None` with fewer than two finite samples.
    pub std_err: Option<f64>,
}

/// Non-finite ratios (a zero y-gradient) are left out of the statistics.
pub fn emit_gradient_trace(traces: &[TraceRow], cell_id: &str) -> Result<Vec<TracePoint>> {
    let mut by_iter: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for t in traces.iter().filter(|t| t.cell_id == cell_id) {
        let v = by_iter.entry(t.iteration).or_default();
        if t.ratio.is_finite() {
            v.push(t.ratio);
        }
    }
    if by_iter.is_empty() {
        return Err(Error::Config(format!("no trace rows for cell {cell_id:?}")));
    }
    Ok(by_iter
        .into_iter()
        .map(|(iteration, v)| {
            let n = v.len();
            let mean = if n == 0 { f64::NAN } else { v.iter().sum::<f64>() / n as f64 };
            let std_err = (n >= 2).then(|| {
                let var = v.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            });
            TracePoint { iteration, n, mean, std_err }
        })
        .collect())
}

pub fn write_trace_csv<W: Write>(points: &[TracePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ConfigOverrides {
        ConfigOverrides {
            search_iters: Some(60),
            harden_iters: Some(40),
            trace_iters: Some(vec![10, 50]),
            verify_points: Some(50),
            ..ConfigOverrides::default()
        }
    }

    fn small_matrix() -> ExperimentMatrix {
        ExperimentMatrix {
            base_seed: 7,
            defaults: quick(),
            cells: vec![
                CellSpec::new(Family::Eq6, "Paper(yx)", 2),
                CellSpec { strategies: Some(vec![InitStrategy::GaussWide]), ..CellSpec::new(Family::V16, "S_RL(xy)", 2) },
            ],
            ..ExperimentMatrix::default()
        }
    }

    #[test]
    fn empty_matrix_is_empty_bundle() {
        let b = run_matrix(&ExperimentMatrix::default(), 2).unwrap();
        assert!(b.trials.is_empty() && b.summaries.is_empty());
    }

    #[test]
    fn trial_seeds_are_distinct_and_stable() {
        let a = trial_seed(0, "c", 0, 0);
        assert_eq!(a, trial_seed(0, "c", 0, 0));
        assert_ne!(a, trial_seed(0, "c", 1, 0));
        assert_ne!(a, trial_seed(0, "c", 0, 1));
        assert_ne!(a, trial_seed(0, "d", 0, 0));
        assert_eq!(trial_seed(5, "c", 0, 0), a ^ 5);
    }

    #[test]
    fn counts_and_order() {
        let m = small_matrix();
        let b = run_matrix(&m, 1).unwrap();
        assert_eq!(b.trials.len(), m.trial_count());
        for s in &b.summaries {
            let rows: Vec<_> = b.trials.iter().filter(|t| t.cell_id == s.cell_id).collect();
            assert_eq!(s.trials as usize, rows.len());
            assert_eq!(s.successes as usize, rows.iter().filter(|t| t.recovered).count());
        }
        assert_eq!(b.summaries[0].cell_id, "Eq6-EML-Paper(yx)");
        assert_eq!(b.traces.len(), 2 * b.trials.len());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let m = small_matrix();
        assert_eq!(run_matrix(&m, 1).unwrap(), run_matrix(&m, 3).unwrap());
    }

    #[test]
    fn rejects_bad_cells() {
        let mut m = small_matrix();
        m.cells.push(CellSpec::new(Family::Eq6, "Paper(yx)", 1));
        assert!(matches!(run_matrix(&m, 1), Err(Error::Config(_))));
        let m = ExperimentMatrix { cells: vec![CellSpec::new(Family::Eq6, "nope", 1)], ..Default::default() };
        assert!(matches!(run_matrix(&m, 1), Err(Error::UnknownTarget(_))));
        let m = ExperimentMatrix {
            cells: vec![CellSpec { operator: Some(Operator::Sml), ..CellSpec::new(Family::Eq6, "T1(xy)", 1) }],
            ..Default::default()
        };
        assert!(matches!(run_matrix(&m, 1), Err(Error::Config(_))));
    }

    #[test]
    fn hp_grid_has_six_distinct_configs() {
        let g = default_hp_grid();
        assert_eq!(g.len(), 6);
        for i in 0..6 {
            for j in 0..i {
                assert_ne!(g[i], g[j]);
            }
        }
        let sweep = HpSweep {
            base_seed: 0,
            output_dir: None,
            architecture: Family::V16,
            target: "SML_B1".into(),
            seeds: 2,
            strategies: None,
            configs: None,
        };
        let m = sweep.to_matrix();
        assert_eq!(m.cells.len(), 6);
        assert_eq!(m.trial_count(), 48);
    }

    #[test]
    fn single_config_sweep_matches_plain_cell() {
        let sweep = HpSweep {
            base_seed: 3,
            output_dir: None,
            architecture: Family::Eq6,
            target: "T1(xy)".into(),
            seeds: 2,
            strategies: None,
            configs: Some(vec![quick()]),
        };
        let a = run_hp_sensitivity(&sweep, 1).unwrap();
        let mut m = sweep.to_matrix();
        let b = run_matrix(&m, 1).unwrap();
        assert_eq!(a, b);
        // Same cell id, same seeds: identical to a hand-written matrix.
        m.cells[0].overrides = ConfigOverrides::default();
        m.defaults = quick();
        assert_eq!(run_matrix(&m, 1).unwrap().trials, a.trials);
    }

    #[test]
    fn heatmap_marks_missing_cells() {
        let b = run_matrix(&small_matrix(), 1).unwrap();
        let h = emit_heatmap(&b.trials).unwrap();
        assert_eq!(h.rows, Family::ALL.to_vec());
        assert_eq!(h.columns.len(), 8);
        assert!(h.get(Family::Eq6, Operator::Eml, Shape::LR).is_some());
        assert!(h.get(Family::V16, Operator::Sml, Shape::RL).is_some());
        assert!(h.get(Family::Hybrid, Operator::Eml, Shape::LR).is_none());
        let csv = h.to_csv();
        assert!(csv.starts_with("architecture,EML/LR,EML/RL,EML/RR,EML/Balanced,SML/LR"));
        assert!(csv.lines().nth(3).unwrap().starts_with("Hybrid,---"));
        assert!(h.to_svg().contains("<svg"));
    }

    #[test]
    fn heatmap_ignores_non_headline_targets() {
        let row = |target: &str, shape, rec| TrialRow {
            cell_id: "c".into(),
            architecture: Family::Eq6,
            operator: Operator::Eml,
            target: target.into(),
            shape,
            leaves: "xy".into(),
            seed: 0,
            init_strategy: InitStrategy::Eq6Paper,
            recovered: rec,
            structural_match: rec,
            rmse: 0.0,
            final_loss: 0.0,
            hardened_formula: "eml(1,1)".into(),
            ratio_at_1000: None,
        };
        let h = emit_heatmap(&[row("T1(xy)", Shape::RL, true), row("T1_yx", Shape::RL, false), row("EML_B1", Shape::Balanced, true), row("EML_B2", Shape::Balanced, false)]).unwrap();
        assert_eq!(h.get(Family::Eq6, Operator::Eml, Shape::RL), Some(1.0));
        assert_eq!(h.get(Family::Eq6, Operator::Eml, Shape::Balanced), Some(0.5));
    }

    #[test]
    fn gradient_trace_stats() {
        let row = |seed, iteration, ratio| TraceRow {
            cell_id: "c".into(),
            seed,
            init_strategy: InitStrategy::Eq6Paper,
            iteration,
            ratio,
            grad_norm_x: 0.0,
            grad_norm_y: 0.0,
        };
        let rows = vec![row(1, 100, 1.0), row(2, 100, 3.0), row(1, 500, 2.0), row(2, 500, f64::INFINITY)];
        let t = emit_gradient_trace(&rows, "c").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].mean, 2.0);
        assert!((t[0].std_err.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!((t[1].n, t[1].mean, t[1].std_err), (1, 2.0, None));
        assert!(emit_gradient_trace(&rows, "other").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ExperimentMatrix { output_dir: Some(dir.path().to_path_buf()), ..small_matrix() };
        let b = run_matrix(&m, 2).unwrap();
        let trials: Vec<TrialRow> = read_csv(&dir.path().join("trials.csv")).unwrap();
        let traces: Vec<TraceRow> = read_csv(&dir.path().join("traces.csv")).unwrap();
        let summaries: Vec<CellSummary> = read_csv(&dir.path().join("summary.csv")).unwrap();
        assert_eq!(trials.len(), b.trials.len());
        assert_eq!(traces.len(), b.traces.len());
        assert_eq!(summaries.len(), 2);
        let header = fs::read_to_string(dir.path().join("trials.csv")).unwrap();
        assert!(header.starts_with(
            "cell_id,architecture,operator,target,shape,leaves,seed,init_strategy,recovered,structural_match,rmse,final_loss,hardened_formula,ratio_at_1000\n"
        ));
    }
}
