//! Two-phase training: a fixed-temperature search phase followed by a
//! hardening phase that anneals the temperature and ramps selector penalties,
//! then snaps the tree and checks it against the target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::analysis::exact_recovery_with;
use crate::arch::{harden, ArchitectureSpec, ParamVector};
use crate::diff::{ratio_of, slot_norm, LossEvaluator, Penalties};
use crate::error::{Error, Result};
use crate::expr::HardExpression;
use crate::targets::Dataset;

pub const DEFAULT_TRACE_ITERS: [usize; 6] = [100, 500, 1000, 2000, 4000, 6000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InitStrategy {
    GaussSmall,
    GaussWide,
    UniformSym,
    ZeroCentered,
    Eq6Paper,
}

impl InitStrategy {
    /// The four strategies V16 and Hybrid cells sweep by default.
    pub const SWEEP: [InitStrategy; 4] =
        [InitStrategy::GaussSmall, InitStrategy::GaussWide, InitStrategy::UniformSym, InitStrategy::ZeroCentered];

    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::GaussSmall => "GaussSmall",
            InitStrategy::GaussWide => "GaussWide",
            InitStrategy::UniformSym => "UniformSym",
            InitStrategy::ZeroCentered => "ZeroCentered",
            InitStrategy::Eq6Paper => "Eq6Paper",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [
            InitStrategy::GaussSmall,
            InitStrategy::GaussWide,
            InitStrategy::UniformSym,
            InitStrategy::ZeroCentered,
            InitStrategy::Eq6Paper,
        ]
        .into_iter()
        .find(|k| k.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown init strategy {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub search_iters: usize,
    pub harden_iters: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub penalty_max: f64,
    pub seed: u64,
    pub init_strategy: InitStrategy,
    /// Iterations (1-based step counts) at which the gradient ratio is sampled.
    pub trace_iters: Vec<usize>,
    /// Points used by the recovery check.
    pub verify_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            search_iters: 6000,
            harden_iters: 2000,
            tau_start: 2.5,
            tau_end: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            penalty_max: 0.1,
            seed: 0,
            init_strategy: InitStrategy::GaussSmall,
            trace_iters: DEFAULT_TRACE_ITERS.to_vec(),
            verify_points: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.tau_start > self.tau_end && self.tau_end > 0.0) {
            return bad("need tau_start > tau_end > 0");
        }
        if self.search_iters == 0 || self.harden_iters == 0 {
            return bad("iteration counts must be positive");
        }
        if self.penalty_max < 0.0 {
            return bad("penalty_max must be non-negative");
        }
        if self.trace_iters.windows(2).any(|w| w[0] >= w[1]) {
            return bad("trace_iters must be strictly increasing");
        }
        Ok(())
    }

    pub fn total_iters(&self) -> usize {
        self.search_iters + self.harden_iters
    }
}

/// Temperature at global step `iteration` (0-based): `tau_start` during the
/// search phase, then geometric decay to `tau_end` over the hardening phase.
pub fn tau_schedule(config: &TrainConfig, iteration: usize) -> f64 {
    if iteration < config.search_iters {
        return config.tau_start;
    }
    let k = (iteration - config.search_iters).min(config.harden_iters) as f64;
    config.tau_start * (config.tau_end / config.tau_start).powf(k / config.harden_iters as f64)
}

/// Penalty weight at global step `iteration`: zero while searching, then a
/// linear ramp reaching `penalty_max` at the end of hardening.
pub fn penalty_schedule(config: &TrainConfig, iteration: usize) -> f64 {
    if iteration < config.search_iters {
        return 0.0;
    }
    let k = (iteration - config.search_iters).min(config.harden_iters) as f64;
    config.penalty_max * k / config.harden_iters as f64
}

fn init_rng(seed: u64, strategy: InitStrategy) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ strategy.tag().wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn init_params<R: Rng + ?Sized>(spec: &ArchitectureSpec, strategy: InitStrategy, rng: &mut R) -> ParamVector {
    let n = spec.param_count();
    let gauss = |sd: f64, rng: &mut R| {
        let d = Normal::new(0.0, sd).expect("positive stddev");
        (0..n).map(|_| d.sample(rng)).collect::<Vec<_>>()
    };
    ParamVector(match strategy {
        InitStrategy::Eq6Paper | InitStrategy::GaussSmall => gauss(0.1, rng),
        InitStrategy::GaussWide => gauss(0.5, rng),
        InitStrategy::UniformSym => (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        InitStrategy::ZeroCentered => gauss(0.01, rng),
    })
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { lr, beta1, beta2, eps, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn from_config(n: usize, c: &TrainConfig) -> Self {
        Adam::new(n, c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_eps)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub iteration: usize,
    pub ratio: f64,
    pub grad_norm_x: f64,
    pub grad_norm_y: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientTrace {
    pub samples: Vec<TraceSample>,
}

impl GradientTrace {
    pub fn at(&self, iteration: usize) -> Option<&TraceSample> {
        self.samples.iter().find(|s| s.iteration == iteration)
    }
}

/// One row of the optional per-trial telemetry stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TelemetryRow {
    pub iteration: usize,
    pub loss: f64,
    pub tau: f64,
    pub ratio: f64,
    pub grad_norm_x: f64,
    pub grad_norm_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub hardened: HardExpression,
    pub recovered: bool,
    pub structural_match: bool,
    pub rmse: f64,
    pub final_loss: f64,
    pub trace: GradientTrace,
    pub seed: u64,
    pub init_strategy: InitStrategy,
    /// Set when training stopped early because every point went invalid.
    pub diverged: bool,
    /// Seconds; excluded from deterministic outputs.
    pub wall_time: f64,
}

pub fn run_trial(spec: &ArchitectureSpec, dataset: &Dataset, config: &TrainConfig) -> Result<TrialResult> {
    run_trial_observed(spec, dataset, config, 0, &mut |_| {})
}

/// `run_trial` that also reports a telemetry row every `every` steps (0 = never).
pub fn run_trial_observed(
    spec: &ArchitectureSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    every: usize,
    sink: &mut dyn FnMut(&TelemetryRow),
) -> Result<TrialResult> {
    config.validate()?;
    if dataset.target.op != spec.operator {
        return Err(Error::Config(format!(
            "target uses {} but the architecture uses {}",
            dataset.target.op, spec.operator
        )));
    }
    let start = Instant::now();
    let mut rng = init_rng(config.seed, config.init_strategy);
    let mut params = init_params(spec, config.init_strategy, &mut rng);
    let mut adam = Adam::from_config(params.len(), config);
    let mut ev = LossEvaluator::new(spec);
    let mut trace = GradientTrace::default();
    let mut final_loss = f64::NAN;
    let mut diverged = false;

    for it in 0..config.total_iters() {
        let tau = tau_schedule(config, it);
        let penalties = Penalties { weight: penalty_schedule(config, it) };
        let out = match ev.evaluate(&params, tau, dataset, penalties) {
            Ok(out) if out.loss.is_finite() && ev.grad.iter().all(|g| g.is_finite()) => out,
            Ok(_) | Err(Error::Divergence) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        final_loss = out.loss;
        let step = it + 1;
        let sampled = config.trace_iters.binary_search(&step).is_ok();
        if sampled || (every > 0 && step % every == 0) {
            let gx = slot_norm(&ev.data_grad, spec.x_slots());
            let gy = slot_norm(&ev.data_grad, spec.y_slots());
            let ratio = ratio_of(gx, gy);
            if sampled {
                trace.samples.push(TraceSample { iteration: step, ratio, grad_norm_x: gx, grad_norm_y: gy });
            }
            if every > 0 && step % every == 0 {
                sink(&TelemetryRow { iteration: step, loss: out.loss, tau, ratio, grad_norm_x: gx, grad_norm_y: gy });
            }
        }
        adam.step(&mut params, &ev.grad);
    }

    let hardened = harden(spec, &params)?;
    let mut verify_rng = ChaCha8Rng::seed_from_u64(config.seed.rotate_left(17) ^ 0x5EED);
    let verdict = exact_recovery_with(&hardened, &dataset.target, config.verify_points, &mut verify_rng)?;
    Ok(TrialResult {
        hardened,
        recovered: verdict.numeric_match,
        structural_match: verdict.structural_match,
        rmse: verdict.rmse,
        final_loss,
        trace,
        seed: config.seed,
        init_strategy: config.init_strategy,
        diverged,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_architecture, Family};
    use crate::ops::Operator;
    use crate::targets::{find_target, make_dataset, GridSpec};

    #[test]
    fn tau_schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(tau_schedule(&c, 0), 2.5);
        assert_eq!(tau_schedule(&c, 5999), 2.5);
        assert!((tau_schedule(&c, 7000) - (2.5f64 * 0.01).sqrt()).abs() < 1e-12);
        assert!((tau_schedule(&c, 7000) - 0.1581).abs() < 1e-4);
        assert!((tau_schedule(&c, 8000) - 0.01).abs() < 1e-15);
        for it in 6000..8000 {
            assert!(tau_schedule(&c, it + 1) < tau_schedule(&c, it));
        }
    }

    #[test]
    fn penalty_schedule_ramps_linearly() {
        let c = TrainConfig::default();
        assert_eq!(penalty_schedule(&c, 100), 0.0);
        assert_eq!(penalty_schedule(&c, 6000), 0.0);
        assert!((penalty_schedule(&c, 7000) - 0.05).abs() < 1e-15);
        assert!((penalty_schedule(&c, 8000) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut w = vec![1.0; 4];
        let mut adam = Adam::new(4, 0.01, 0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let g: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
            adam.step(&mut w, &g);
        }
        assert!(w.iter().all(|v| v.abs() < 1e-3), "{w:?}");
    }

    #[test]
    fn init_statistics() {
        let spec = build_architecture(Family::Hybrid, 4, Operator::Eml).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sample = |s, rng: &mut ChaCha8Rng| {
            let mut all = Vec::new();
            for _ in 0..50 {
                all.extend(init_params(&spec, s, rng).0);
            }
            all
        };
        let sd = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        assert!((sd(&sample(InitStrategy::GaussSmall, &mut rng)) - 0.1).abs() < 0.01);
        assert!((sd(&sample(InitStrategy::Eq6Paper, &mut rng)) - 0.1).abs() < 0.01);
        assert!((sd(&sample(InitStrategy::GaussWide, &mut rng)) - 0.5).abs() < 0.05);
        let u = sample(InitStrategy::UniformSym, &mut rng);
        assert!(u.iter().all(|v| (-1.0..1.0).contains(v)));
        assert!((sd(&u) - (1.0f64 / 3.0).sqrt()).abs() < 0.03);
        let z = sample(InitStrategy::ZeroCentered, &mut rng);
        assert!(z.iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in InitStrategy::SWEEP.into_iter().chain([InitStrategy::Eq6Paper]) {
            assert_eq!(s.name().parse::<InitStrategy>().unwrap(), s);
        }
        assert!("nope".parse::<InitStrategy>().is_err());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { tau_end: 3.0, ..ok.clone() },
            TrainConfig { harden_iters: 0, ..ok.clone() },
            TrainConfig { penalty_max: -1.0, ..ok.clone() },
            TrainConfig { trace_iters: vec![5, 5], ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    fn short(seed: u64) -> TrainConfig {
        TrainConfig { search_iters: 150, harden_iters: 100, trace_iters: vec![1, 100], seed, ..TrainConfig::default() }
    }

    #[test]
    fn trials_are_deterministic() {
        let t = find_target("T1(xy)").unwrap();
        let spec = build_architecture(Family::V16, 3, t.operator).unwrap();
        let ds = make_dataset(&t, GridSpec::default()).unwrap();
        let a = run_trial(&spec, &ds, &short(5)).unwrap();
        let b = run_trial(&spec, &ds, &short(5)).unwrap();
        assert_eq!((&a.hardened, a.final_loss, &a.trace), (&b.hardened, b.final_loss, &b.trace));
        assert_eq!(a.trace.samples.len(), 2);
        assert!(a.trace.at(100).is_some() && a.trace.at(50).is_none());
        let c = run_trial(&spec, &ds, &TrainConfig { init_strategy: InitStrategy::GaussWide, ..short(5) }).unwrap();
        assert_ne!(a.final_loss, c.final_loss);
    }

    #[test]
    fn telemetry_matches_trace() {
        let t = find_target("S_RL(xy)").unwrap();
        let spec = build_architecture(Family::Eq6, 3, t.operator).unwrap();
        let ds = make_dataset(&t, GridSpec::default()).unwrap();
        let mut rows = Vec::new();
        let r = run_trial_observed(&spec, &ds, &short(1), 50, &mut |row| rows.push(*row)).unwrap();
        assert_eq!(rows.len(), 5);
        let at100 = rows.iter().find(|row| row.iteration == 100).unwrap();
        assert_eq!(at100.ratio, r.trace.at(100).unwrap().ratio);
        assert_eq!(rows.last().unwrap().tau, tau_schedule(&short(1), 249));
    }

    #[test]
    fn rejects_operator_mismatch() {
        let t = find_target("T1(xy)").unwrap();
        let spec = build_architecture(Family::V16, 3, Operator::Sml).unwrap();
        let ds = make_dataset(&t, GridSpec::default()).unwrap();
        assert!(matches!(run_trial(&spec, &ds, &short(0)), Err(Error::Config(_))));
    }

    // The two sanity checks below fail under the specified protocol: early
    // gradients of order 1e6 inflate Adam's second-moment estimate and later
    // steps become too small to move the selectors.
    #[test]
    #[ignore = "not met by the specified protocol (V16 0/8, Eq6 5/8)"]
    fn constants_only_target_is_recovered() {
        let data = crate::targets::dataset_for_expression(&"eml(1,1)".parse().unwrap(), GridSpec::default()).unwrap();
        for (family, strategy) in [
            (Family::Eq6, InitStrategy::Eq6Paper),
            (Family::V16, InitStrategy::GaussSmall),
            (Family::Hybrid, InitStrategy::UniformSym),
        ] {
            let spec = build_architecture(family, 3, Operator::Eml).unwrap();
            let recovered = (0..8)
                .filter(|&seed| {
                    let cfg = TrainConfig { seed, init_strategy: strategy, ..TrainConfig::default() };
                    run_trial(&spec, &data, &cfg).unwrap().recovered
                })
                .count();
            assert_eq!(recovered, 8, "{family}");
        }
    }

    #[test]
    #[ignore = "not met by the specified protocol (about 77% of steps)"]
    fn constants_only_loss_is_mostly_monotone() {
        let data = crate::targets::dataset_for_expression(&"eml(1,1)".parse().unwrap(), GridSpec::default()).unwrap();
        let spec = build_architecture(Family::V16, 3, Operator::Eml).unwrap();
        let mut losses = Vec::new();
        let cfg = TrainConfig { seed: 3, ..TrainConfig::default() };
        run_trial_observed(&spec, &data, &cfg, 1, &mut |row| losses.push(row.loss)).unwrap();
        let pairs = losses.len() - 1;
        let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(down as f64 >= 0.9 * pairs as f64, "{down}/{pairs}");
    }
}
