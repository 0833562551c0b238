//! Recovery verification and the binomial statistics behind the rate tables.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::HardExpression;
use crate::train::TrialResult;

pub const RECOVERY_RMSE: f64 = 1e-6;
pub const VERIFY_POINTS: usize = 500;
pub const VERIFY_LO: f64 = -3.0;
pub const VERIFY_HI: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryVerdict {
    pub numeric_match: bool,
    pub structural_match: bool,
    pub rmse: f64,
    pub points_used: usize,
}

pub fn exact_recovery<R: Rng + ?Sized>(
    hardened: &HardExpression,
    target: &HardExpression,
    rng: &mut R,
) -> Result<RecoveryVerdict> {
    exact_recovery_with(hardened, target, VERIFY_POINTS, rng)
}

/// Samples uniform points on the verification square, keeping those where
/// the target is valid, and compares the two formulas there. The hardened
/// formula must be valid at every kept point.
pub fn exact_recovery_with<R: Rng + ?Sized>(
    hardened: &HardExpression,
    target: &HardExpression,
    n_points: usize,
    rng: &mut R,
) -> Result<RecoveryVerdict> {
    // Giving up after 10x the requested draws means the target is invalid on
    // more than ~90% of the square.
    let max_draws = 10 * n_points.max(1);
    let mut draws = 0;
    let mut used = 0;
    let mut sse = 0.0;
    let mut hardened_valid = true;
    while used < n_points {
        if draws == max_draws {
            return Err(Error::VerificationImpossible(target.to_string()));
        }
        draws += 1;
        let x = rng.random_range(VERIFY_LO..VERIFY_HI);
        let y = rng.random_range(VERIFY_LO..VERIFY_HI);
        let Ok(t) = target.eval(x, y) else { continue };
        used += 1;
        match hardened.eval(x, y) {
            Ok(h) => sse += (h - t) * (h - t),
            Err(_) => hardened_valid = false,
        }
    }
    let rmse = if hardened_valid { (sse / used as f64).sqrt() } else { f64::INFINITY };
    Ok(RecoveryVerdict {
        numeric_match: hardened_valid && rmse < RECOVERY_RMSE,
        structural_match: hardened == target,
        rmse,
        points_used: used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub successes: u64,
    pub trials: u64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RateSummary {
    pub fn from_counts(successes: u64, trials: u64, confidence: f64) -> Result<Self> {
        if trials == 0 {
            return Ok(RateSummary { successes: 0, trials: 0, rate: 0.0, ci_low: 0.0, ci_high: 1.0 });
        }
        let (ci_low, ci_high) = clopper_pearson(successes, trials, confidence)?;
        Ok(RateSummary { successes, trials, rate: successes as f64 / trials as f64, ci_low, ci_high })
    }
}

pub fn summarize(results: &[TrialResult], confidence: f64) -> Result<RateSummary> {
    let k = results.iter().filter(|r| r.recovered).count() as u64;
    RateSummary::from_counts(k, results.len() as u64, confidence)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9.
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..20_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Solves `inc_beta(a, b, p) = q` for `p` by bisection; `inc_beta` increases in `p`.
fn beta_quantile(a: f64, b: f64, q: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if inc_beta(a, b, mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact two-sided binomial confidence interval.
pub fn clopper_pearson(successes: u64, trials: u64, confidence: f64) -> Result<(f64, f64)> {
    if trials == 0 || successes > trials {
        return Err(Error::Counts(format!("{successes} successes of {trials} trials")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Counts(format!("confidence {confidence} outside (0, 1)")));
    }
    let alpha = 1.0 - confidence;
    let (k, n) = (successes as f64, trials as f64);
    let low = if successes == 0 { 0.0 } else { beta_quantile(k, n - k + 1.0, alpha / 2.0) };
    let high = if successes == trials { 1.0 } else { beta_quantile(k + 1.0, n - k, 1.0 - alpha / 2.0) };
    Ok((low, high))
}

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..=n {
        acc += (i as f64).ln();
        out.push(acc);
    }
    out
}

/// Two-sided Fisher exact test on the table `[[a, b], [c, d]]`: the total
/// probability of all tables with the same margins that are no more likely
/// than the observed one.
pub fn fisher_exact(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let n = a + b + c + d;
    if n == 0 {
        return 1.0;
    }
    let (r1, c1) = (a + b, a + c);
    let r2 = n - r1;
    let lf = ln_factorials(n);
    let fixed = lf[r1 as usize] + lf[r2 as usize] + lf[c1 as usize] + lf[(n - c1) as usize] - lf[n as usize];
    let ln_p = |k: u64| {
        let (k, r1, r2, c1) = (k as usize, r1 as usize, r2 as usize, c1 as usize);
        fixed - lf[k] - lf[r1 - k] - lf[c1 - k] - lf[r2 + k - c1]
    };
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let observed = ln_p(a);
    // relative slack for rounding in the log-space probabilities
    let cutoff = observed + 1e-9;
    let mut p = 0.0;
    for k in lo..=hi {
        let lp = ln_p(k);
        if lp <= cutoff {
            p += lp.exp();
        }
    }
    p.min(1.0)
}
