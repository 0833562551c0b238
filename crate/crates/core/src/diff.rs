//! Reverse-mode gradients of the training loss with respect to selector logits.

use std::ops::{Deref, DerefMut};

use crate::arch::{ArchitectureSpec, ParamVector, SelectorKind, Tape};
use crate::error::{Error, Result};
use crate::targets::Dataset;

/// Residual magnitude cap; invalid points contribute this residual with no gradient.
pub const RESIDUAL_CLIP: f64 = 1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl Deref for GradientVector {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for GradientVector {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

/// Weight on the entropy and binarity penalties. Zero during the search phase.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Penalties {
    pub weight: f64,
}

impl Penalties {
    pub const NONE: Penalties = Penalties { weight: 0.0 };
}

/// Loss broken down for telemetry. `grad` covers the full loss; `data_grad`
/// covers only the mean squared error.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub loss: f64,
    pub mse: f64,
    pub penalty: f64,
    pub n_invalid: usize,
    /// Valid points whose residual hit the clip.
    pub n_clipped: usize,
}

/// Reusable buffers for repeated loss evaluations on one architecture.
#[derive(Debug, Clone)]
pub struct LossEvaluator<'a> {
    spec: &'a ArchitectureSpec,
    tape: Tape,
    pub data_grad: Vec<f64>,
    pub grad: Vec<f64>,
}

impl<'a> LossEvaluator<'a> {
    pub fn new(spec: &'a ArchitectureSpec) -> Self {
        LossEvaluator {
            spec,
            tape: Tape::for_spec(spec),
            data_grad: vec![0.0; spec.param_count()],
            grad: vec![0.0; spec.param_count()],
        }
    }

    /// Computes the loss and fills `data_grad` and `grad`.
    pub fn evaluate(&mut self, params: &[f64], tau: f64, data: &Dataset, penalties: Penalties) -> Result<LossBreakdown> {
        let spec = self.spec;
        spec.check_params(params)?;
        if !(tau > 0.0) {
            return Err(Error::Temperature(tau));
        }
        if data.points.is_empty() {
            return Err(Error::Config("empty dataset".into()));
        }
        spec.selector_weights_into(params, tau, &mut self.tape.weights);
        self.data_grad.iter_mut().for_each(|g| *g = 0.0);

        let n = data.points.len() as f64;
        let mut sse = 0.0;
        let mut n_invalid = 0;
        let mut n_clipped = 0;
        for p in &data.points {
            match spec.forward_with_weights(p.x, p.y, &mut self.tape) {
                Ok(v) => {
                    let r = v - p.target;
                    if r.abs() > RESIDUAL_CLIP {
                        n_clipped += 1;
                        sse += RESIDUAL_CLIP * RESIDUAL_CLIP;
                    } else {
                        sse += r * r;
                        spec.backward(p.x, p.y, tau, 2.0 * r / n, &mut self.data_grad, &mut self.tape);
                    }
                }
                Err(_) => {
                    n_invalid += 1;
                    sse += RESIDUAL_CLIP * RESIDUAL_CLIP;
                }
            }
        }
        if n_invalid == data.points.len() {
            return Err(Error::Divergence);
        }
        let mse = sse / n;

        self.grad.copy_from_slice(&self.data_grad);
        let penalty = if penalties.weight != 0.0 {
            penalty_into(spec, params, &self.tape.weights, tau, penalties.weight, &mut self.grad)
        } else {
            0.0
        };
        Ok(LossBreakdown { loss: mse + penalty, mse, penalty, n_invalid, n_clipped })
    }
}

/// Entropy over every selector plus `p(1 - p)` over sigmoid gates, scaled by
/// `weight`. Adds the gradient into `grad` and returns the penalty value.
pub fn penalty_into(
    spec: &ArchitectureSpec,
    params: &[f64],
    weights: &[f64],
    tau: f64,
    weight: f64,
    grad: &mut [f64],
) -> f64 {
    let mut total = 0.0;
    for sel in &spec.selectors {
        let o = sel.offset;
        match sel.kind {
            SelectorKind::Softmax => {
                let w = &weights[o..o + sel.candidates.len()];
                let h: f64 = -w.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
                total += h;
                for (i, &wi) in w.iter().enumerate() {
                    if wi > 0.0 {
                        // dH/dz_i = -w_i (ln w_i + H) / tau
                        grad[o + i] += weight * (-wi * (wi.ln() + h) / tau);
                    }
                }
            }
            SelectorKind::Sigmoid => {
                let p = weights[o];
                let q = 1.0 - p;
                let z = params[o] / tau;
                let h = if p > 0.0 && q > 0.0 { -p * p.ln() - q * q.ln() } else { 0.0 };
                total += h + p * q;
                let dp_dz = p * q / tau;
                // dH/dp = ln(q / p) = -z
                grad[o] += weight * (-z + (1.0 - 2.0 * p)) * dp_dz;
            }
        }
    }
    weight * total
}

pub fn loss_and_grad(
    spec: &ArchitectureSpec,
    params: &ParamVector,
    tau: f64,
    dataset: &Dataset,
    penalties: Penalties,
) -> Result<(f64, GradientVector)> {
    let mut ev = LossEvaluator::new(spec);
    let out = ev.evaluate(params, tau, dataset, penalties)?;
    Ok((out.loss, GradientVector(ev.grad)))
}

pub fn slot_norm(grad: &[f64], slots: &[usize]) -> f64 {
    slots.iter().map(|&s| grad[s] * grad[s]).sum::<f64>().sqrt()
}

/// `||grad[x slots]|| / ||grad[y slots]||`, or `+inf` when the y norm is zero.
pub fn leaf_grad_ratio(grad: &[f64], spec: &ArchitectureSpec) -> f64 {
    ratio_of(slot_norm(grad, spec.x_slots()), slot_norm(grad, spec.y_slots()))
}

pub fn ratio_of(x_norm: f64, y_norm: f64) -> f64 {
    if y_norm == 0.0 {
        f64::INFINITY
    } else {
        x_norm / y_norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_architecture, Family};
    use crate::expr::HardExpression;
    use crate::ops::Operator;
    use crate::targets::{dataset_for_expression, find_target, make_dataset, GridSpec, Point};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_point(target: f64, x: f64, y: f64, op: Operator) -> Dataset {
        let mut ds = dataset_for_expression(&HardExpression::new(op, crate::Arg::One, crate::Arg::One), GridSpec::default()).unwrap();
        ds.points = vec![Point { x, y, target }];
        ds
    }

    /// Five-point central difference of the loss alone, step 1e-5. The
    /// three-point rule's O(h^2) error is too coarse where `exp` curves hard.
    fn fd_grad(spec: &ArchitectureSpec, p: &ParamVector, tau: f64, ds: &Dataset, pen: Penalties) -> Option<Vec<f64>> {
        let h = 1e-5;
        let mut ev = LossEvaluator::new(spec);
        let base = ev.evaluate(p, tau, ds, pen).ok()?;
        let mut out = Vec::with_capacity(p.len());
        for i in 0..p.len() {
            let mut f = [0.0; 4];
            for (k, off) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                let mut q = p.clone();
                q[i] = p[i] + off * h;
                let r = ev.evaluate(&q, tau, ds, pen).ok()?;
                // the loss is only differentiable where the clipped set is fixed
                if r.n_invalid != base.n_invalid || r.n_clipped != base.n_clipped {
                    return None;
                }
                f[k] = r.loss;
            }
            out.push((-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h));
        }
        Some(out)
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let spec = build_architecture(Family::V16, 3, Operator::Eml).unwrap();
        let target: HardExpression = "eml(eml(1,eml(y,x)),1)".parse().unwrap();
        let p = spec.encode(&target, 5.0).unwrap();
        let v = crate::arch::soft_forward(&spec, &p, 1.0, 0.5, 0.25).unwrap();
        let ds = one_point(v, 0.5, 0.25, Operator::Eml);
        let (loss, grad) = loss_and_grad(&spec, &p, 1.0, &ds, Penalties::NONE).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        while checked < 1000 {
            let family = Family::ALL[rng.random_range(0..3)];
            let op = Operator::ALL[rng.random_range(0..3)];
            let spec = build_architecture(family, 3, op).unwrap();
            let p = ParamVector((0..spec.param_count()).map(|_| rng.random_range(-1.5..1.5)).collect());
            let tau = rng.random_range(0.5..3.0);
            let (x, y) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let pen = Penalties { weight: if rng.random_bool(0.5) { rng.random_range(0.0..0.5) } else { 0.0 } };
            let Ok(v) = crate::arch::soft_forward(&spec, &p, tau, x, y) else { continue };
            let ds = one_point(v + rng.random_range(-2.0..2.0), x, y, op);
            let Ok((_, grad)) = loss_and_grad(&spec, &p, tau, &ds, pen) else { continue };
            let Some(fd) = fd_grad(&spec, &p, tau, &ds, pen) else { continue };
            let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (g, f) in grad.iter().zip(&fd) {
                let rel = (g - f).abs() / f.abs().max(1e-3 * scale).max(1e-6);
                worst = worst.max(rel);
                assert!(rel < 1e-5, "{family}/{op}: analytic {g} vs fd {f}");
            }
            checked += 1;
        }
        assert!(worst < 1e-5);
    }

    #[test]
    fn y_leaves_get_gradient_on_paper_target() {
        let spec = build_architecture(Family::Eq6, 3, Operator::Eml).unwrap();
        let ds = make_dataset(&find_target("Paper(yx)").unwrap(), GridSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = crate::train::init_params(&spec, crate::train::InitStrategy::Eq6Paper, &mut rng);
        let (_, grad) = loss_and_grad(&spec, &p, 2.5, &ds, Penalties::NONE).unwrap();
        let gy = slot_norm(&grad, spec.y_slots());
        assert!(gy > 0.0 && gy.is_finite());
        // spot-check the y slots against finite differences on the full grid;
        // the clipped invalid points put a large constant in the loss, so
        // rounding limits the difference quotient to about 1e-4
        let fd = fd_grad(&spec, &p, 2.5, &ds, Penalties::NONE).unwrap();
        for &s in spec.y_slots() {
            assert!(grad[s] != 0.0);
            assert!((grad[s] - fd[s]).abs() / fd[s].abs().max(1e-6) < 1e-4, "slot {s}: {} vs {}", grad[s], fd[s]);
        }
    }

    #[test]
    fn ratio_examples() {
        let spec = build_architecture(Family::V16, 2, Operator::Eml).unwrap();
        let mut g = vec![0.0; spec.param_count()];
        let xs = spec.x_slots();
        let ys = spec.y_slots();
        g[xs[0]] = 3.0;
        g[xs[1]] = 4.0;
        g[ys[0]] = 0.0;
        g[ys[1]] = 5.0;
        assert_eq!(leaf_grad_ratio(&g, &spec), 1.0);
        g[ys[1]] = 0.0;
        assert_eq!(leaf_grad_ratio(&g, &spec), f64::INFINITY);
    }

    #[test]
    fn penalties_vanish_at_one_hot_and_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for family in Family::ALL {
            let spec = build_architecture(family, 3, Operator::Sml).unwrap();
            for _ in 0..50 {
                let p: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-3.0..3.0)).collect();
                let w = spec.selector_weights(&p, 1.0);
                let mut g = vec![0.0; p.len()];
                assert!(penalty_into(&spec, &p, &w, 1.0, 1.0, &mut g) >= 0.0);
            }
            let h = crate::arch::harden(&spec, &ParamVector(vec![0.0; spec.param_count()])).unwrap();
            let p = spec.encode(&h, 1e3).unwrap();
            let w = spec.selector_weights(&p, 0.01);
            let mut g = vec![0.0; p.len()];
            assert_eq!(penalty_into(&spec, &p, &w, 0.01, 1.0, &mut g), 0.0);
        }
    }

    #[test]
    fn invalid_points_are_clipped_and_all_invalid_diverges() {
        let spec = build_architecture(Family::Eq6, 2, Operator::Eml).unwrap();
        // eml(x, x) hardened: ln 0 at x = 0
        let p = spec.encode(&"eml(x,x)".parse().unwrap(), 1e3).unwrap();
        let mut ds = one_point(0.0, 0.0, 1.0, Operator::Eml);
        assert!(matches!(loss_and_grad(&spec, &p, 0.01, &ds, Penalties::NONE), Err(Error::Divergence)));
        ds.points.push(Point { x: 1.0, y: 1.0, target: 0.0 });
        let mut ev = LossEvaluator::new(&spec);
        let out = ev.evaluate(&p, 0.01, &ds, Penalties::NONE).unwrap();
        assert_eq!(out.n_invalid, 1);
        assert!(out.loss >= RESIDUAL_CLIP * RESIDUAL_CLIP / 2.0);
        assert!(ev.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn gradients_are_deterministic() {
        let spec = build_architecture(Family::Hybrid, 3, Operator::Eml).unwrap();
        let ds = make_dataset(&find_target("T1(xy)").unwrap(), GridSpec::default()).unwrap();
        let p = ParamVector((0..44).map(|i| (i as f64 * 0.37).sin() * 0.2).collect());
        let a = loss_and_grad(&spec, &p, 2.5, &ds, Penalties { weight: 0.05 }).unwrap();
        let b = loss_and_grad(&spec, &p, 2.5, &ds, Penalties { weight: 0.05 }).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.iter().zip(b.1.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
