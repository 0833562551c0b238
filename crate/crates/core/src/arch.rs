//! Selector layouts over a perfect binary operator tree.
//!
//! Operator nodes are numbered breadth-first (root = 0, children of `n` at
//! `2n + 1` and `2n + 2`). Every node input owns one selector; selectors and
//! their parameter slots follow node order, left input before right input.
//! A V16-style gate at the deepest level owns a nested 3-way leaf selector,
//! whose slots follow the gate's slot immediately.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::expr::{Arg, HardExpression};
use crate::ops::{Invalid, Operator};

pub const MIN_DEPTH: usize = 2;
pub const MAX_DEPTH: usize = 4;
/// Largest depth `enumerate_expressible` accepts.
pub const MAX_ENUM_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Eq6,
    V16,
    Hybrid,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Eq6, Family::V16, Family::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Family::Eq6 => "Eq6",
            Family::V16 => "V16",
            Family::Hybrid => "Hybrid",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "eq6" => Ok(Family::Eq6),
            "v16" => Ok(Family::V16),
            "hybrid" => Ok(Family::Hybrid),
            other => Err(format!("unknown architecture {other:?}")),
        }
    }
}

/// Candidate inputs, listed in tie-break priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Candidate {
    One,
    X,
    Y,
    Sub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectorKind {
    /// One logit per candidate.
    Softmax,
    /// One logit; weight of `Sub` is `sigmoid(logit / tau)`, the rest goes to `One`.
    Sigmoid,
}

/// What a selector's `Sub` candidate reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Node(usize),
    Leaf(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selector {
    pub kind: SelectorKind,
    pub candidates: Vec<Candidate>,
    pub offset: usize,
    pub source: Option<Source>,
    /// Level of the owning operator node; leaf selectors carry the tree depth.
    pub level: usize,
}

impl Selector {
    pub fn n_params(&self) -> usize {
        match self.kind {
            SelectorKind::Softmax => self.candidates.len(),
            SelectorKind::Sigmoid => 1,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.source.is_none() && self.kind == SelectorKind::Softmax && !self.candidates.contains(&Candidate::Sub)
    }

    fn slot_of(&self, c: Candidate) -> Option<usize> {
        match self.kind {
            SelectorKind::Softmax => self.candidates.iter().position(|&k| k == c).map(|i| self.offset + i),
            SelectorKind::Sigmoid => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArchitectureSpec {
    pub family: Family,
    pub depth: usize,
    pub operator: Operator,
    pub selectors: Vec<Selector>,
    /// Selector indices feeding each node's (left, right) inputs.
    pub node_inputs: Vec<[usize; 2]>,
    param_count: usize,
    x_slots: Vec<usize>,
    y_slots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl Deref for ParamVector {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

struct Layout {
    selectors: Vec<Selector>,
    next: usize,
}

impl Layout {
    fn push(&mut self, kind: SelectorKind, candidates: Vec<Candidate>, source: Option<Source>, level: usize) -> usize {
        let sel = Selector { kind, candidates, offset: self.next, source, level };
        self.next += sel.n_params();
        self.selectors.push(sel);
        self.selectors.len() - 1
    }
}

pub fn build_architecture(family: Family, depth: usize, operator: Operator) -> Result<ArchitectureSpec> {
    use Candidate::*;
    if !(MIN_DEPTH..=MAX_DEPTH).contains(&depth) {
        return Err(Error::UnsupportedDepth { depth, min: MIN_DEPTH, max: MAX_DEPTH });
    }
    let n_nodes = (1usize << depth) - 1;
    let deepest = depth - 1;
    let mut layout = Layout { selectors: Vec::new(), next: 0 };
    let mut node_inputs = Vec::with_capacity(n_nodes);

    for node in 0..n_nodes {
        let level = (usize::BITS - (node + 1).leading_zeros() - 1) as usize;
        let mut inputs = [0usize; 2];
        for (side, slot) in inputs.iter_mut().enumerate() {
            let child = 2 * node + 1 + side;
            *slot = match family {
                Family::Eq6 if level == deepest => layout.push(SelectorKind::Softmax, vec![One, X, Y], None, level),
                Family::Eq6 => layout.push(SelectorKind::Softmax, vec![One, X, Sub], Some(Source::Node(child)), level),
                Family::Hybrid if level == 0 => {
                    layout.push(SelectorKind::Softmax, vec![One, X, Y, Sub], Some(Source::Node(child)), level)
                }
                Family::V16 | Family::Hybrid if level == deepest => {
                    // The gate's slot precedes the nested leaf selector it points to.
                    let gate_index = layout.selectors.len();
                    let gate = layout.push(SelectorKind::Sigmoid, vec![One, Sub], None, level);
                    debug_assert_eq!(gate, gate_index);
                    let leaf = layout.push(SelectorKind::Softmax, vec![One, X, Y], None, depth);
                    layout.selectors[gate].source = Some(Source::Leaf(leaf));
                    gate
                }
                Family::V16 | Family::Hybrid => {
                    layout.push(SelectorKind::Sigmoid, vec![One, Sub], Some(Source::Node(child)), level)
                }
            };
        }
        node_inputs.push(inputs);
    }

    let mut x_slots = Vec::new();
    let mut y_slots = Vec::new();
    for sel in &layout.selectors {
        x_slots.extend(sel.slot_of(X));
        y_slots.extend(sel.slot_of(Y));
    }

    Ok(ArchitectureSpec {
        family,
        depth,
        operator,
        selectors: layout.selectors,
        node_inputs,
        param_count: layout.next,
        x_slots,
        y_slots,
    })
}

/// Per-point evaluation record used by the reverse pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    /// Selector weights aligned with parameter slots (sigmoid slots hold `p`).
    pub weights: Vec<f64>,
    pub sel_value: Vec<f64>,
    pub node_a: Vec<f64>,
    pub node_b: Vec<f64>,
    pub node_value: Vec<f64>,
    node_adj: Vec<f64>,
    sel_adj: Vec<f64>,
}

impl Tape {
    pub fn for_spec(spec: &ArchitectureSpec) -> Tape {
        let n = spec.n_nodes();
        Tape {
            weights: vec![0.0; spec.param_count],
            sel_value: vec![0.0; spec.selectors.len()],
            node_a: vec![0.0; n],
            node_b: vec![0.0; n],
            node_value: vec![0.0; n],
            node_adj: vec![0.0; n],
            sel_adj: vec![0.0; spec.selectors.len()],
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Writes `softmax(logits / tau)` into `out`.
#[inline]
pub fn softmax_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl ArchitectureSpec {
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn n_nodes(&self) -> usize {
        self.node_inputs.len()
    }

    /// Slots of every `x` candidate logit.
    pub fn x_slots(&self) -> &[usize] {
        &self.x_slots
    }

    /// Slots of every `y` candidate logit.
    pub fn y_slots(&self) -> &[usize] {
        &self.y_slots
    }

    pub fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::ParamLength { got: params.len(), expected: self.param_count });
        }
        Ok(())
    }

    /// Fills `weights` with every selector's softened weights at `tau`.
    pub fn selector_weights_into(&self, params: &[f64], tau: f64, weights: &mut [f64]) {
        for sel in &self.selectors {
            let o = sel.offset;
            match sel.kind {
                SelectorKind::Softmax => {
                    let k = sel.candidates.len();
                    softmax_into(&params[o..o + k], tau, &mut weights[o..o + k]);
                }
                SelectorKind::Sigmoid => weights[o] = sigmoid(params[o] / tau),
            }
        }
    }

    pub fn selector_weights(&self, params: &[f64], tau: f64) -> Vec<f64> {
        let mut w = vec![0.0; self.param_count];
        self.selector_weights_into(params, tau, &mut w);
        w
    }

    #[inline]
    fn candidate_value(&self, sel: &Selector, c: Candidate, x: f64, y: f64, tape: &Tape) -> f64 {
        match c {
            Candidate::One => 1.0,
            Candidate::X => x,
            Candidate::Y => y,
            Candidate::Sub => match sel.source {
                Some(Source::Node(n)) => tape.node_value[n],
                Some(Source::Leaf(l)) => tape.sel_value[l],
                None => unreachable!("Sub candidate without source"),
            },
        }
    }

    fn eval_selector(&self, s: usize, x: f64, y: f64, tape: &mut Tape) {
        let sel = &self.selectors[s];
        if let Some(Source::Leaf(l)) = sel.source {
            self.eval_selector(l, x, y, tape);
        }
        let v = match sel.kind {
            SelectorKind::Softmax => sel
                .candidates
                .iter()
                .enumerate()
                .map(|(i, &c)| tape.weights[sel.offset + i] * self.candidate_value(sel, c, x, y, tape))
                .sum(),
            SelectorKind::Sigmoid => {
                let p = tape.weights[sel.offset];
                let sub = self.candidate_value(sel, Candidate::Sub, x, y, tape);
                p * sub + (1.0 - p)
            }
        };
        tape.sel_value[s] = v;
    }

    /// Soft evaluation at one point, assuming `tape.weights` is already filled.
    pub fn forward_with_weights(&self, x: f64, y: f64, tape: &mut Tape) -> std::result::Result<f64, Invalid> {
        for n in (0..self.n_nodes()).rev() {
            let [l, r] = self.node_inputs[n];
            self.eval_selector(l, x, y, tape);
            self.eval_selector(r, x, y, tape);
            let a = tape.sel_value[l];
            let b = tape.sel_value[r];
            tape.node_a[n] = a;
            tape.node_b[n] = b;
            tape.node_value[n] = self.operator.eval(a, b)?;
        }
        Ok(tape.node_value[0])
    }

    fn backprop_selector(&self, s: usize, x: f64, y: f64, tau: f64, params_grad: &mut [f64], tape: &mut Tape) {
        let g = tape.sel_adj[s];
        let sel = &self.selectors[s];
        let o = sel.offset;
        let sub_adj = match sel.kind {
            SelectorKind::Softmax => {
                let k = sel.candidates.len();
                let mut mean = 0.0;
                for i in 0..k {
                    mean += tape.weights[o + i] * self.candidate_value(sel, sel.candidates[i], x, y, tape);
                }
                // d/dz_i of sum_j w_j v_j = w_i (v_i - sum_j w_j v_j) / tau
                let mut sub_w = 0.0;
                for i in 0..k {
                    let c = sel.candidates[i];
                    let w = tape.weights[o + i];
                    let v = self.candidate_value(sel, c, x, y, tape);
                    params_grad[o + i] += g * w * (v - mean) / tau;
                    if c == Candidate::Sub {
                        sub_w = w;
                    }
                }
                g * sub_w
            }
            SelectorKind::Sigmoid => {
                let p = tape.weights[o];
                let sub = self.candidate_value(sel, Candidate::Sub, x, y, tape);
                params_grad[o] += g * (sub - 1.0) * p * (1.0 - p) / tau;
                g * p
            }
        };
        match sel.source {
            Some(Source::Node(n)) => tape.node_adj[n] += sub_adj,
            Some(Source::Leaf(l)) => {
                tape.sel_adj[l] = sub_adj;
                self.backprop_selector(l, x, y, tau, params_grad, tape);
            }
            None => {}
        }
    }

    /// Accumulates `dout * d(output)/d(params)` into `params_grad` using the
    /// values recorded by the last successful forward pass on `tape`.
    pub fn backward(&self, x: f64, y: f64, tau: f64, dout: f64, params_grad: &mut [f64], tape: &mut Tape) {
        tape.node_adj.iter_mut().for_each(|v| *v = 0.0);
        tape.node_adj[0] = dout;
        for n in 0..self.n_nodes() {
            let g = tape.node_adj[n];
            let [l, r] = self.node_inputs[n];
            let (da, db) = self
                .operator
                .grad(tape.node_a[n], tape.node_b[n])
                .expect("gradient evaluated at a point the forward pass accepted");
            tape.sel_adj[l] = g * da;
            tape.sel_adj[r] = g * db;
            self.backprop_selector(l, x, y, tau, params_grad, tape);
            self.backprop_selector(r, x, y, tau, params_grad, tape);
        }
    }

    /// Argmax choice of each selector, ties going to the earlier candidate.
    pub fn choices(&self, params: &[f64]) -> Vec<Candidate> {
        self.selectors
            .iter()
            .map(|sel| match sel.kind {
                SelectorKind::Sigmoid => {
                    if params[sel.offset] > 0.0 {
                        Candidate::Sub
                    } else {
                        Candidate::One
                    }
                }
                SelectorKind::Softmax => {
                    let mut best = 0;
                    for i in 1..sel.candidates.len() {
                        if params[sel.offset + i] > params[sel.offset + best] {
                            best = i;
                        }
                    }
                    sel.candidates[best]
                }
            })
            .collect()
    }

    /// Selectors reachable from the root under the argmax choices.
    pub fn active_selectors(&self, params: &[f64]) -> Vec<bool> {
        let choices = self.choices(params);
        let mut active = vec![false; self.selectors.len()];
        let mut stack: Vec<usize> = self.node_inputs[0].to_vec();
        while let Some(s) = stack.pop() {
            active[s] = true;
            if choices[s] == Candidate::Sub {
                match self.selectors[s].source {
                    Some(Source::Node(n)) => stack.extend(self.node_inputs[n]),
                    Some(Source::Leaf(l)) => stack.push(l),
                    None => {}
                }
            }
        }
        active
    }

    fn hard_arg(&self, s: usize, choices: &[Candidate]) -> Arg {
        let sel = &self.selectors[s];
        match choices[s] {
            Candidate::One => Arg::One,
            Candidate::X => Arg::X,
            Candidate::Y => Arg::Y,
            Candidate::Sub => match sel.source {
                Some(Source::Node(n)) => Arg::sub(self.hard_node(n, choices)),
                Some(Source::Leaf(l)) => self.hard_arg(l, choices),
                None => unreachable!(),
            },
        }
    }

    fn hard_node(&self, n: usize, choices: &[Candidate]) -> HardExpression {
        let [l, r] = self.node_inputs[n];
        HardExpression::new(self.operator, self.hard_arg(l, choices), self.hard_arg(r, choices))
    }

    /// One-hot parameters that harden to `expr`: the chosen logit gets
    /// `margin`, the rest 0; gates get `±margin`. Unreached selectors favor `One`.
    pub fn encode(&self, expr: &HardExpression, margin: f64) -> Result<ParamVector> {
        let mut params = vec![0.0; self.param_count];
        for sel in &self.selectors {
            match sel.kind {
                SelectorKind::Sigmoid => params[sel.offset] = -margin,
                SelectorKind::Softmax => params[sel.offset] = margin,
            }
        }
        if !self.encode_node(0, expr, margin, &mut params) {
            return Err(Error::NotExpressible(expr.to_string()));
        }
        Ok(ParamVector(params))
    }

    fn set_choice(sel: &Selector, c: Candidate, margin: f64, params: &mut [f64]) {
        match sel.kind {
            SelectorKind::Sigmoid => params[sel.offset] = if c == Candidate::Sub { margin } else { -margin },
            SelectorKind::Softmax => {
                for (i, &k) in sel.candidates.iter().enumerate() {
                    params[sel.offset + i] = if k == c { margin } else { 0.0 };
                }
            }
        }
    }

    fn encode_arg(&self, s: usize, arg: &Arg, margin: f64, params: &mut [f64]) -> bool {
        let sel = &self.selectors[s];
        let direct = match arg {
            Arg::One => Some(Candidate::One),
            Arg::X => Some(Candidate::X),
            Arg::Y => Some(Candidate::Y),
            Arg::Sub(_) => None,
        };
        if let Some(c) = direct {
            if sel.candidates.contains(&c) {
                Self::set_choice(sel, c, margin, params);
                return true;
            }
        }
        match (sel.source, arg) {
            (Some(Source::Leaf(l)), Arg::X | Arg::Y) => {
                Self::set_choice(sel, Candidate::Sub, margin, params);
                self.encode_arg(l, arg, margin, params)
            }
            (Some(Source::Node(n)), Arg::Sub(e)) => {
                Self::set_choice(sel, Candidate::Sub, margin, params);
                self.encode_node(n, e, margin, params)
            }
            _ => false,
        }
    }

    fn encode_node(&self, n: usize, expr: &HardExpression, margin: f64, params: &mut [f64]) -> bool {
        if expr.op != self.operator {
            return false;
        }
        let [l, r] = self.node_inputs[n];
        self.encode_arg(l, &expr.left, margin, params) && self.encode_arg(r, &expr.right, margin, params)
    }

    fn arg_set(&self, s: usize, node_sets: &[Option<Vec<String>>]) -> Vec<String> {
        let sel = &self.selectors[s];
        let mut out = Vec::new();
        for &c in &sel.candidates {
            match c {
                Candidate::One => out.push("1".to_string()),
                Candidate::X => out.push("x".to_string()),
                Candidate::Y => out.push("y".to_string()),
                Candidate::Sub => match sel.source {
                    Some(Source::Node(n)) => out.extend(node_sets[n].as_ref().expect("children first").iter().cloned()),
                    Some(Source::Leaf(l)) => out.extend(self.arg_set(l, node_sets)),
                    None => unreachable!(),
                },
            }
        }
        out.sort();
        out.dedup();
        out
    }
}

/// Temperature-softened evaluation of the tree at `(x, y)`.
pub fn soft_forward(spec: &ArchitectureSpec, params: &ParamVector, tau: f64, x: f64, y: f64) -> Result<f64> {
    spec.check_params(params)?;
    if !(tau > 0.0) {
        return Err(Error::Temperature(tau));
    }
    let mut tape = Tape::for_spec(spec);
    spec.selector_weights_into(params, tau, &mut tape.weights);
    Ok(spec.forward_with_weights(x, y, &mut tape)?)
}

/// Snaps every selector to its argmax and reads out the pruned tree.
pub fn harden(spec: &ArchitectureSpec, params: &ParamVector) -> Result<HardExpression> {
    spec.check_params(params)?;
    let choices = spec.choices(params);
    Ok(spec.hard_node(0, &choices))
}

/// Every canonical expression some one-hot assignment produces.
pub fn enumerate_expressible(spec: &ArchitectureSpec) -> Result<BTreeSet<String>> {
    if spec.depth > MAX_ENUM_DEPTH {
        return Err(Error::UnsupportedDepth { depth: spec.depth, min: MIN_DEPTH, max: MAX_ENUM_DEPTH });
    }
    let op = spec.operator.name();
    let mut node_sets: Vec<Option<Vec<String>>> = vec![None; spec.n_nodes()];
    // Nodes on one level share a layout, so compute the first node per level
    // and reuse it for its siblings.
    for level in (0..spec.depth).rev() {
        let first = (1usize << level) - 1;
        let [l, r] = spec.node_inputs[first];
        let lefts = spec.arg_set(l, &node_sets);
        let rights = spec.arg_set(r, &node_sets);
        let mut set = Vec::with_capacity(lefts.len() * rights.len());
        for a in &lefts {
            for b in &rights {
                set.push(format!("{op}({a},{b})"));
            }
        }
        set.sort();
        for n in first..(2 * first + 1) {
            node_sets[n] = Some(set.clone());
        }
    }
    Ok(node_sets[0].take().unwrap_or_default().into_iter().collect())
}
