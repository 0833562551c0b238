//! Target catalog and training grids.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::expr::{Arg, HardExpression};
use crate::ops::{Invalid, Operator, OVERFLOW_CAP};

/// Surviving points below this count make a target unusable.
pub const MIN_POINTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    LR,
    RL,
    RR,
    LL,
    Balanced,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::LR => "LR",
            Shape::RL => "RL",
            Shape::RR => "RR",
            Shape::LL => "LL",
            Shape::Balanced => "Balanced",
        }
    }

    pub fn leaf_arity(self) -> usize {
        match self {
            Shape::Balanced => 4,
            _ => 2,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "LR" => Ok(Shape::LR),
            "RL" => Ok(Shape::RL),
            "RR" => Ok(Shape::RR),
            "LL" => Ok(Shape::LL),
            "Balanced" | "balanced" => Ok(Shape::Balanced),
            other => Err(format!("unknown shape {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Var {
    #[serde(rename = "x")]
    X,
    #[serde(rename = "y")]
    Y,
}

impl Var {
    fn arg(self) -> Arg {
        match self {
            Var::X => Arg::X,
            Var::Y => Arg::Y,
        }
    }

    fn letter(self) -> char {
        match self {
            Var::X => 'x',
            Var::Y => 'y',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    pub operator: Operator,
    pub shape: Shape,
    pub leaves: Vec<Var>,
}

impl TargetSpec {
    pub fn new(name: impl Into<String>, operator: Operator, shape: Shape, leaves: &[Var]) -> Self {
        TargetSpec { name: name.into(), operator, shape, leaves: leaves.to_vec() }
    }

    /// LL chains double-exponentiate and blow up on the training grid.
    pub fn excluded_by_default(&self) -> bool {
        self.shape == Shape::LL
    }

    pub fn leaves_label(&self) -> String {
        self.leaves.iter().map(|v| v.letter()).collect()
    }

    /// The target a heatmap cell reports for its (operator, shape) column:
    /// LR uses (y,x) leaves, RL and RR use (x,y); balanced variants pool.
    pub fn is_headline(&self) -> bool {
        use Var::*;
        match self.shape {
            Shape::LR => self.leaves == [Y, X],
            Shape::RL | Shape::RR | Shape::LL => self.leaves == [X, Y],
            Shape::Balanced => true,
        }
    }
}

pub fn instantiate(spec: &TargetSpec) -> Result<HardExpression> {
    let want = spec.shape.leaf_arity();
    if spec.leaves.len() != want {
        return Err(Error::LeafArity { shape: spec.shape.to_string(), got: spec.leaves.len(), expected: want });
    }
    let op = spec.operator;
    let node = |l: Arg, r: Arg| HardExpression::new(op, l, r);
    let inner = || node(spec.leaves[0].arg(), spec.leaves[1].arg());
    Ok(match spec.shape {
        Shape::LR => node(Arg::sub(node(Arg::One, Arg::sub(inner()))), Arg::One),
        Shape::RL => node(Arg::One, Arg::sub(node(Arg::sub(inner()), Arg::One))),
        Shape::RR => node(Arg::One, Arg::sub(node(Arg::One, Arg::sub(inner())))),
        Shape::LL => node(Arg::sub(node(Arg::sub(inner()), Arg::One)), Arg::One),
        Shape::Balanced => node(
            Arg::sub(inner()),
            Arg::sub(node(spec.leaves[2].arg(), spec.leaves[3].arg())),
        ),
    })
}

pub fn eval_expression(expr: &HardExpression, x: f64, y: f64) -> std::result::Result<f64, Invalid> {
    expr.eval(x, y)
}

/// Chain targets under each operator, named as in the published tables.
fn chain_names(op: Operator) -> [(&'static str, Shape, [Var; 2]); 6] {
    use Var::*;
    match op {
        Operator::Eml => [
            ("Paper(yx)", Shape::LR, [Y, X]),
            ("T1(xy)", Shape::RL, [X, Y]),
            ("T4(xy)", Shape::RR, [X, Y]),
            ("T8(xy)", Shape::LR, [X, Y]),
            ("T1_yx", Shape::RL, [Y, X]),
            ("T4_yx", Shape::RR, [Y, X]),
        ],
        Operator::Sml => [
            ("S_LR(yx)", Shape::LR, [Y, X]),
            ("S_LR_xy", Shape::LR, [X, Y]),
            ("S_RL(xy)", Shape::RL, [X, Y]),
            ("S_RL_yx", Shape::RL, [Y, X]),
            ("S_RR(xy)", Shape::RR, [X, Y]),
            ("S_RR_yx", Shape::RR, [Y, X]),
        ],
        Operator::Rml => [
            ("R_LR(yx)", Shape::LR, [Y, X]),
            ("R_LR_xy", Shape::LR, [X, Y]),
            ("R_RL(xy)", Shape::RL, [X, Y]),
            ("R_RL_yx", Shape::RL, [Y, X]),
            ("R_RR(xy)", Shape::RR, [X, Y]),
            ("R_RR_yx", Shape::RR, [Y, X]),
        ],
    }
}

pub const BALANCED_VARIANTS: [[Var; 4]; 4] = {
    use Var::*;
    [[X, Y, X, Y], [Y, X, Y, X], [X, X, Y, Y], [Y, Y, X, X]]
};

/// Every named target: six chains and four balanced variants per operator.
pub fn catalog() -> Vec<TargetSpec> {
    let mut out = Vec::new();
    for op in Operator::ALL {
        for (name, shape, leaves) in chain_names(op) {
            out.push(TargetSpec::new(name, op, shape, &leaves));
        }
        let prefix = op.name().to_ascii_uppercase();
        for (i, leaves) in BALANCED_VARIANTS.iter().enumerate() {
            out.push(TargetSpec::new(format!("{prefix}_B{}", i + 1), op, Shape::Balanced, leaves));
        }
    }
    out
}

pub fn find_target(name: &str) -> Result<TargetSpec> {
    catalog()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::UnknownTarget(name.to_string()))
}

#[derive(Debug, Clone, Serialize)]
pub struct CatalogEntry {
    pub name: String,
    pub operator: Operator,
    pub shape: Shape,
    pub leaves: String,
    pub formula: String,
}

pub fn catalog_json() -> Result<String> {
    let entries = catalog()
        .iter()
        .map(|t| {
            Ok(CatalogEntry {
                name: t.name.clone(),
                operator: t.operator,
                shape: t.shape,
                leaves: t.leaves_label(),
                formula: instantiate(t)?.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(serde_json::to_string_pretty(&entries)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub count: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { count: 21, lo: -3.0, hi: 3.0 }
    }
}

impl GridSpec {
    pub fn coord(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / (self.count - 1) as f64
    }

    pub fn size(&self) -> usize {
        self.count * self.count
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub target: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub target: HardExpression,
    pub points: Vec<Point>,
    pub n_filtered: usize,
    pub grid: GridSpec,
}

pub fn make_dataset(spec: &TargetSpec, grid: GridSpec) -> Result<Dataset> {
    let expr = instantiate(spec)?;
    let mut ds = dataset_for_expression(&expr, grid)?;
    if ds.points.len() < MIN_POINTS {
        return Err(Error::UnusableTarget { name: spec.name.clone(), kept: ds.points.len() });
    }
    ds.points.shrink_to_fit();
    Ok(ds)
}

/// Grid dataset for an arbitrary formula; no minimum-size check.
pub fn dataset_for_expression(expr: &HardExpression, grid: GridSpec) -> Result<Dataset> {
    if grid.count < 2 || !(grid.hi > grid.lo) {
        return Err(Error::Config(format!("bad grid {grid:?}")));
    }
    let mut points = Vec::with_capacity(grid.size());
    let mut n_filtered = 0;
    for i in 0..grid.count {
        for j in 0..grid.count {
            let (x, y) = (grid.coord(i), grid.coord(j));
            match expr.eval(x, y) {
                Ok(t) if t.abs() <= OVERFLOW_CAP => points.push(Point { x, y, target: t }),
                _ => n_filtered += 1,
            }
        }
    }
    Ok(Dataset { target: expr.clone(), points, n_filtered, grid })
}
