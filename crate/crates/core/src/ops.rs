//! The three binary operators and their analytic partials.
//!
//! All three share the subtraction form `f(a) - g(b)`. `eml` and `sml`
//! amplify the left input's gradient and attenuate the right; `rml`
//! reverses that asymmetry.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Any intermediate or final value beyond this magnitude is treated as overflow.
pub const OVERFLOW_CAP: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Operator {
    Eml,
    Sml,
    Rml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum Invalid {
    #[error("logarithm of zero")]
    Domain,
    #[error("numeric overflow")]
    Overflow,
}

#[inline]
fn capped(v: f64) -> Result<f64, Invalid> {
    if v.is_finite() && v.abs() <= OVERFLOW_CAP {
        Ok(v)
    } else {
        Err(Invalid::Overflow)
    }
}

/// `ln|b|`, undefined only at zero.
#[inline]
pub fn safe_ln(b: f64) -> Result<f64, Invalid> {
    if b == 0.0 {
        Err(Invalid::Domain)
    } else {
        Ok(b.abs().ln())
    }
}

impl Operator {
    pub const ALL: [Operator; 3] = [Operator::Eml, Operator::Sml, Operator::Rml];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Eml => "eml",
            Operator::Sml => "sml",
            Operator::Rml => "rml",
        }
    }

    /// Upper-case name used in tables and identifiers.
    pub fn label(self) -> &'static str {
        match self {
            Operator::Eml => "EML",
            Operator::Sml => "SML",
            Operator::Rml => "RML",
        }
    }

    #[inline]
    pub fn eval(self, a: f64, b: f64) -> Result<f64, Invalid> {
        if !a.is_finite() || !b.is_finite() {
            return Err(Invalid::Overflow);
        }
        match self {
            Operator::Eml => {
                let ea = capped(a.exp())?;
                capped(ea - safe_ln(b)?)
            }
            Operator::Sml => capped(capped(a.sinh())? - b.atan()),
            Operator::Rml => capped(a.atan() - capped(b.sinh())?),
        }
    }

    /// `(d/da, d/db)` at `(a, b)`.
    #[inline]
    pub fn grad(self, a: f64, b: f64) -> Result<(f64, f64), Invalid> {
        match self {
            Operator::Eml => {
                if b == 0.0 {
                    return Err(Invalid::Domain);
                }
                Ok((capped(a.exp())?, -1.0 / b))
            }
            Operator::Sml => Ok((capped(a.cosh())?, -1.0 / (1.0 + b * b))),
            Operator::Rml => Ok((1.0 / (1.0 + a * a), -capped(b.cosh())?)),
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "eml" => Ok(Operator::Eml),
            "sml" => Ok(Operator::Sml),
            "rml" => Ok(Operator::Rml),
            other => Err(format!("unknown operator {other:?}")),
        }
    }
}

pub fn eval_op(op: Operator, a: f64, b: f64) -> Result<f64, Invalid> {
    op.eval(a, b)
}

pub fn grad_op(op: Operator, a: f64, b: f64) -> Result<(f64, f64), Invalid> {
    op.grad(a, b)
}
