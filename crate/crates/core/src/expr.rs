//! Concrete operator trees and their canonical string form.
//!
//! Grammar: `expr := op "(" arg "," arg ")"`, `arg := "1" | "x" | "y" | expr`.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::ops::{Invalid, Operator};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Arg {
    One,
    X,
    Y,
    Sub(Box<HardExpression>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HardExpression {
    pub op: Operator,
    pub left: Arg,
    pub right: Arg,
}

impl Arg {
    pub fn sub(e: HardExpression) -> Arg {
        Arg::Sub(Box::new(e))
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> Result<f64, Invalid> {
        match self {
            Arg::One => Ok(1.0),
            Arg::X => Ok(x),
            Arg::Y => Ok(y),
            Arg::Sub(e) => e.eval(x, y),
        }
    }

    fn depth(&self) -> usize {
        match self {
            Arg::Sub(e) => e.depth(),
            _ => 0,
        }
    }
}

impl HardExpression {
    pub fn new(op: Operator, left: Arg, right: Arg) -> Self {
        HardExpression { op, left, right }
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> Result<f64, Invalid> {
        let a = self.left.eval(x, y)?;
        let b = self.right.eval(x, y)?;
        self.op.eval(a, b)
    }

    /// Number of operator levels.
    pub fn depth(&self) -> usize {
        1 + self.left.depth().max(self.right.depth())
    }

    /// Same tree with `x` and `y` exchanged.
    pub fn swap_vars(&self) -> HardExpression {
        fn swap(a: &Arg) -> Arg {
            match a {
                Arg::One => Arg::One,
                Arg::X => Arg::Y,
                Arg::Y => Arg::X,
                Arg::Sub(e) => Arg::sub(e.swap_vars()),
            }
        }
        HardExpression::new(self.op, swap(&self.left), swap(&self.right))
    }

    /// True when every node uses `op`.
    pub fn uses_only(&self, op: Operator) -> bool {
        let ok = |a: &Arg| match a {
            Arg::Sub(e) => e.uses_only(op),
            _ => true,
        };
        self.op == op && ok(&self.left) && ok(&self.right)
    }
}

impl fmt::Display for Arg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arg::One => f.write_str("1"),
            Arg::X => f.write_str("x"),
            Arg::Y => f.write_str("y"),
            Arg::Sub(e) => e.fmt(f),
        }
    }
}

impl fmt::Display for HardExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({},{})", self.op, self.left, self.right)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { pos: self.pos, msg: msg.into() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), Error> {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected '{}'", c as char)))
        }
    }

    fn expr(&mut self) -> Result<HardExpression, Error> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        if rest.len() < 3 {
            return Err(self.err("expected operator"));
        }
        let name = std::str::from_utf8(&rest[..3]).map_err(|_| self.err("expected operator"))?;
        let op: Operator = name.parse().map_err(|e: String| self.err(e))?;
        self.pos += 3;
        self.expect(b'(')?;
        let left = self.arg()?;
        self.expect(b',')?;
        let right = self.arg()?;
        self.expect(b')')?;
        Ok(HardExpression::new(op, left, right))
    }

    fn arg(&mut self) -> Result<Arg, Error> {
        self.skip_ws();
        match self.src.get(self.pos) {
            Some(b'1') => {
                self.pos += 1;
                Ok(Arg::One)
            }
            Some(b'x') => {
                self.pos += 1;
                Ok(Arg::X)
            }
            Some(b'y') => {
                self.pos += 1;
                Ok(Arg::Y)
            }
            Some(_) => Ok(Arg::sub(self.expr()?)),
            None => Err(self.err("unexpected end of input")),
        }
    }
}

impl FromStr for HardExpression {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let mut p = Parser { src: s.as_bytes(), pos: 0 };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.err("trailing input"));
        }
        Ok(e)
    }
}

impl Serialize for HardExpression {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HardExpression {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
