//! lp norm orders, dual exponents and (sub)gradients of lp norms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// An exponent `p` in `[1, ∞]`.
///
/// `p = ∞` is its own variant so that the duals of `1` and `∞` are exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NormOrder {
    Finite(f64),
    Infinity,
}

impl NormOrder {
    pub const ONE: NormOrder = NormOrder::Finite(1.0);
    pub const TWO: NormOrder = NormOrder::Finite(2.0);
    pub const INF: NormOrder = NormOrder::Infinity;

    pub fn new(p: f64) -> Result<Self> {
        if p.is_nan() || p < 1.0 {
            return Err(Error::domain(format!("norm order must be >= 1, got {p}")));
        }
        if p.is_infinite() {
            Ok(NormOrder::Infinity)
        } else {
            Ok(NormOrder::Finite(p))
        }
    }

    pub fn is_one(self) -> bool {
        self == NormOrder::ONE
    }

    pub fn is_infinite(self) -> bool {
        self == NormOrder::Infinity
    }

    /// The exponent as a float (`f64::INFINITY` for `p = ∞`).
    pub fn value(self) -> f64 {
        match self {
            NormOrder::Finite(p) => p,
            NormOrder::Infinity => f64::INFINITY,
        }
    }

    /// The dual exponent `q` with `1/p + 1/q = 1`.
    pub fn dual(self) -> NormOrder {
        match self {
            NormOrder::Infinity => NormOrder::ONE,
            NormOrder::Finite(p) if p == 1.0 => NormOrder::Infinity,
            NormOrder::Finite(p) => NormOrder::Finite(p / (p - 1.0)),
        }
    }

    pub fn norm<'a, I>(self, v: I) -> f64
    where
        I: IntoIterator<Item = &'a f64>,
    {
        let it = v.into_iter();
        match self {
            NormOrder::Infinity => it.fold(0.0_f64, |m, x| m.max(x.abs())),
            NormOrder::Finite(p) if p == 1.0 => it.map(|x| x.abs()).sum(),
            NormOrder::Finite(p) if p == 2.0 => it.map(|x| x * x).sum::<f64>().sqrt(),
            NormOrder::Finite(p) => {
                // scale by the max entry so large p does not overflow
                let xs: Vec<f64> = it.map(|x| x.abs()).collect();
                let m = xs.iter().fold(0.0_f64, |m, &x| m.max(x));
                if m == 0.0 {
                    return 0.0;
                }
                m * xs.iter().map(|&x| (x / m).powf(p)).sum::<f64>().powf(1.0 / p)
            }
        }
    }

    /// Writes a subgradient of `‖v‖_p` into `out`.
    ///
    /// At kinks the choice is fixed: `sign(0) = 0` for `p = 1`, and the
    /// lowest index among the maximisers for `p = ∞`.
    pub fn norm_subgradient(self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), out.len());
        out.iter_mut().for_each(|o| *o = 0.0);
        match self {
            NormOrder::Infinity => {
                let mut best = 0;
                for (i, x) in v.iter().enumerate() {
                    if x.abs() > v[best].abs() {
                        best = i;
                    }
                }
                if let Some(&x) = v.get(best) {
                    out[best] = sign(x);
                }
            }
            NormOrder::Finite(p) if p == 1.0 => {
                for (o, &x) in out.iter_mut().zip(v) {
                    *o = sign(x);
                }
            }
            NormOrder::Finite(p) => {
                let n = self.norm(v);
                if n == 0.0 {
                    return;
                }
                for (o, &x) in out.iter_mut().zip(v) {
                    *o = sign(x) * (x.abs() / n).powf(p - 1.0);
                }
            }
        }
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl fmt::Display for NormOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormOrder::Infinity => write!(f, "inf"),
            NormOrder::Finite(p) => write!(f, "{p}"),
        }
    }
}

impl FromStr for NormOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "linf" | "infinity" => Ok(NormOrder::Infinity),
            other => {
                let p = other
                    .trim_start_matches('l')
                    .parse::<f64>()
                    .map_err(|_| Error::input(format!("cannot parse norm order '{s}'")))?;
                NormOrder::new(p)
            }
        }
    }
}
