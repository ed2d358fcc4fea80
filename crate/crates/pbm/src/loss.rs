//! Dual loss terms `g_i` for hinge-loss SVM and logistic regression.
//!
//! The trained objective is `f(a) = 1/2 a'Qa + sum_i g_i(a_i)` over the box
//! `[0, C]^n`. For the hinge loss `g(a) = -a`; for logistic regression
//! `g(a) = a*ln(a) + (C-a)*ln(C-a)` with `0*ln(0) = 0`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sentinel for evaluating `g` outside the box. Large but finite so that
/// accidental arithmetic on it stays NaN-free; feasible iterates never
/// produce it because updates clip first.
pub const G_INFINITY: f64 = 1e300;

/// Relative clamp for logistic endpoints, where the derivative diverges.
const INTERIOR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Hinge,
    Logistic,
}

/// Loss selection plus the regularization constant `C > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub c: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, c: f64) -> Result<Self> {
        if c > 0.0 {
            Ok(Self { kind, c })
        } else {
            Err(Error::InvalidArgument(format!(
                "C must be positive, got {c}"
            )))
        }
    }

    pub fn hinge(c: f64) -> Result<Self> {
        Self::new(LossKind::Hinge, c)
    }

    pub fn logistic(c: f64) -> Result<Self> {
        Self::new(LossKind::Logistic, c)
    }

    /// Box bounds for the dual variables: `[0, C]` for both losses.
    pub fn bounds(&self, n: usize) -> BoxBounds {
        BoxBounds::uniform(n, 0.0, self.c)
    }
}

/// Elementwise lower/upper bounds `a <= alpha <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidArgument(
                "bound vectors differ in length".into(),
            ));
        }
        if lower.iter().zip(&upper).any(|(a, b)| a > b) {
            return Err(Error::InvalidArgument(
                "lower bound exceeds upper bound".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(n: usize, lo: f64, hi: f64) -> Self {
        Self {
            lower: vec![lo; n],
            upper: vec![hi; n],
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn at(&self, i: usize) -> (f64, f64) {
        (self.lower[i], self.upper[i])
    }

    pub fn contains(&self, alpha: &[f64]) -> bool {
        alpha.len() == self.len()
            && alpha
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&a, &b))| a <= x && x <= b)
    }
}

/// `g(alpha)` for one coordinate; `G_INFINITY` outside `[0, C]`.
pub fn g_value(spec: LossSpec, alpha: f64) -> f64 {
    if alpha < 0.0 || alpha > spec.c {
        return G_INFINITY;
    }
    match spec.kind {
        LossKind::Hinge => -alpha,
        LossKind::Logistic => xlogx(alpha) + xlogx(spec.c - alpha),
    }
}

#[inline]
fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `g'(alpha)`. For logistic the argument is clamped to the interior
/// `[eps*C, C - eps*C]` because the true derivative diverges at the endpoints.
pub fn g_grad(spec: LossSpec, alpha: f64) -> f64 {
    match spec.kind {
        LossKind::Hinge => -1.0,
        LossKind::Logistic => {
            let eps = INTERIOR_EPS * spec.c;
            let u = alpha.clamp(eps, spec.c - eps);
            (u / (spec.c - u)).ln()
        }
    }
}

/// Minimizes `phi(delta) = 1/2*q_ii*delta^2 + linear_coef*delta +
/// g(current + delta)` subject to `lo <= current + delta <= hi`.
///
/// For the hinge loss this is the clipped vertex of a quadratic; for
/// logistic it is a safeguarded (damped) Newton iteration on the strictly
/// convex one-variable function, kept strictly interior to `(0, C)`.
pub fn one_var_min(
    spec: LossSpec,
    q_ii: f64,
    linear_coef: f64,
    current: f64,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    if q_ii <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "one_var_min requires a positive diagonal, got {q_ii}"
        )));
    }
    match spec.kind {
        LossKind::Hinge => {
            // phi(delta) = 1/2 q delta^2 + (linear_coef - 1) delta + const
            let target = current + (1.0 - linear_coef) / q_ii;
            Ok(target.clamp(lo, hi) - current)
        }
        LossKind::Logistic => {
            let eps = INTERIOR_EPS * spec.c;
            let lo = lo.max(eps);
            let hi = hi.min(spec.c - eps);
            if lo >= hi {
                return Ok(lo.clamp(lo, hi) - current);
            }
            // phi'(u) = q*(u - current) + linear_coef + ln(u / (C - u)),
            // strictly increasing in u.
            let dphi = |u: f64| q_ii * (u - current) + linear_coef + (u / (spec.c - u)).ln();
            let d2phi = |u: f64| q_ii + 1.0 / u + 1.0 / (spec.c - u);
            if dphi(lo) >= 0.0 {
                return Ok(lo - current);
            }
            if dphi(hi) <= 0.0 {
                return Ok(hi - current);
            }
            let (mut blo, mut bhi) = (lo, hi);
            let mut u = current.clamp(lo, hi);
            for _ in 0..50 {
                let d = dphi(u);
                if d > 0.0 {
                    bhi = u;
                } else {
                    blo = u;
                }
                let mut next = u - d / d2phi(u);
                if !(next > blo && next < bhi) {
                    next = 0.5 * (blo + bhi);
                }
                let step = (next - u).abs();
                u = next;
                if step <= 1e-12 {
                    break;
                }
            }
            Ok(u - current)
        }
    }
}
