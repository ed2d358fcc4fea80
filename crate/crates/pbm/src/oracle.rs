//! Slow, independent reference implementations used by tests and `bench`.
//!
//! Nothing here shares a numerical code path with the solvers it checks:
//! the dense `Q` is assembled with the naive `|x|^2 + |z|^2 - 2 x.z`
//! distance formula, the loss terms are re-derived locally, and the
//! box-constrained minimizer is a projected-gradient method rather than
//! coordinate descent.

use crate::data::Dataset;
use crate::kernel::KernelSpec;
use crate::local_solver::Subproblem;
use crate::loss::{BoxBounds, LossKind, LossSpec};
use crate::{Error, Result};

const MAX_PG_ITERS: u64 = 1_000_000;

/// Row-major dense symmetric matrix.
#[derive(Debug, Clone)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = f(i, j);
            }
        }
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let row = &self.data[i * self.n..(i + 1) * self.n];
                row.iter().zip(x).map(|(q, v)| q * v).sum()
            })
            .collect()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                worst = worst.max((self.at(i, j) - self.at(j, i)).abs());
            }
        }
        worst
    }
}

/// Builds `Q` with the naive expansion of the squared distance.
pub fn naive_q_matrix(dataset: &Dataset, spec: KernelSpec) -> DenseMatrix {
    let n = dataset.n();
    let norms: Vec<f64> = (0..n).map(|i| dataset.sample(i).norm_squared()).collect();
    DenseMatrix::from_fn(n, |i, j| {
        let k = match spec {
            KernelSpec::Gaussian { gamma } => {
                let d2 = norms[i] + norms[j] - 2.0 * dataset.sample(i).dot(dataset.sample(j));
                (-gamma * d2.max(0.0)).exp()
            }
            KernelSpec::Linear => dataset.sample(i).dot(dataset.sample(j)),
        };
        dataset.label(i) * dataset.label(j) * k
    })
}

/// A fully materialized instance of the box-constrained dual problem.
pub struct DenseProblem {
    pub q: DenseMatrix,
    pub loss: LossSpec,
    pub bounds: BoxBounds,
}

impl DenseProblem {
    pub fn new(q: DenseMatrix, loss: LossSpec, bounds: BoxBounds) -> Result<Self> {
        if bounds.len() != q.n() {
            return Err(Error::InvalidArgument("bounds/matrix size mismatch".into()));
        }
        let asym = q.max_asymmetry();
        if asym > 1e-8 {
            return Err(Error::InvalidArgument(format!("Q asymmetric by {asym:e}")));
        }
        Ok(Self { q, loss, bounds })
    }

    pub fn from_dataset(dataset: &Dataset, spec: KernelSpec, loss: LossSpec) -> Result<Self> {
        Self::new(
            naive_q_matrix(dataset, spec),
            loss,
            loss.bounds(dataset.n()),
        )
    }

    pub fn n(&self) -> usize {
        self.q.n()
    }

    pub fn objective(&self, alpha: &[f64]) -> f64 {
        let qa = self.q.mul(alpha);
        0.5 * dot(alpha, &qa) + alpha.iter().map(|&a| oracle_g(self.loss, a)).sum::<f64>()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// Locally re-derived loss terms; deliberately not the `loss` module's code.
fn oracle_g(loss: LossSpec, u: f64) -> f64 {
    match loss.kind {
        LossKind::Hinge => -u,
        LossKind::Logistic => {
            let t = |v: f64| if v <= 0.0 { 0.0 } else { v * v.ln() };
            t(u) + t(loss.c - u)
        }
    }
}

fn oracle_g_grad(loss: LossSpec, u: f64) -> f64 {
    match loss.kind {
        LossKind::Hinge => -1.0,
        LossKind::Logistic => {
            let eps = 1e-12 * loss.c;
            let v = u.clamp(eps, loss.c - eps);
            (v / (loss.c - v)).ln()
        }
    }
}

/// Exact one-variable minimizer of
/// `1/2 q delta^2 + lin*delta + g(u + delta)` for `u + delta` in `[lo, hi]`,
/// by closed form (hinge) or golden section (logistic).
fn oracle_one_var(loss: LossSpec, q: f64, lin: f64, u: f64, lo: f64, hi: f64) -> f64 {
    match loss.kind {
        LossKind::Hinge => (u + (1.0 - lin) / q).clamp(lo, hi) - u,
        LossKind::Logistic => {
            let phi = |d: f64| 0.5 * q * d * d + lin * d + oracle_g(loss, u + d);
            golden_section_min(&phi, lo - u, hi - u, 1e-13)
        }
    }
}

/// Generalized projected-gradient solve used by both `solve_dense` and
/// `exact_subproblem`. Minimizes
/// `1/2 x'Qx + lin'x + sum_i g(shift_i + x_i)` over `lo <= shift + x <= hi`,
/// stopping when the coordinatewise-exact-minimizer residual drops to `tol`.
///
/// The step length is the spectral (Barzilai-Borwein) estimate, backtracked
/// until sufficient decrease holds along the projection arc. When decreases
/// fall below floating-point resolution the iterate is numerically
/// stationary and is returned as-is; the achievable residual floor is around
/// `1e-8` for unit-scale problems.
fn projected_gradient(
    q: &DenseMatrix,
    lin: &[f64],
    shift: &[f64],
    loss: LossSpec,
    bounds: &BoxBounds,
    residual_tol: f64,
) -> Result<Vec<f64>> {
    let n = q.n();
    let lo: Vec<f64> = (0..n).map(|i| bounds.lower()[i] - shift[i]).collect();
    let hi: Vec<f64> = (0..n).map(|i| bounds.upper()[i] - shift[i]).collect();
    let mut x: Vec<f64> = (0..n).map(|i| 0.0f64.clamp(lo[i], hi[i])).collect();

    let g_total = |x: &[f64]| {
        x.iter()
            .enumerate()
            .map(|(i, &v)| oracle_g(loss, shift[i] + v))
            .sum::<f64>()
    };
    let mut qx = q.mul(&x);
    let mut fx = 0.5 * dot(&x, &qx) + dot(lin, &x) + g_total(&x);
    let grad_at = |x: &[f64], qx: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| qx[i] + lin[i] + oracle_g_grad(loss, shift[i] + x[i]))
            .collect()
    };
    let mut grad = grad_at(&x, &qx);
    let mut step = 1.0f64;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None; // (x, grad)

    for _iter in 0..MAX_PG_ITERS {
        // residual of the exact coordinatewise minimizer map
        let mut residual = 0.0f64;
        for i in 0..n {
            let qii = q.at(i, i).max(1e-12);
            let delta = oracle_one_var(
                loss,
                qii,
                qx[i] + lin[i],
                shift[i] + x[i],
                lo[i] + shift[i],
                hi[i] + shift[i],
            );
            residual = residual.max(delta.abs());
        }
        if residual <= residual_tol {
            return Ok(x);
        }

        // Barzilai-Borwein step estimate, safeguarded
        if let Some((px, pg)) = &prev {
            let mut ss = 0.0;
            let mut sy = 0.0;
            for i in 0..n {
                let s = x[i] - px[i];
                let y = grad[i] - pg[i];
                ss += s * s;
                sy += s * y;
            }
            if sy > 0.0 && ss > 0.0 {
                step = (ss / sy).clamp(1e-10, 1e10);
            }
        }

        // backtracking along the projection arc, requiring strict decrease
        let mut accepted = false;
        for _ in 0..80 {
            let cand: Vec<f64> = (0..n)
                .map(|i| (x[i] - step * grad[i]).clamp(lo[i], hi[i]))
                .collect();
            if cand == x {
                break; // no movement possible at this scale
            }
            let qc = q.mul(&cand);
            let fc = 0.5 * dot(&cand, &qc) + dot(lin, &cand) + g_total(&cand);
            let dir_term: f64 = (0..n).map(|i| grad[i] * (cand[i] - x[i])).sum();
            if fc < fx && fc <= fx + 0.1 * dir_term {
                prev = Some((std::mem::take(&mut x), std::mem::take(&mut grad)));
                x = cand;
                qx = qc;
                fx = fc;
                grad = grad_at(&x, &qx);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // decreases fell below floating-point resolution
            return Ok(x);
        }
    }
    Err(Error::OracleDiverged(MAX_PG_ITERS))
}

/// Reference solve of a dense problem to a residual of `tol / 10`.
pub fn solve_dense(problem: &DenseProblem, tol: f64) -> Result<Vec<f64>> {
    if tol <= 0.0 {
        return Err(Error::InvalidArgument("tol must be positive".into()));
    }
    let n = problem.n();
    projected_gradient(
        &problem.q,
        &vec![0.0; n],
        &vec![0.0; n],
        problem.loss,
        &problem.bounds,
        tol / 10.0,
    )
}

/// Exact minimizer of one block subproblem, for measuring inner-solver quality.
pub fn exact_subproblem(sub: &Subproblem<'_>, tol: f64) -> Result<Vec<f64>> {
    let m = sub.len();
    let q = DenseMatrix::from_fn(m, |i, j| sub.q_block.entry(i, j));
    let bounds = BoxBounds::new(sub.lower.to_vec(), sub.upper.to_vec())?;
    projected_gradient(&q, sub.q_alpha, sub.alpha, sub.loss, &bounds, tol)
}

/// Argmin of `f` over a uniform grid of `resolution` points on `[lo, hi]`.
pub fn grid_line_search(f: impl Fn(f64) -> f64, lo: f64, hi: f64, resolution: usize) -> f64 {
    assert!(resolution >= 2 && hi >= lo);
    let mut best_beta = lo;
    let mut best_val = f64::INFINITY;
    for t in 0..resolution {
        let beta = lo + (hi - lo) * t as f64 / (resolution - 1) as f64;
        let v = f(beta);
        if v < best_val {
            best_val = v;
            best_beta = beta;
        }
    }
    best_beta
}

/// Golden-section search for the minimum of a unimodal function on `[lo, hi]`.
pub fn golden_section_min(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INVPHI * (b - a);
    let mut d = a + INVPHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INVPHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INVPHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}
