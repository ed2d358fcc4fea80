//! The outer training loop.
//!
//! Each outer iteration: every worker approximately solves its block
//! subproblem for a direction `d_{S_r}`, computes `Q[:, S_r] d_{S_r}`, a
//! Reduce-Scatter hands every worker `(Qd)_{S_r}`, a communication-efficient
//! line search picks the step `beta`, and workers update `alpha_{S_r}` and
//! the maintained `(Q alpha)_{S_r}` in place. The loop stops when the
//! infinity norm of the coordinatewise-exact-minimizer residual `T(a) - a`
//! drops to `outer_tol`.

use std::sync::{Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::comm::{Collective, ReduceOp};
use crate::data::Dataset;
use crate::kernel::{q_diagonal, KernelCache, KernelSpec};
use crate::local_solver::{solve_block, BlockMatrix, Budget, Strategy, Subproblem};
use crate::loss::{g_grad, g_value, one_var_min, BoxBounds, LossKind, LossSpec};
use crate::partition::{kmeans_partition, random_partition, Partition};
use crate::predict::{DirectionSample, Model};
use crate::{Error, Result};

const MIN_BETA: f64 = 8.673617379884035e-19; // 2^-60

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PartitionMode {
    Random,
    Kmeans { subsample: usize, iters: usize },
}

impl PartitionMode {
    /// kmeans on a 20k subsample, the partitioning default.
    pub fn kmeans_default() -> Self {
        PartitionMode::Kmeans {
            subsample: 20_000,
            iters: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineSearchKind {
    Armijo,
    Optimal,
}

/// Everything that determines a training run. Serialized into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub kernel: KernelSpec,
    pub workers: usize,
    pub partition_mode: PartitionMode,
    /// Armijo constant in (0, 1).
    pub sigma: f64,
    /// `None` selects by loss: closed-form optimal step for hinge (whose
    /// separable term is linear), Armijo backtracking for logistic.
    pub line_search: Option<LineSearchKind>,
    pub inner_strategy: Strategy,
    /// Inner budget in epochs (multiples of the block size); `None` means
    /// run until `inner_tol`.
    pub inner_epochs: Option<u64>,
    /// Early-stop score for the inner solver; defaults to `outer_tol / 10`.
    pub inner_tol: Option<f64>,
    pub outer_tol: f64,
    pub max_outer_iters: u64,
    pub seed: u64,
    pub cache_bytes: usize,
    /// Every N iterations, recompute `Q alpha` from scratch and record the
    /// worst drift against the maintained vector. Adds one Reduce-Scatter
    /// (and its bytes) per check.
    pub qalpha_check_every: Option<u64>,
    /// Write `0.0` in the trace CSV time column so that replayed runs are
    /// byte-identical.
    pub zero_trace_time: bool,
    /// Cap on concurrently computing workers (logical worker count is
    /// unaffected). `None` uses one thread per worker.
    pub max_parallel: Option<usize>,
    pub comm_timeout_secs: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec {
                kind: LossKind::Hinge,
                c: 1.0,
            },
            kernel: KernelSpec::Gaussian { gamma: 1.0 },
            workers: 1,
            partition_mode: PartitionMode::kmeans_default(),
            sigma: 0.01,
            line_search: None,
            inner_strategy: Strategy::Greedy,
            inner_epochs: Some(5),
            inner_tol: None,
            outer_tol: 1e-3,
            max_outer_iters: 500,
            seed: 0,
            cache_bytes: crate::kernel::DEFAULT_CACHE_BYTES,
            qalpha_check_every: None,
            zero_trace_time: false,
            max_parallel: None,
            comm_timeout_secs: 600,
        }
    }
}

impl TrainConfig {
    pub fn line_search_kind(&self) -> LineSearchKind {
        self.line_search.unwrap_or(match self.loss.kind {
            LossKind::Hinge => LineSearchKind::Optimal,
            LossKind::Logistic => LineSearchKind::Armijo,
        })
    }

    pub fn inner_tol_value(&self) -> f64 {
        self.inner_tol.unwrap_or(0.1 * self.outer_tol)
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.workers == 0 || self.workers > n {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= workers <= n; got workers={} n={n}",
                self.workers
            )));
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma must lie in (0,1), got {}",
                self.sigma
            )));
        }
        if self.outer_tol <= 0.0 {
            return Err(Error::InvalidArgument("outer_tol must be positive".into()));
        }
        if self.line_search_kind() == LineSearchKind::Optimal && self.loss.kind != LossKind::Hinge {
            return Err(Error::InvalidArgument(
                "the closed-form optimal step requires a linear separable term (hinge loss)".into(),
            ));
        }
        if self.inner_epochs == Some(0) {
            return Err(Error::InvalidArgument(
                "inner budget must be at least 1 epoch".into(),
            ));
        }
        Ok(())
    }
}

/// One trace row per outer iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: u64,
    pub time_s: f64,
    pub objective: f64,
    pub residual_inf: f64,
    pub beta: f64,
    /// Cumulative Reduce-Scatter payload bytes after this iteration.
    pub bytes_comm: u64,
    /// Total inner updates across blocks this iteration.
    pub inner_updates: u64,
    pub inner_updates_per_block: Vec<u64>,
    /// Worst maintained-vs-recomputed `Q alpha` deviation, when checked.
    pub qalpha_drift: Option<f64>,
    /// `grad f(alpha)' d` for the accepted direction (the line-search slope).
    pub grad_dot_d: f64,
    /// `f(alpha + d/k) - f(alpha)`, the averaging-condition reference.
    pub delta_obj_inv_k: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainTrace {
    pub iterations: Vec<IterRecord>,
    pub converged: bool,
    pub initial_objective: f64,
    pub reduce_scatter_bytes: u64,
    pub scalar_bytes: u64,
    pub wall_seconds: f64,
    /// Worst incremental-vs-recomputed objective deviation over the run.
    pub objective_drift: f64,
    zero_time: bool,
}

impl TrainTrace {
    pub fn final_objective(&self) -> f64 {
        self.iterations
            .last()
            .map_or(self.initial_objective, |r| r.objective)
    }

    /// CSV with the pinned header
    /// `iter,time_s,objective,residual_inf,beta,bytes_comm,inner_updates`.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("iter,time_s,objective,residual_inf,beta,bytes_comm,inner_updates\n");
        for r in &self.iterations {
            let t = if self.zero_time { 0.0 } else { r.time_s };
            out.push_str(&format!(
                "{},{:.6},{},{},{},{},{}\n",
                r.iter, t, r.objective, r.residual_inf, r.beta, r.bytes_comm, r.inner_updates
            ));
        }
        out
    }
}

/// Assembled global dual state, used by the single-threaded entry points and
/// the tests; the distributed loop shards it across workers.
#[derive(Debug, Clone)]
pub struct DualState {
    pub alpha: Vec<f64>,
    pub q_alpha: Vec<f64>,
    pub objective: f64,
    pub loss: LossSpec,
    pub bounds: BoxBounds,
}

impl DualState {
    /// The all-zeros start: `Q alpha = 0`, objective `sum_i g_i(0)`.
    pub fn zero(n: usize, loss: LossSpec) -> Self {
        Self {
            alpha: vec![0.0; n],
            q_alpha: vec![0.0; n],
            objective: n as f64 * g_value(loss, 0.0),
            loss,
            bounds: loss.bounds(n),
        }
    }

    /// `1/2 a'(Qa) + sum g(a_i)` from the maintained product.
    pub fn objective_from_parts(&self) -> f64 {
        let quad: f64 = self
            .alpha
            .iter()
            .zip(&self.q_alpha)
            .map(|(a, qa)| a * qa)
            .sum();
        let sep: f64 = self.alpha.iter().map(|&a| g_value(self.loss, a)).sum();
        0.5 * quad + sep
    }
}

/// `g` evaluated with the iterate clamped into the box; line-search trial
/// points may spill out of the box by a rounding error even though the
/// accepted update clips.
fn g_clamped(loss: LossSpec, v: f64, lo: f64, hi: f64) -> f64 {
    g_value(loss, v.clamp(lo, hi))
}

/// Backtracking control shared by the single-threaded and distributed paths.
/// `h(beta)` must return `f(alpha + beta d) - f(alpha)`; the caller decides
/// whether that is a local sum or an all-reduce. Picks the largest
/// `beta in {1, 1/2, 1/4, ...}` satisfying the sufficient-decrease condition
/// `h(beta) <= beta * sigma * delta` and the averaging condition
/// `h(beta) <= h(1/k)`. Returns `(beta, h(beta))`.
///
/// `1/k` itself is injected into the candidate sequence: the averaging
/// condition holds there by construction, and for worker counts that are
/// not powers of two the halved grid alone can skip past the entire window
/// where both conditions hold.
fn armijo_core(
    delta: f64,
    sigma: f64,
    k: usize,
    mut h: impl FnMut(f64) -> Result<f64>,
) -> Result<(f64, f64)> {
    if delta >= 0.0 {
        return Err(Error::NonDescent(delta));
    }
    let inv_k = 1.0 / k as f64;
    let h_ref = h(inv_k)?;
    let mut attempt = |beta: f64| -> Result<Option<(f64, f64)>> {
        let hv = h(beta)?;
        Ok((hv <= beta * sigma * delta && hv <= h_ref).then_some((beta, hv)))
    };
    let mut beta = 1.0;
    while beta >= MIN_BETA {
        if let Some(hit) = attempt(beta)? {
            return Ok(hit);
        }
        let next = beta * 0.5;
        if inv_k < beta && inv_k > next {
            if let Some(hit) = attempt(inv_k)? {
                return Ok(hit);
            }
        }
        beta = next;
    }
    Err(Error::LineSearchUnderflow)
}

/// Closed-form step for a linear separable term: the vertex of the
/// univariate quadratic `f(alpha + beta d)`, clipped to the feasible
/// interval `[eta_lo, eta_hi]`.
fn optimal_core(lin: f64, quad: f64, eta_lo: f64, eta_hi: f64) -> Result<f64> {
    if lin >= 0.0 {
        return Err(Error::NonDescent(lin));
    }
    if quad > 0.0 {
        Ok((-lin / quad).clamp(eta_lo, eta_hi))
    } else {
        // PSD kernel: the quadratic term can only vanish, leaving a strictly
        // decreasing linear function; take the largest feasible step
        Ok(eta_hi)
    }
}

/// Largest and smallest feasible steps: `a <= alpha + beta d <= b`.
fn feasible_interval(alpha: &[f64], d: &[f64], lower: &[f64], upper: &[f64]) -> (f64, f64) {
    let mut hi = f64::INFINITY;
    let mut lo = f64::NEG_INFINITY;
    for i in 0..alpha.len() {
        if d[i] > 0.0 {
            hi = hi.min((upper[i] - alpha[i]) / d[i]);
            lo = lo.max((lower[i] - alpha[i]) / d[i]);
        } else if d[i] < 0.0 {
            hi = hi.min((lower[i] - alpha[i]) / d[i]);
            lo = lo.max((upper[i] - alpha[i]) / d[i]);
        }
    }
    (lo, hi)
}

/// Armijo line search over the assembled state. Returns the accepted step.
pub fn line_search_armijo(
    state: &DualState,
    d: &[f64],
    q_d: &[f64],
    sigma: f64,
    k: usize,
) -> Result<f64> {
    let delta: f64 = (0..d.len())
        .map(|i| (state.q_alpha[i] + g_grad(state.loss, state.alpha[i])) * d[i])
        .sum();
    let d_qa: f64 = d.iter().zip(&state.q_alpha).map(|(x, y)| x * y).sum();
    let d_qd: f64 = d.iter().zip(q_d).map(|(x, y)| x * y).sum();
    let h = |beta: f64| -> Result<f64> {
        let mut sep = 0.0;
        for (i, &di) in d.iter().enumerate() {
            let (lo, hi) = state.bounds.at(i);
            sep += g_clamped(state.loss, state.alpha[i] + beta * di, lo, hi)
                - g_value(state.loss, state.alpha[i]);
        }
        Ok(beta * d_qa + 0.5 * beta * beta * d_qd + sep)
    };
    armijo_core(delta, sigma, k, h).map(|(beta, _)| beta)
}

/// Optimal step for the hinge loss (separable term `-sum alpha_i`).
pub fn line_search_optimal(state: &DualState, d: &[f64], q_d: &[f64]) -> Result<f64> {
    if state.loss.kind != LossKind::Hinge {
        return Err(Error::InvalidArgument(
            "optimal step requires a linear separable term".into(),
        ));
    }
    let a_qd: f64 = state.alpha.iter().zip(q_d).map(|(x, y)| x * y).sum();
    let p_d: f64 = d.iter().map(|v| -v).sum();
    let d_qd: f64 = d.iter().zip(q_d).map(|(x, y)| x * y).sum();
    let (lo, hi) = feasible_interval(&state.alpha, d, state.bounds.lower(), state.bounds.upper());
    optimal_core(a_qd + p_d, d_qd, lo, hi)
}

/// The residual vector `T(alpha) - alpha` of exact one-variable minimizers.
pub fn projection_residual(
    state: &DualState,
    dataset: &Dataset,
    spec: KernelSpec,
) -> Result<Vec<f64>> {
    let diag = q_diagonal(dataset, spec);
    (0..state.alpha.len())
        .map(|i| {
            let (lo, hi) = state.bounds.at(i);
            one_var_min(
                state.loss,
                diag[i],
                state.q_alpha[i],
                state.alpha[i],
                lo,
                hi,
            )
        })
        .collect()
}

/// `Q[:, block] * d` over the full sample range, skipping zero entries of
/// `d` (no kernel evaluation happens for them).
pub fn compute_q_times_d(
    dataset: &Dataset,
    spec: KernelSpec,
    cache: &KernelCache,
    block: &[usize],
    d: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; dataset.n()];
    for (pos, &j) in block.iter().enumerate() {
        if d[pos] != 0.0 {
            let col = cache.q_column(dataset, spec, j);
            for (o, q) in out.iter_mut().zip(col.iter()) {
                *o += d[pos] * q;
            }
        }
    }
    out
}

/// Counting semaphore bounding how many workers compute simultaneously.
/// Permits are never held across collective calls.
struct Limiter {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        let mut p = self.permits.lock().expect("limiter poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("limiter poisoned");
        }
        *p -= 1;
        drop(p);
        let out = f();
        *self.permits.lock().expect("limiter poisoned") += 1;
        self.cv.notify_one();
        out
    }
}

fn mix_seed(seed: u64, rank: u64, round: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z =
        seed ^ rank.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ round.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct WorkerOutput {
    rank: usize,
    alpha: Vec<f64>,
    last_d: Vec<f64>,
}

/// Trains on `dataset` per `config`; returns the model and the per-iteration
/// trace. See the module docs for the loop structure.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<(Model, TrainTrace)> {
    let n = dataset.n();
    config.validate(n)?;
    let k = config.workers;
    let loss = config.loss;
    let spec = config.kernel;

    let partition = match config.partition_mode {
        PartitionMode::Random => random_partition(n, k, config.seed)?,
        PartitionMode::Kmeans { subsample, iters } => {
            kmeans_partition(dataset, k, subsample.min(n).max(k), iters, config.seed)?
        }
    };
    if partition.max_block_len() * k > 4 * n {
        log::warn!(
            "imbalanced partition: largest block {} exceeds 4n/k = {}",
            partition.max_block_len(),
            4 * n / k
        );
    }

    let cache = KernelCache::new(config.cache_bytes);
    let diag = q_diagonal(dataset, spec);
    let bounds = loss.bounds(n);
    let collective =
        Collective::with_timeout(k, std::time::Duration::from_secs(config.comm_timeout_secs));
    let limiter = Limiter::new(config.max_parallel.unwrap_or(k));
    let start = Instant::now();
    let initial_objective = n as f64 * g_value(loss, 0.0);

    let trace_rows: Mutex<Vec<IterRecord>> = Mutex::new(Vec::new());
    let run_stats: Mutex<(bool, f64)> = Mutex::new((false, 0.0)); // (converged, objective drift)

    let budget = |m: usize| match (config.inner_strategy, config.inner_epochs) {
        (Strategy::Cyclic, Some(e)) => Budget::Epochs(e),
        (Strategy::Cyclic, None) => Budget::Epochs(u64::MAX / m.max(1) as u64),
        (_, Some(e)) => Budget::Updates(e.saturating_mul(m as u64)),
        (_, None) => Budget::Updates(u64::MAX),
    };
    let inner_tol = config.inner_tol_value();
    let line_search = config.line_search_kind();

    let worker = |rank: usize| -> Result<WorkerOutput> {
        let block = partition.block(rank);
        let m = block.len();
        let lower: Vec<f64> = block.iter().map(|&i| bounds.lower()[i]).collect();
        let upper: Vec<f64> = block.iter().map(|&i| bounds.upper()[i]).collect();
        let block_diag: Vec<f64> = block.iter().map(|&i| diag[i]).collect();

        // the dense block needs m*m entries; route through the cache if that
        // exceeds the per-worker memory budget
        let q_block = limiter.run(|| {
            if m * m * crate::kernel::BYTES_PER_ENTRY <= config.cache_bytes {
                BlockMatrix::dense(dataset, spec, block)
            } else {
                BlockMatrix::cached(&cache, dataset, spec, block)
            }
        });

        let mut alpha = vec![0.0; m];
        let mut q_alpha = vec![0.0; m];
        let mut objective = initial_objective;
        let mut last_d = vec![0.0; m];
        let mut converged = false;
        let mut worst_obj_drift = 0.0f64;

        for t in 0..config.max_outer_iters {
            let sub = Subproblem {
                block,
                q_block: &q_block,
                q_alpha: &q_alpha,
                alpha: &alpha,
                loss,
                lower: &lower,
                upper: &upper,
            };
            let result = limiter.run(|| {
                solve_block(
                    &sub,
                    config.inner_strategy,
                    budget(m),
                    inner_tol,
                    mix_seed(config.seed, rank as u64, t),
                )
            })?;
            let d = result.d;

            let u = limiter.run(|| compute_q_times_d(dataset, spec, &cache, block, &d));
            let qd = collective.reduce_scatter(rank, &u, &partition)?;

            // line search; every worker walks the same reduced values
            let d_qa: f64 = d.iter().zip(&q_alpha).map(|(x, y)| x * y).sum();
            let d_qd: f64 = d.iter().zip(&qd).map(|(x, y)| x * y).sum();
            let inv_k = 1.0 / k as f64;
            let (beta, h_acc, slope, h_inv_k) = match line_search {
                LineSearchKind::Armijo => {
                    let local_delta: f64 = (0..m)
                        .map(|i| (q_alpha[i] + g_grad(loss, alpha[i])) * d[i])
                        .sum();
                    let delta = collective.allreduce(rank, local_delta, ReduceOp::Sum)?;
                    let h = |beta: f64| -> Result<f64> {
                        let mut sep = 0.0;
                        for i in 0..m {
                            sep += g_clamped(loss, alpha[i] + beta * d[i], lower[i], upper[i])
                                - g_value(loss, alpha[i]);
                        }
                        let local = beta * d_qa + 0.5 * beta * beta * d_qd + sep;
                        Ok(collective.allreduce(rank, local, ReduceOp::Sum)?)
                    };
                    if delta == 0.0 {
                        // no block produced a direction; check optimality below
                        (0.0, 0.0, 0.0, 0.0)
                    } else {
                        let h_inv_k = h(inv_k)?;
                        let (beta, h_acc) = armijo_core(delta, config.sigma, k, h)?;
                        (beta, h_acc, delta, h_inv_k)
                    }
                }
                LineSearchKind::Optimal => {
                    let a_qd: f64 = alpha.iter().zip(&qd).map(|(x, y)| x * y).sum();
                    let p_d: f64 = d.iter().map(|v| -v).sum();
                    let lin = collective.allreduce(rank, a_qd + p_d, ReduceOp::Sum)?;
                    let quad = collective.allreduce(rank, d_qd, ReduceOp::Sum)?;
                    let (lo_local, hi_local) = feasible_interval(&alpha, &d, &lower, &upper);
                    let eta_hi = collective.allreduce(rank, hi_local, ReduceOp::Min)?;
                    let eta_lo = collective.allreduce(rank, lo_local, ReduceOp::Max)?;
                    if lin == 0.0 && quad == 0.0 {
                        (0.0, 0.0, 0.0, 0.0)
                    } else {
                        let beta = optimal_core(lin, quad, eta_lo, eta_hi)?;
                        let h_inv_k = inv_k * lin + 0.5 * inv_k * inv_k * quad;
                        (beta, beta * lin + 0.5 * beta * beta * quad, lin, h_inv_k)
                    }
                }
            };

            // apply the step; clamp away one-ulp box spill
            if beta != 0.0 {
                for i in 0..m {
                    alpha[i] = (alpha[i] + beta * d[i]).clamp(lower[i], upper[i]);
                    q_alpha[i] += beta * qd[i];
                }
            }
            objective += h_acc;
            if !objective.is_finite() {
                return Err(Error::NonFiniteObjective { iter: t + 1 });
            }
            last_d = d;

            // objective drift against direct reassembly from the parts
            let local_parts: f64 = (0..m)
                .map(|i| 0.5 * alpha[i] * q_alpha[i] + g_value(loss, alpha[i]))
                .sum();
            let parts = collective.allreduce(rank, local_parts, ReduceOp::Sum)?;
            worst_obj_drift = worst_obj_drift.max((parts - objective).abs());

            // optimality residual
            let local_residual = (0..m)
                .map(|i| {
                    one_var_min(
                        loss,
                        block_diag[i],
                        q_alpha[i],
                        alpha[i],
                        lower[i],
                        upper[i],
                    )
                    .map(f64::abs)
                })
                .try_fold(0.0f64, |acc, r| r.map(|v| acc.max(v)))?;
            let residual = collective.allreduce(rank, local_residual, ReduceOp::Max)?;

            // optional maintained-state audit
            let drift = match config.qalpha_check_every {
                Some(every) if every > 0 && (t + 1) % every == 0 => {
                    let v = limiter.run(|| compute_q_times_d(dataset, spec, &cache, block, &alpha));
                    let fresh = collective.reduce_scatter(rank, &v, &partition)?;
                    let local = fresh
                        .iter()
                        .zip(&q_alpha)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0f64, f64::max);
                    Some(collective.allreduce(rank, local, ReduceOp::Max)?)
                }
                _ => None,
            };

            // per-block inner-update counts, one scalar round per block
            let mut per_block = Vec::with_capacity(k);
            for r in 0..k {
                let mine = if r == rank {
                    result.inner_updates as f64
                } else {
                    0.0
                };
                per_block.push(collective.allreduce(rank, mine, ReduceOp::Sum)? as u64);
            }

            if rank == 0 {
                trace_rows
                    .lock()
                    .expect("trace lock poisoned")
                    .push(IterRecord {
                        iter: t + 1,
                        time_s: start.elapsed().as_secs_f64(),
                        objective,
                        residual_inf: residual,
                        beta,
                        bytes_comm: collective.reduce_scatter_bytes(),
                        inner_updates: per_block.iter().sum(),
                        inner_updates_per_block: per_block,
                        qalpha_drift: drift,
                        grad_dot_d: slope,
                        delta_obj_inv_k: h_inv_k,
                    });
            }

            if residual <= config.outer_tol {
                converged = true;
                break;
            }
            if beta == 0.0 {
                // the inner solvers found no direction but the residual is
                // still above tolerance: the budget/tolerance pairing is too
                // weak to make progress
                return Err(Error::InvalidArgument(format!(
                    "inner solver produced d = 0 at iteration {} with residual {residual:e} \
                     still above outer_tol {:e}; increase the inner budget or lower inner_tol",
                    t + 1,
                    config.outer_tol
                )));
            }
        }

        if rank == 0 {
            let mut stats = run_stats.lock().expect("stats lock poisoned");
            stats.0 = converged;
            stats.1 = worst_obj_drift;
        }
        Ok(WorkerOutput {
            rank,
            alpha,
            last_d,
        })
    };

    let outputs: Vec<Result<WorkerOutput>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..k)
            .map(|rank| {
                let worker = &worker;
                s.spawn(move || worker(rank))
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(rank, h)| h.join().unwrap_or(Err(Error::WorkerPanicked { rank })))
            .collect()
    });

    let mut slices = Vec::with_capacity(k);
    for out in outputs {
        slices.push(out?);
    }
    slices.sort_by_key(|w| w.rank);

    // assemble the global iterate and the last direction
    let mut alpha = vec![0.0; n];
    let mut last_d = vec![0.0; n];
    for w in &slices {
        for (pos, &i) in partition.block(w.rank).iter().enumerate() {
            alpha[i] = w.alpha[pos];
            last_d[i] = w.last_d[pos];
        }
    }

    let iterations = trace_rows.into_inner().expect("trace lock poisoned");
    let (converged, objective_drift) = run_stats.into_inner().expect("stats lock poisoned");
    let beta_last = iterations.last().map_or(0.0, |r| r.beta);
    let trace = TrainTrace {
        converged,
        initial_objective,
        reduce_scatter_bytes: collective.reduce_scatter_bytes(),
        scalar_bytes: collective.scalar_bytes(),
        wall_seconds: start.elapsed().as_secs_f64(),
        objective_drift,
        zero_time: config.zero_trace_time,
        iterations,
    };

    let model = build_model(config, dataset, &partition, &alpha, &last_d, beta_last);
    Ok((model, trace))
}

/// Packs the final iterate into a self-contained model. The per-block
/// modification vectors are `(d)_<S_r> - beta*d`, so that
/// `alpha_final + direction_r` equals the pre-step local solution
/// `alpha_t + (d_t)_<S_r>` exactly.
fn build_model(
    config: &TrainConfig,
    dataset: &Dataset,
    partition: &Partition,
    alpha: &[f64],
    last_d: &[f64],
    beta_last: f64,
) -> Model {
    let n = dataset.n();
    let mut support_indices = Vec::new();
    let mut sv_alpha = Vec::new();
    let mut sv_labels = Vec::new();
    let mut sv_features = Vec::new();
    let mut is_sv = vec![false; n];
    for i in 0..n {
        if alpha[i] > 0.0 {
            is_sv[i] = true;
            support_indices.push(i as u64);
            sv_alpha.push(alpha[i]);
            sv_labels.push(dataset.label(i));
            sv_features.push(dataset.sample(i).clone());
        }
    }

    let centers = partition.centers().map(<[Vec<f64>]>::to_vec);
    let (local_directions, direction_samples) = if centers.is_some() {
        let k = partition.k();
        let mut directions: Vec<Vec<(u64, f64)>> = vec![Vec::new(); k];
        let mut extra = Vec::new();
        let mut referenced = vec![false; n];
        for i in 0..n {
            if last_d[i] == 0.0 {
                continue;
            }
            let home = partition.assignment()[i];
            for (r, dir) in directions.iter_mut().enumerate() {
                let value = if r == home {
                    last_d[i] * (1.0 - beta_last)
                } else {
                    -beta_last * last_d[i]
                };
                if value != 0.0 {
                    dir.push((i as u64, value));
                }
            }
            referenced[i] = true;
        }
        for i in 0..n {
            if referenced[i] && !is_sv[i] {
                extra.push(DirectionSample {
                    index: i as u64,
                    label: dataset.label(i),
                    features: dataset.sample(i).clone(),
                });
            }
        }
        (Some(directions), extra)
    } else {
        (None, Vec::new())
    };

    Model {
        loss: config.loss.kind,
        c: config.loss.c,
        kernel: config.kernel,
        support_indices,
        alpha: sv_alpha,
        sv_labels,
        sv_features,
        centers,
        local_directions,
        direction_samples,
    }
}
