//! Parallel block minimization for kernel machines.
//!
//! Trains kernel SVM (hinge loss) and kernel logistic regression by splitting
//! the dual variables into `k` blocks, solving a block-diagonal quadratic
//! approximation of the dual in parallel with coordinate descent, exchanging
//! the `Q d` product through a Reduce-Scatter collective, and taking a
//! line-search step that guarantees sufficient decrease.
//!
//! The crate is organized around the stages of that loop:
//!
//! - [`data`]: LIBSVM-format parsing and sparse sample storage
//! - [`kernel`]: kernel evaluation, `Q` entries/columns, LRU column cache
//! - [`partition`]: random or kmeans variable partitioning
//! - [`loss`]: the dual loss terms `g_i` and their one-variable minimizers
//! - [`local_solver`]: per-block coordinate-descent subproblem solvers
//! - [`comm`]: the in-process collective (Reduce-Scatter, scalar all-reduce)
//! - [`train`]: the outer loop, line searches, and convergence tracking
//! - [`predict`]: global and cluster-local prediction
//! - [`oracle`]: slow, independent reference solvers used by tests and `bench`
//!
//! A narrative guide with runnable examples lives in `book/`; its code
//! blocks are compiled as doc-tests (see `cargo test --doc`).

pub mod book;
pub mod cli;
pub mod comm;
pub mod data;
pub mod kernel;
pub mod local_solver;
pub mod loss;
pub mod oracle;
pub mod partition;
pub mod predict;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {n} samples")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("partition has no centers; it was not built by kmeans")]
    MissingCenters,

    #[error("model has no centers/local directions; train with kmeans partitioning")]
    MissingLocalModel,

    #[error(transparent)]
    Comm(#[from] comm::CommError),

    #[error("direction is not a descent direction (gradient·d = {0:e})")]
    NonDescent(f64),

    #[error("line search underflow: no step above 2^-60 satisfies the acceptance conditions")]
    LineSearchUnderflow,

    #[error("objective became non-finite at outer iteration {iter}")]
    NonFiniteObjective { iter: u64 },

    #[error("worker {rank} panicked")]
    WorkerPanicked { rank: usize },

    #[error("reference solver did not converge within {0} iterations")]
    OracleDiverged(u64),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
