//! In-process collective communication among `k` barrier-synchronized workers.
//!
//! Workers share no mutable state except through a [`Collective`]. Each round
//! is a rendezvous: every worker deposits exactly once, the last arrival
//! combines the deposits in ascending worker order (so results are
//! bit-reproducible under any scheduling), and everyone picks up the result.
//!
//! Byte accounting follows the `log(k)*T_initial + n*T_byte` cost model of a
//! Reduce-Scatter: the `n`-proportional payload term is metered exactly
//! (8 bytes per element per round); line-search scalars are metered on a
//! separate counter; the startup term is modeled, not measured.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::partition::Partition;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommError {
    #[error("collective timed out after {0:?}; a worker failed to arrive")]
    Timeout(Duration),

    #[error("contribution length {got} does not match {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("workers disagree on the collective operation")]
    OpMismatch,

    #[error("worker {rank} entered the same round twice")]
    DoubleEntry { rank: usize },

    #[error("worker rank {rank} out of range for {k} workers")]
    InvalidRank { rank: usize, k: usize },

    #[error("collective is poisoned by an earlier failure")]
    Poisoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Min,
    Max,
}

impl ReduceOp {
    fn fold(self, acc: f64, v: f64) -> f64 {
        match self {
            ReduceOp::Sum => acc + v,
            ReduceOp::Min => acc.min(v),
            ReduceOp::Max => acc.max(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RoundKind {
    ReduceScatter { len: usize },
    AllReduce { op: ReduceOp },
}

#[derive(Debug, PartialEq, Eq)]
enum Phase {
    Collect,
    Distribute,
}

struct Round {
    phase: Phase,
    kind: Option<RoundKind>,
    deposits: Vec<Option<Vec<f64>>>,
    arrived: usize,
    departed: usize,
    result: Option<Arc<Vec<f64>>>,
    failed: Option<CommError>,
}

/// Rendezvous point for `k` workers; see the module docs.
pub struct Collective {
    k: usize,
    timeout: Duration,
    state: Mutex<Round>,
    cv: Condvar,
    rs_bytes: AtomicU64,
    rs_rounds: AtomicU64,
    scalar_bytes: AtomicU64,
}

impl Collective {
    /// Default rendezvous timeout. Generous because workers may legitimately
    /// spend a long time in local compute between collective calls.
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

    pub fn new(k: usize) -> Self {
        Self::with_timeout(k, Self::DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(k: usize, timeout: Duration) -> Self {
        assert!(k >= 1, "a collective needs at least one worker");
        Self {
            k,
            timeout,
            state: Mutex::new(Round {
                phase: Phase::Collect,
                kind: None,
                deposits: (0..k).map(|_| None).collect(),
                arrived: 0,
                departed: 0,
                result: None,
                failed: None,
            }),
            cv: Condvar::new(),
            rs_bytes: AtomicU64::new(0),
            rs_rounds: AtomicU64::new(0),
            scalar_bytes: AtomicU64::new(0),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Payload bytes moved by Reduce-Scatter rounds (`n * 8` per round).
    pub fn reduce_scatter_bytes(&self) -> u64 {
        self.rs_bytes.load(Ordering::SeqCst)
    }

    pub fn reduce_scatter_rounds(&self) -> u64 {
        self.rs_rounds.load(Ordering::SeqCst)
    }

    /// Bytes moved by scalar all-reduce rounds (8 per round).
    pub fn scalar_bytes(&self) -> u64 {
        self.scalar_bytes.load(Ordering::SeqCst)
    }

    /// The modeled startup term of the collective cost,
    /// `rounds * log2(k) * t_initial` (zero for a single worker).
    pub fn modeled_startup_cost(&self, t_initial: f64) -> f64 {
        let rounds = (self.reduce_scatter_rounds() + self.scalar_bytes() / 8) as f64;
        rounds * (self.k as f64).log2() * t_initial
    }

    /// Elementwise sum of all workers' `n`-vectors; worker `rank` receives
    /// the slice for its block of `partition`.
    pub fn reduce_scatter(
        &self,
        rank: usize,
        contribution: &[f64],
        partition: &Partition,
    ) -> Result<Vec<f64>, CommError> {
        let expected = partition.n();
        if contribution.len() != expected {
            return self.fail(CommError::LengthMismatch {
                expected,
                got: contribution.len(),
            });
        }
        let kind = RoundKind::ReduceScatter { len: expected };
        let total = self.round(rank, contribution.to_vec(), kind)?;
        Ok(partition.block(rank).iter().map(|&i| total[i]).collect())
    }

    /// Reduces one scalar per worker; every worker observes the same value.
    pub fn allreduce(&self, rank: usize, value: f64, op: ReduceOp) -> Result<f64, CommError> {
        let total = self.round(rank, vec![value], RoundKind::AllReduce { op })?;
        Ok(total[0])
    }

    fn fail<T>(&self, err: CommError) -> Result<T, CommError> {
        let mut round = self.state.lock().expect("collective lock poisoned");
        round.failed = Some(err.clone());
        self.cv.notify_all();
        Err(err)
    }

    fn round(
        &self,
        rank: usize,
        payload: Vec<f64>,
        kind: RoundKind,
    ) -> Result<Arc<Vec<f64>>, CommError> {
        if rank >= self.k {
            return self.fail(CommError::InvalidRank { rank, k: self.k });
        }

        let mut round = self.state.lock().expect("collective lock poisoned");

        // wait out the tail of the previous round
        while round.failed.is_none() && round.phase == Phase::Distribute {
            let (guard, timed_out) = self
                .cv
                .wait_timeout_while(round, self.timeout, |r| {
                    r.failed.is_none() && r.phase == Phase::Distribute
                })
                .expect("collective lock poisoned");
            round = guard;
            if timed_out.timed_out() && round.phase == Phase::Distribute {
                round.failed = Some(CommError::Timeout(self.timeout));
                self.cv.notify_all();
            }
        }
        if let Some(err) = &round.failed {
            return Err(err.clone());
        }

        // validate against the round's pinned kind
        match (&round.kind, &kind) {
            (None, _) => round.kind = Some(kind),
            (Some(a), b) if a == b => {}
            (Some(RoundKind::ReduceScatter { len }), RoundKind::ReduceScatter { .. }) => {
                let err = CommError::LengthMismatch {
                    expected: *len,
                    got: payload.len(),
                };
                round.failed = Some(err.clone());
                self.cv.notify_all();
                return Err(err);
            }
            _ => {
                round.failed = Some(CommError::OpMismatch);
                self.cv.notify_all();
                return Err(CommError::OpMismatch);
            }
        }
        if round.deposits[rank].is_some() {
            let err = CommError::DoubleEntry { rank };
            round.failed = Some(err.clone());
            self.cv.notify_all();
            return Err(err);
        }

        round.deposits[rank] = Some(payload);
        round.arrived += 1;

        if round.arrived == self.k {
            // last arrival combines deposits in ascending worker order
            let mut total = round.deposits[0]
                .take()
                .expect("worker 0 deposited this round");
            if let Some(RoundKind::AllReduce { op }) = round.kind {
                for r in 1..self.k {
                    let dep = round.deposits[r].take().expect("all workers deposited");
                    total[0] = op.fold(total[0], dep[0]);
                }
            } else {
                for r in 1..self.k {
                    let dep = round.deposits[r].take().expect("all workers deposited");
                    for (t, v) in total.iter_mut().zip(dep) {
                        *t += v;
                    }
                }
            }
            // meter once per round, on the combiner
            match round.kind {
                Some(RoundKind::ReduceScatter { len }) => {
                    self.rs_bytes.fetch_add(8 * len as u64, Ordering::SeqCst);
                    self.rs_rounds.fetch_add(1, Ordering::SeqCst);
                }
                Some(RoundKind::AllReduce { .. }) => {
                    self.scalar_bytes.fetch_add(8, Ordering::SeqCst);
                }
                None => unreachable!("round kind pinned by first arrival"),
            }
            round.result = Some(Arc::new(total));
            round.phase = Phase::Distribute;
            self.cv.notify_all();
        } else {
            // wait for the round to complete
            while round.failed.is_none() && round.phase != Phase::Distribute {
                let (guard, timed_out) = self
                    .cv
                    .wait_timeout_while(round, self.timeout, |r| {
                        r.failed.is_none() && r.phase != Phase::Distribute
                    })
                    .expect("collective lock poisoned");
                round = guard;
                if timed_out.timed_out() && round.phase != Phase::Distribute {
                    round.failed = Some(CommError::Timeout(self.timeout));
                    self.cv.notify_all();
                }
            }
            if let Some(err) = &round.failed {
                return Err(err.clone());
            }
        }

        let result = Arc::clone(
            round
                .result
                .as_ref()
                .expect("distribute phase has a result"),
        );
        round.departed += 1;
        if round.departed == self.k {
            // last to leave resets the round for reuse
            round.phase = Phase::Collect;
            round.kind = None;
            round.arrived = 0;
            round.departed = 0;
            round.result = None;
            for d in &mut round.deposits {
                *d = None;
            }
            self.cv.notify_all();
        }
        Ok(result)
    }
}
