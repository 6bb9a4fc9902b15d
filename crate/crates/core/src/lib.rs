//! Desk-scale streaming video generation pipeline.
//!
//! The crate turns a bidirectional flow-matching "teacher" into a chunk-wise
//! autoregressive "student" in four stages:
//!
//! 1. [`pipeline::train_teacher`] — flow-matching training of a small DiT on
//!    procedurally rendered moving-shape clips ([`synthvid`]).
//! 2. [`pipeline::run_distill`] — distribution-matching distillation into a
//!    few-step generator ([`distill`]).
//! 3. [`pipeline::run_ode_init`] — causal-student initialization by
//!    regression onto teacher ODE trajectories ([`arinit`]).
//! 4. [`pipeline::run_reward_finetune`] — reward-guided fine-tuning with
//!    chunk-wise self-rollout ([`reward`]).
//!
//! Everything runs on [`diffcore`], a reverse-mode autodiff tape over dense
//! row-major tensors, in either f32 or f64. [`evalkit`] scores generated
//! clips on analytic quality/semantic dimensions and measures streaming
//! throughput against an uncached baseline.

pub mod arinit;
pub mod checkpoint;
pub mod config;
pub mod diffcore;
pub mod distill;
pub mod evalkit;
pub mod flowmatch;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod reward;
pub mod rollout;
pub mod synthvid;
pub mod threads;

/// Crate-wide error type. Variants map onto the CLI's exit codes:
/// `Config` → 2, `Precondition` → 3, `Numerical` → 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },
    #[error("non-finite values in input to {op}")]
    NonFinite { op: &'static str },
    #[error("config error: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            msg: msg.into(),
        }
    }
}

/// Stable per-purpose seed derivation: FNV-1a over the tag and index, mixed
/// with the master seed. Keeps independent rng streams for prompts, noise,
/// and stages reproducible and uncorrelated.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64 ^ master;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    for b in index.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}
