//! Nested autoregressive generation of continuous token sequences.
//!
//! A sequence of `n = k^M` tokens is produced by `M` scaled modules. Module `m`
//! emits patches of `k^(m-1)` tokens, each patch drawn by integrating a learned
//! flow-matching velocity field from noise at `t = 1` down to data at `t = 0`,
//! conditioned on every token generated so far. Generating the full sequence
//! costs `(k-1)·M + 1` patch solves instead of `n` token solves.
//!
//! Module map:
//!
//! * [`schedule`]: patch index algebra, token orderings, evaluation counts.
//! * [`velocity`]: the per-module MLP velocity field with analytic gradients.
//! * [`objective`]: flow-matching, coordination and combined losses.
//! * [`trainer`]: teacher-forced batches, pretraining and joint finetuning.
//! * [`sampler`]: nested generation, vanilla token-by-token baseline, Euler solver.
//! * [`data`]: synthetic quadtree / gaussian datasets and their binary format.
//! * [`metrics`]: MMD, mode coverage and complexity tables.
//! * [`persistence`]: checkpoints and run configuration.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod codec;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod persistence;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;
pub mod velocity;

pub use error::{Error, Result};
pub use schedule::{Ordering, PatchId, ScheduleSpec};
pub use velocity::{ArchSpec, VelocityInput, VelocityParams};
