//! Time-agnostic frame prediction on synthetic grid worlds.
//!
//! Conventional frame predictors are trained to reproduce the frame at a
//! fixed time offset. The predictors in this crate are instead penalized
//! against the *best-matching* frame in a whole window of target times, so
//! they converge to low-uncertainty "bottleneck" states (a grasp, a doorway
//! crossing, one object moved and the other still in place) no matter when
//! those states occur.
//!
//! The crate is organized around that training objective:
//!
//! - [`autodiff`] — a small dense-tensor reverse-mode engine (f64, single
//!   thread per tape) with just enough ops for conv encoder/decoders,
//!   bilinear warping, and the losses below.
//! - [`models`] — the predictor (encoder + new-pixel / flow / mask decoders
//!   with convex compositing), the per-time discriminator banks, and the
//!   whole-video inference network for the variational variant.
//! - [`taploss`] — fixed-time, minimum-over-time, and generalized-minimum
//!   losses with time preferences, recursive target updates, label-smoothed
//!   per-time adversarial terms, and the combined objective.
//! - [`synthworlds`] — seeded generators for the grid worlds (pick, push,
//!   maze) with ground-truth positions and bottleneck annotations, plus the
//!   binary dataset format.
//! - [`metrics`] — min-l1 / match-step evaluation, best-of-N sampling
//!   evaluation, warped-location subgoal extraction, and the bottleneck
//!   discovery frequency curve.
//! - [`planner`] — cross-entropy-method MPC on push-world dynamics, with
//!   optional subgoal handoff halfway through the step budget.
//! - [`cli`] — the `tap` binary's command implementations (dataset
//!   generation, training, evaluation, planning, recursive prediction).
//!
//! Everything is deterministic given a seed: datasets, checkpoints, and CSV
//! reports are byte-identical across runs with equal arguments.

pub mod autodiff;
pub mod cli;
pub mod metrics;
pub mod models;
pub mod planner;
pub mod synthworlds;
pub mod taploss;

mod error;

pub use error::{Error, Result};
