//! Adaptive-and-balanced re-initialization for continually adapting models.
//!
//! An online learner adapts to an unlabeled, drifting stream. After every
//! adapted batch the predictions of the current and previous parameter
//! snapshots are compared; the confidence-weighted label-flip score is smoothed
//! with an exponential moving average and its running minimum is tracked.
//! When the smoothed trajectory rises away from that minimum faster than a
//! duration-scaled threshold, the model is pulled back towards the frozen
//! source weights ("shrink-restore") by an amount set by the flip level.
//!
//! Modules:
//!
//! - [`signal`]: label-flip score, EMA smoothing and running minimum.
//! - [`policy`]: slope trigger, restore coefficient, weight blending and the
//!   baseline reset policies.
//! - [`learner`]: linear softmax classifier with source pretraining and two
//!   unsupervised adaptation losses.
//! - [`stream`]: seeded drifting-domain data streams.
//! - [`harness`]: experiment runner, logs and policy comparison.
//! - [`cli`]: the `abr` command-line front end.

pub mod cli;
pub mod error;
pub mod harness;
pub mod learner;
pub mod policy;
pub mod signal;
pub mod stream;

pub use error::{Error, Result};
