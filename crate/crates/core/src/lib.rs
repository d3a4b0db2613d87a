//! Grounded object referring toolkit.
//!
//! Candidate boxes ("hints") are given to a model, which reasons over each
//! of them inside a `<think>` block and answers with a JSON list of selected
//! boxes inside an `<answer>` block. This crate covers everything around that
//! contract:
//!
//! - [`geometry`]: boxes, IoU, exact matching and one-to-one matching.
//! - [`grammar`]: parsing, validating and emitting the tagged output format,
//!   plus prompt rendering.
//! - [`reward`]: exact-match F1 reward, binary format reward and their
//!   weighted sum.
//! - [`metrics`]: recall / precision / DF1 averaged over IoU thresholds and
//!   the rejection score.
//! - [`grpo`]: group-relative advantages, the clipped surrogate with a KL
//!   penalty, its analytic gradient and a training loop.
//! - [`toyenv`]: a synthetic referring environment with a linear
//!   include/exclude policy so the optimizer runs end to end.
//! - [`io`] and [`cli`]: JSONL file formats and the command-line surface.

pub mod cli;
pub mod error;
pub mod geometry;
pub mod grammar;
pub mod grpo;
pub mod io;
pub mod metrics;
pub mod reward;
pub mod rng;
pub mod toyenv;

pub use error::{Error, Result};
pub use geometry::{BBox, Matching};
pub use grammar::{Answer, BoxHint, CoTResponse, LabeledBox, ReferringTask, SubsetTag, ThinkTrace, Verdict};
pub use reward::{RewardBreakdown, RewardConfig};
