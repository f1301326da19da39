//! Source-aware influence functions for programmatic weak supervision.
//!
//! The pipeline: labeling-function votes ([`wsdata`]) feed a label model
//! ([`labelmodel`]) whose probabilistic labels train a softmax end model
//! ([`endmodel`]). [`influence`] scores every (point, LF, class) loss term
//! against a holdout loss and [`apps`] turns scores into diagnostics and
//! pruning decisions.

pub mod apps;
pub mod endmodel;
pub mod error;
pub mod influence;
pub mod labelmodel;
pub mod wsdata;

pub use error::{Error, Result};
