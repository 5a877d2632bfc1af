//! Toolkit for teaching generators to meet explicit output-length
//! requirements.
//!
//! - [`metrics`]: the length measures (characters, letters, speech seconds,
//!   printed centimeters, and held-out word count).
//! - [`objectives`]: length reward and the SFT, DPO, odds-ratio/ORPO and
//!   KL-penalized PPO objectives, each with analytic gradients.
//! - [`dataset`]: corpus ingestion, prompt augmentation, preference pairs.
//! - [`toy`]: a tabular length-conditioned policy and its trainers.
//! - [`evaluation`]: deviation statistics, comparisons, CSV/JSON/SVG export.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod metrics;
pub mod objectives;
pub mod toy;

pub use error::{Error, Result};
