// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spatiotemporal ID toolkit.
//!
//! Extracts spatial and temporal IDs from layerwise activations of
//! vision-language models, intervenes on them (mirror swapping, ID steering),
//! attributes failures, and fits low-rank maps from positional encodings to
//! IDs. A built-in toy model with known weights makes every step checkable.

pub mod diagnosis;
pub mod error;
pub mod ids;
pub mod intervention;
pub mod model;
pub mod pipeline;
pub mod posenc;
pub mod report;
pub mod toy;
pub mod trace;
pub mod vector;

pub use error::{Result, StidError};
pub use model::Resume;
