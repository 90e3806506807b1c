// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small attention-only vision-language model with engineered weights.
//!
//! Patches are embedded as content plus an injected positional basis; object
//! words attend to their object's patch and so pick up a linear image of its
//! position, which a later block compares between subject and reference.

mod config;
mod corpus;
mod forward;
mod scene;
mod weights;

pub use config::{PosAxis, PositionalBasis, ToyConfig, ANSWER_WORDS, DEFAULT_OBJECTS};
pub use corpus::{cell_sweep, frame_sweep, mask_patch, random_mask_cells, random_pair, run_all};
pub use forward::{attention_pattern, block_attention, block_forward};
pub use scene::{render_scene, Placement, Query, QueryKind, RenderedScene, SceneSpec, TEMPLATE_WORDS};
pub use weights::{
    init_model, positional_features, BlockKind, BlockWeights, HeadWeights, Layout, ToyWeights,
};
