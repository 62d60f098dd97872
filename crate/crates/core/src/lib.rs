//! Core of the wordsmith pipeline: natural-language commands in, joint-level
//! control policies for a planar articulated robot out.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod amp;
pub mod checkpoint;
pub mod motion;
pub mod nn;
pub mod par;
pub mod prompts;
pub mod retarget;
pub mod sim;
pub mod vqvae;
