//! Region-based detection of extremely small objects in 3D multi-channel
//! volumes, trained against soft labels from a panel of raters.
//!
//! The crate covers the whole chain: synthetic phantom generation
//! ([`phantom`]), distance and sampling fields ([`fields`], [`sampler`]), a
//! small tensor engine with reverse-mode gradients ([`nn`]), the
//! backbone / proposal / refinement networks ([`model`]), staged training and
//! full-volume inference ([`pipeline`]) and the evaluation protocol
//! ([`eval`]). The `eso` binary wraps all of it behind four subcommands.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fields;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod sampler;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    box_intersection_volume, overlap_ratios, soft_label_from_votes, Cuboid, Detection, EsoClass,
    EsoObject, Proposal, SoftLabel, Volume,
};
