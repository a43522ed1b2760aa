//! Latent action control for a toy compositional scene generator.
//!
//! A small causal transformer rolls out a role-structured sequence of
//! continuous latent actions (plan, draft, diagnosis, refine), writes them
//! back into its hidden stream, and hands the resulting hidden states to a
//! conditional flow-matching generator. Training runs in three phases:
//! correction warm-up and generation-coupled variational alignment against a
//! teacher-induced Gaussian prior ([`sft`]), followed by latent-flow group
//! relative policy optimization against a programmatic reward ([`lfgrpo`]).

pub mod backbone;
pub mod error;
pub mod flowgen;
pub mod harness;
pub mod inference;
pub mod lfgrpo;
pub mod latentpolicy;
pub mod model;
pub mod numerics;
pub mod priors;
pub mod role;
pub mod sft;
pub mod toyscene;

pub use error::{Error, Result};
