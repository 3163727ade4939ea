//! Learned multi-slot ad auctions with externality-aware click prediction,
//! a learned affine-maximizer ranking rule and a differentiable sorting
//! relaxation for end-to-end revenue training.

pub mod auction;
pub mod autodiff;
pub mod baselines;
pub mod clpm;
pub mod error;
pub mod eval;
pub mod ldrm;
pub mod ldsm;
pub mod par;
pub mod synth;
pub mod train;

pub use error::{NmaError, Result};
