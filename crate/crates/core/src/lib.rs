//! Geo-conditioned inference-path selection for residual classifiers.
//!
//! A policy network fuses an encoded geographic location with image
//! features and emits one keep/skip decision per residual block of a
//! recognition network. The policy is trained with a self-critical policy
//! gradient under a reward that favours sparse, mutually distinct paths
//! that still classify correctly.

pub mod blocknet;
pub mod diffcore;
pub mod error;
pub mod geoenc;
pub mod policynet;
pub mod rewards;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
