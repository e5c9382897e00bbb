//! Causal/non-causal attention-head disentanglement for a tiny vision
//! transformer, with source-free target adaptation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`optim`], [`params`], [`checkpoint`]: numerics
//!   and persistence.
//! * [`vit`]: the transformer with class and style tokens and per-head
//!   parameter groups.
//! * [`domains`] and [`stylization`]: the synthetic shape/texture benchmark,
//!   patch shuffling, and style augmentations.
//! * [`head_selection`]: convex branch weights and the causal influence score.
//! * [`training`]: vendor-side alternating training and client-side adaptation.
//! * [`metrics`]: accuracy, A-distance, and feature-gap diagnostics.
//! * [`config`] and [`pipeline`]: run configuration and persisted stages.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod domains;
pub mod error;
pub mod head_selection;
pub mod metrics;
mod noise;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod stylization;
pub mod tensor;
pub mod training;
pub mod vit;

pub use error::{Error, Result};
