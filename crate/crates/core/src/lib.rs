//! Language-guided counterfactual stress testing for image classifiers.
//!
//! The crate is organised around the stages of the generation pipeline:
//! captions are produced for each test image, perturbed along typed axes by
//! a language model, screened by semantic gates, and turned into edited
//! images by a diffusion backend (DDIM inversion + null-text optimisation +
//! attention-controlled editing). Evaluation and insight modules then measure
//! how a classifier reacts to the generated suite.
//!
//! Every external model is reached through a trait in [`backends`]; seeded
//! stubs make the whole pipeline runnable and testable without any ML runtime.

pub mod backends;
pub mod captioning;
pub mod diffusion;
pub mod edit;
mod error;
pub mod evaluation;
pub mod fixtures;
pub mod gates;
pub mod insights;
pub mod model;
pub mod perturbation;
pub mod pipeline;
pub mod review;
pub mod text;
mod vecops;

pub use error::{Error, Result};
