//! Class-specific explainability maps for Vision Transformer classifiers.
//!
//! The pipeline has two stages. [`rout`] perturbs the input image with one
//! activation map per embedding channel of the final patch tokens and weights
//! each channel by how well the classifier output on the perturbed image
//! matches the target. [`cut`] builds a thresholded cosine-affinity graph over
//! the weighted tokens, solves the normalized-cut eigenproblem and keeps the
//! foreground side of the second eigenvector as the explanation.
//!
//! [`eval`] implements the point game, box IoU and perturbation-curve metrics
//! together with attention baselines; [`backend`] abstracts the classifier so
//! the same code runs against the built-in [`vit`] or an external process.

pub mod backend;
pub mod cut;
pub mod error;
pub mod eval;
pub mod image;
pub mod numerics;
pub mod parallel;
pub mod pipeline;
pub mod rout;
pub mod selftest;
pub mod tensor_file;
pub mod types;
pub mod vit;

pub use crate::error::{Error, Result};
pub use crate::image::{load_image, Image, Overlay};
pub use crate::tensor_file::{TensorEntry, TensorFile};
pub use crate::types::{GridMap, Heatmap, ProbVector, TokenMatrix};
