//! Toolkit for locating functional subnetworks inside trained neural networks.
//!
//! The workflow: train a small network, freeze its weights, then train
//! probabilistic binary masks over the weights against a restricted target
//! task. Thresholding the mask logits yields the subnetwork responsible for
//! that task. Masks can be compared (IoU / IoMin), inverted, and combined to
//! measure how much functionality is shared between weights.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod element;
pub mod error;
pub mod graph;
pub mod mask;
pub mod metrics;
pub mod models;
pub mod objective;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tensor;

pub use element::Element;
pub use error::{Error, Result};
pub use tensor::Tensor;
