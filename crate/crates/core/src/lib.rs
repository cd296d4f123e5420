//! Concatenation-augmented U-Net (CAT-U-Net) for reconstruction-based
//! anomaly diagnosis.
//!
//! The network is trained to reconstruct images of a single class. At
//! inference, samples it reconstructs well (low MSE) are labelled
//! positive, and the per-pixel squared error, binarized, serves as a
//! segmentation mask.
//!
//! The crate carries its own small tensor and reverse-mode autodiff core
//! ([`autodiff`]) rather than depending on a deep-learning framework.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diagnosis;
pub mod error;
pub mod evaluation;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;

pub use data::{Dataset, ImageSample, SynthConfig};
pub use diagnosis::{DiagnosisResult, Label, ThresholdConfig};
pub use error::{Error, Result};
pub use evaluation::Evaluation;
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use model::{CatUNetConfig, CatUNetModel};
pub use rng::{Rng, Stream};
pub use tensor::Tensor;
pub use training::{TrainReport, TrainingConfig};
