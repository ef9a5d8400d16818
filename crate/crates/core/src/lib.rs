//! Partial domain adaptation laboratory.
//!
//! Synthetic multi-modal feature streams stand in for video backbones. On top
//! of them the crate builds a multi-modal adversarial network with multi-scale
//! temporal relation fusion, a k-means based class-weight calibration, and a
//! training harness that tracks how the class weight drifts relative to the
//! true target label distribution.
//!
//! Module map:
//!
//! - [`data`]: seeded domain-pair generator and the `PVDALAB1` dataset format
//! - [`nn`]: dense layers, ReLU, softmax cross-entropy, gradient reversal, SGD,
//!   finite-difference checking and the `PVDAPAR1` checkpoint format
//! - [`model`]: per-modality extractors, temporal relation fusion, classifier,
//!   per-modality discriminators and the weighted adversarial objective
//! - [`clustering`]: k-means++ seeding, Elkan and Lloyd iterations
//! - [`calibration`]: class weights, entropy and cluster-distance weighting
//! - [`trainer`]: training loop, evaluation, ablation suite

pub mod calibration;
pub mod clustering;
pub mod data;
pub mod model;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use calibration::{CalibrationConfig, ClassWeight};
pub use clustering::ClusterModel;
pub use data::{Dataset, DomainPairSpec, DomainTag, FeatureClip};
pub use model::{ArchConfig, ManParams};
pub use trainer::{TrainConfig, TrainReport, Variant};
