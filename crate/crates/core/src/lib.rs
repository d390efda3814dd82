//! Auto-clustering output layer (ACOL) networks trained with graph-based
//! activity regularization (GAR).
//!
//! Given only coarse parent labels, a network whose output layer carries
//! `k` softmax duplicates per parent learns to split every parent into `k`
//! sub-classes. The crate covers the dense network and its hand-derived
//! gradients, the GAR terms, evaluation by clustering accuracy, a k-means
//! baseline, IDX ingestion and an experiment runner.

pub mod acol;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gar;
pub mod network;
pub mod numeric;
pub mod rng;

pub use acol::{AcolHead, AnnotationAssignment, HeadConfig};
pub use error::{Error, Result};
pub use gar::{ActivityMatrix, GarCoefficients};
pub use network::{Model, TrainConfig, TrainReport};
pub use numeric::Matrix;
