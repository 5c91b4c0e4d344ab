//! Generalized zero-shot classification with hyperspherical latent alignment.
//!
//! Two small VAEs with von Mises-Fisher posteriors embed visual features and
//! class attributes on a shared unit hypersphere. Training aligns the two
//! posteriors class-wise with an entropic-regularized transport distance.
//! After training, each seen class gets a cosine boundary around its
//! attribute-side center; test features falling inside any boundary are
//! routed to a seen-class expert, everything else to an unseen-class expert.
//! Evaluation covers both the seen/unseen decision itself (ROC) and the
//! resulting generalized zero-shot accuracies.

pub mod boundary;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experts;
pub mod metrics;
pub mod networks;
pub mod sinkhorn;
pub mod training;
pub mod vmf;

pub use config::{SinkhornConfig, TrainConfig};
pub use error::{DataError, Error, Result};

pub use boundary::{BoundarySet, ClassBoundary, OodDecision};
pub use data::DatasetBundle;
pub use metrics::{GzslScores, RocCurve};
pub use networks::ModelParams;
pub use training::LossBreakdown;
pub use vmf::{LatentBatch, UnitVector, VmfParams};
