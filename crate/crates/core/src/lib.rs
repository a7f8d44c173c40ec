//! Two-stage disease classification from 3D volumes: an ensemble of
//! patch-local grading regressors is fused into an interpretable voxel
//! grading map, aggregated per anatomical structure, and classified by a
//! graph convolutional network. A synthetic phantom generator makes the whole
//! pipeline trainable and verifiable at desk scale.

pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod error;
pub mod features;
pub mod gcn;
pub mod grader;
pub mod graph;
pub mod metrics;
pub mod ensemble;
pub mod nifti;
pub mod optim;
pub mod patch;
pub mod phantom;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod stats;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
