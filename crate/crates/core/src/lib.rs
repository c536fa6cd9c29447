//! Helical cone-beam CT reconstruction by turn-split invertible learned
//! primal-dual networks, with the data simulation pipeline, analytic and
//! variational baselines, and evaluation metrics.

pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod projector;
pub mod real;
pub mod recon;
pub mod simulation;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{DetectorSpec, HelicalGeometry, TurnPartition, VolumeSpec};
pub use real::Real;
pub use volume::{Sinogram, Volume};
