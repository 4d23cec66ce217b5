//! Perturbation-based relevance maps for multi-sequence MRI volumes.
//!
//! The core is generic over the voxel scalar (`f32` or `f64`); the aliases
//! below pin the common `f32` case.

pub mod classifier;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod perturbation;
pub mod phantom;
pub mod relevance;
pub mod render;
pub mod scalar;
pub mod superpixel;
pub mod volume;

pub use classifier::{ClassifierScore, CountingOracle, Oracle, OracleError, RemoteOracle, SyntheticOracle};
pub use error::{Error, Result};
pub use perturbation::{PerturbationMethod, PerturbationOutcome, SearchBudget};
pub use relevance::{compute_relevance, MethodFamily, RelevanceMap};
pub use scalar::Scalar;
pub use superpixel::{slic3d, SlicParams, SuperpixelLabelMap};
pub use volume::{BinaryMask, Dims, MultiSequenceVolume, ScalarVolume, SequenceKind};

pub type Volume = ScalarVolume<f32>;
pub type MultiVolume = MultiSequenceVolume<f32>;
pub type Volume64 = ScalarVolume<f64>;
pub type MultiVolume64 = MultiSequenceVolume<f64>;
