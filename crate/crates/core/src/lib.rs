//! Oriented normal estimation for unstructured point clouds.
//!
//! The crate provides the classical PCA + minimum-spanning-tree initializer,
//! a learned refinement network trained with a Chamfer-Normal-Distance
//! corrected loss, the CND/RMSE evaluation metrics, and a synthetic
//! benchmark generator with analytic ground-truth normals.

pub mod error;
pub mod geom;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod orient;
pub mod pipeline;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
pub use geom::{Patch, PointCloud, SpatialIndex};
pub use orient::{NormalSource, OrientedNormalField};
