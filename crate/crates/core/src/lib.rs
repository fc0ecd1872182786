//! Lightweight selective-scan vision backbones at desk scale.
//!
//! Selective state-space scans, the atrous skip scan over 2-D feature
//! maps, EVSS and inverted-residual blocks, the T/S/B model variants and
//! the oracles used to check all of them.

pub mod blocks;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod params;
pub mod profile;
pub mod report;
pub mod scan;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{ElementwiseKind, Gradients, Graph, Var};
pub use tensor::{Precision, Tensor};
pub use model::{Model, ModelSpec};
pub use params::ParamStore;
