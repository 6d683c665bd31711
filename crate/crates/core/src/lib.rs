//! Bidirectional cross-modal 3D volume synthesis with pattern-aware dual-modal
//! diffusion, tissue refinement and tri-planar microstructure refinement.

pub mod cli;
pub mod error;
pub mod net;
pub mod manifest;
pub mod metrics;
pub mod pdm;
pub mod refine;
pub mod schedule;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
