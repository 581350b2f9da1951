pub mod dataset;
pub mod error;
pub mod events;
pub mod eventnet;
pub mod modality;
pub mod nn;
pub mod reid;
pub mod split;
pub mod synth;
pub mod temporal;
pub mod train;
pub mod voxel;

pub use error::{CmtcError, Result};
