//! Diffusion-based referring action segmentation over paired holistic and
//! partial feature streams.

pub mod diffusion;
pub mod error;
pub mod fourier;
pub mod hpxlstm;
pub mod metrics;
pub mod netseg;
pub mod numkit;
pub mod seed;
pub mod sequence;
pub mod synthdata;

pub use error::{Error, Result};
pub use sequence::{FeatureSequence, LabelSequence};
