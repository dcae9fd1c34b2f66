pub mod dataio;
pub mod error;
pub mod experiments;
pub mod maf;
pub mod meta;
pub mod made;
pub mod numerics;
pub mod privacy;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
