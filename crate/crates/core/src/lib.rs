pub mod adversarial;
pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod degrade;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod external;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod train;
pub mod verifier;
pub mod wav;

pub use error::{Error, Result};
