//! Cross-modal retrieval of sheet-music and audio passages through a
//! shared embedding space learned by two recurrent-convolutional towers.

pub mod cca;
pub mod container;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod retrieval;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
