pub mod cli;
pub mod costmodel;
pub mod derive;
pub mod error;
pub mod json;
pub mod layers;
pub mod numerics;
pub mod paramap;
pub mod rng;
pub mod searchloop;
pub mod searchspace;
pub mod supernet;
pub mod toytask;

pub use error::{Error, Result};
