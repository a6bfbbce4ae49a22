pub mod corpus;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod synthworld;
pub mod text;
pub mod trainer;
pub mod verify;
pub mod vocab;

pub use error::{Error, Result};
pub use exec::Exec;
