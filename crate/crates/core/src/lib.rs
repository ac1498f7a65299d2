pub mod corpus;
pub mod diffmath;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod objective;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
