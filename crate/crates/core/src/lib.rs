pub mod arm;
pub mod config;
pub mod conic;
pub mod corridor;
pub mod error;
pub mod error_bounds;
pub mod geometry;
pub mod linalg;
pub mod mpc;
pub mod synthesis;
pub mod par;
pub mod sim;

pub use error::{Error, Result};
