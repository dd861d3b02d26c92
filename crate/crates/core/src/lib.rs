pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod factors;
pub mod features;
pub mod gradcheck;
pub mod io;
pub mod learning;
pub mod liegroup;
pub mod odometry;
pub mod simworld;
pub mod solver;
pub mod trajectory;
pub mod window;

pub use error::{Error, ErrorKind, Result};
