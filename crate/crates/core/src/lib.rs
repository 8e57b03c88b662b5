//! Sharp bounds on distributional and quantile treatment effects for the
//! treated, computed from regularized semi-infinite linear programs.

pub mod bounds;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod floats;
pub mod inference;
pub mod numeric;
pub mod silp;
pub mod sim;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
