pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod synthesis;
pub mod trainer;

pub use error::{HinetError, Result};
