pub mod error;
pub mod app;
pub mod autodiff;
pub mod diagnostics;
pub mod exec;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pit;
pub mod train;

pub use error::{Error, Result};
