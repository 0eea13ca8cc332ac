pub mod api;
pub mod bench;
pub mod checkpoint;
pub mod components;
pub mod decomp;
pub mod dycore;
pub mod engine;
pub mod error;
pub mod fft;
pub mod io;
pub mod krylov;
pub mod options;
pub mod precision;
pub mod registry;
pub mod simulation;
pub mod solver;
pub mod state;

pub use error::{Error, ErrorCategory, Result};
pub use precision::{Precision, Real};
