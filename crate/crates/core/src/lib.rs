pub mod atomic_data;
pub mod bloch;
pub mod cli;
pub mod config;
pub mod constants;
pub mod doppler;
pub mod error;
pub mod fit;
pub mod io;
pub mod spectra;
pub mod sweep;
pub mod vapor;

pub use error::{Error, Result};
