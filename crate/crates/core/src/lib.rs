pub mod error;
pub mod fusion;
pub mod geom;
pub mod io;
pub mod kpfcn;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod registration;
pub mod sfcn;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
