//! Process exit codes and the error type that carries them.

use std::fmt::Display;

pub const CHECK_FAILED: u8 = 1;
pub const CONFIG: u8 = 2;
pub const GENERATION: u8 = 3;
pub const IO: u8 = 4;
pub const TRAINING: u8 = 5;
pub const REGISTRATION: u8 = 6;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

/// Tags an error with the exit code of the phase it occurred in.
pub trait At<T> {
    fn at(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Display> At<T> for Result<T, E> {
    fn at(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(code, e.to_string()))
    }
}
