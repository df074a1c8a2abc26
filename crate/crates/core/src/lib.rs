pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod harness;
pub mod io;
pub mod numerics;
pub mod rtfpm;
pub mod training;
pub mod transporter;

pub use error::{Error, Result};
