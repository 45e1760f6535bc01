pub mod analysis;
pub mod bench;
pub mod check;
pub mod conv;
pub mod error;
pub mod io;
pub mod lattice;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
