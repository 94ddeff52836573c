pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod imageops;
pub mod losses;
pub mod model;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use image::{DisparitySign, ImageTensor, ValidityMask, ValueDomain};
