pub mod bank;
pub mod error;
pub mod extractor;
pub mod harness;
pub mod image;
pub mod losses;
pub mod nn;
pub(crate) mod par;
pub mod raster;
pub mod seed;
pub mod synthlab;
pub mod trainer;

pub use error::{ConsultError, Result};
pub use image::{DefectMask, GrayImage};
pub use par::is_parallel;
