pub mod autodiff;
pub mod error;
mod interp;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod geometry;
pub mod math;
pub mod config;
pub mod nn;
pub mod appearance;
pub mod image; pub mod morphable; pub mod raster;
pub mod deformation;
pub mod renderer;
pub mod metrics; pub mod scene; pub mod training;
pub mod bundle; pub mod checks;
