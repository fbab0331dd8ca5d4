//! Reverse-mode automatic differentiation.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod params;

pub use gradcheck::{finite_difference_check, GradCheckReport, ParamCheck};
pub use graph::{Graph, Var};
pub(crate) use graph::{plane_coords, PLANE_AXES};
pub(crate) use kernels::{sigmoid, softplus};
pub use params::{ParamId, ParamSet};
