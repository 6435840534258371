pub mod analysis;
pub mod assembly;
pub mod error;
mod frontal;
pub mod linsolve;
pub mod mesh;
pub mod mms;
pub mod observation;
pub mod quadrature;
pub mod solver;
pub mod sparse;
pub mod spaces;
pub mod theory;

pub use error::{Error, Result};
