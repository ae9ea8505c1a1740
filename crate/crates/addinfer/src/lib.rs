pub mod backfit;
pub mod bootstrap;
pub mod data;
pub mod design;
pub mod error;
pub mod inference;
pub mod kernel;
pub(crate) mod quad;
pub mod simulate;
pub mod smoother;

pub use error::{Error, Result};
