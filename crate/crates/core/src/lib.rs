pub mod analysis;
pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod reference;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
