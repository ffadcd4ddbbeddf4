//! Single-carrier frequency-domain equalization (SC-FDE) with model-based
//! and deep-unfolded soft interference cancellation equalizers.

pub mod channel;
pub mod cli;
pub mod equalizers;
pub mod error;
pub mod harness;
pub mod nn;
pub mod numerics;
pub mod sicnn;
pub mod system;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{CMatrix, CVector, SimRng, C64};
