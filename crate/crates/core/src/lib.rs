//! Rough Heston pricing through three independent routes:
//!
//! * [`hybrid`]: hybrid-scheme Monte Carlo of the spot, the variance and the
//!   forward variance curves;
//! * [`riccati`]: fractional Riccati equation solved by an Adams
//!   predictor–corrector, with Lewis Fourier inversion for call prices;
//! * [`bsde`]: a deep BSDE solver for the pricing PDE written on a finite
//!   basis of forward-curve coefficients.
//!
//! [`bench`] ties the three together into reproducible comparison runs.

pub mod bench;
pub mod bsde;
pub mod error;
pub mod hybrid;
pub mod implied;
pub mod kernel;
pub mod nn;
pub mod params;
pub mod riccati;
pub mod special;

pub use error::{Error, Result};
pub use params::{GridSpec, ModelParams};
