use num_complex::Complex64;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Which no-arbitrage bound an option price violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriceBound {
    /// Price at or below the intrinsic value `(S - K e^{-rT})+`.
    Lower,
    /// Price at or above the spot.
    Upper,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("covariance matrix is not positive semi-definite (pivot {pivot} = {value:e})")]
    NotPsd { pivot: usize, value: f64 },

    #[error("non-finite value on path {path} at step {step}")]
    NonFinite { path: usize, step: usize },

    #[error("empty path batch")]
    EmptyBatch,

    #[error("Riccati solution diverged at u = {u} (step {step})")]
    RiccatiDivergence { u: Complex64, step: usize },

    #[error("Fourier quadrature did not converge: last change {change:e} with {panels} panels")]
    Quadrature { change: f64, panels: usize },

    #[error("price {price} violates the {bound:?} no-arbitrage bound [{lower}, {upper}]")]
    PriceOutOfBounds {
        bound: PriceBound,
        price: f64,
        lower: f64,
        upper: f64,
    },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    TrainingDiverged { iteration: usize, loss: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
