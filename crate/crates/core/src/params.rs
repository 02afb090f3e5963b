//! Model parameters and the fine simulation grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rough Heston parameters.
///
/// The variance follows `V_t = V_0 + ∫ K(t-s) [κ(θ - V_s) ds + ν √V_s dB_s]`
/// with the power-law kernel `K(t) = t^{α-1} / Γ(α)`, and the spot
/// `dS = S (r dt + √V dW)` with `d<W, B> = ρ dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kappa: f64,
    pub theta: f64,
    pub nu: f64,
    pub alpha: f64,
    pub rho: f64,
    pub v0: f64,
    pub s0: f64,
    #[serde(default)]
    pub r: f64,
}

impl ModelParams {
    /// Parameter set used for the price tables: κ=1, ν=0.1, α=0.6, ρ=-0.7,
    /// V₀=0.04, θ=0.06, S₀=1, r=0.
    pub const fn reference() -> Self {
        ModelParams {
            kappa: 1.0,
            theta: 0.06,
            nu: 0.1,
            alpha: 0.6,
            rho: -0.7,
            v0: 0.04,
            s0: 1.0,
            r: 0.0,
        }
    }

    /// Equity-like steep skew set used for the smile experiments: as
    /// [`ModelParams::reference`] with ν=0.9 and ρ=-0.8.
    pub const fn steep_skew() -> Self {
        ModelParams {
            nu: 0.9,
            rho: -0.8,
            ..Self::reference()
        }
    }

    /// Hurst exponent `H = α - 1/2`.
    pub fn hurst(&self) -> f64 {
        self.alpha - 0.5
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        let all = [
            self.kappa, self.theta, self.nu, self.alpha, self.rho, self.v0, self.s0, self.r,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return bad("non-finite parameter");
        }
        if !(self.alpha > 0.5 && self.alpha <= 1.0) {
            return bad("alpha must lie in (1/2, 1]");
        }
        if !(-1.0..=0.0).contains(&self.rho) {
            return bad("rho must lie in [-1, 0]");
        }
        if self.kappa < 0.0 || self.nu < 0.0 {
            return bad("kappa and nu must be non-negative");
        }
        if self.theta < 0.0 || self.v0 < 0.0 {
            return bad("theta and v0 must be non-negative");
        }
        if self.s0 <= 0.0 {
            return bad("s0 must be positive");
        }
        Ok(())
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::reference()
    }
}

/// Equidistant grid `t_i = i T / n` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    n: usize,
    maturity: f64,
}

impl GridSpec {
    pub fn new(n: usize, maturity: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGrid("n must be at least 1".into()));
        }
        if !(maturity > 0.0 && maturity.is_finite()) {
            return Err(Error::InvalidGrid(format!("maturity {maturity} must be positive")));
        }
        Ok(GridSpec { n, maturity })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn maturity(&self) -> f64 {
        self.maturity
    }

    pub fn dt(&self) -> f64 {
        self.maturity / self.n as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        self.maturity * i as f64 / self.n as f64
    }
}
