//! Reference pricer: the fractional Riccati equation `D^α h = F(u, h)` solved
//! by the Adams predictor–corrector scheme, the characteristic function
//! `log Φ_T(u) = κθ I¹h(u,T) + V₀ I^{1-α}h(u,T)`, and Lewis' Fourier
//! inversion for European calls.
//!
//! For `α = 1` the classical Heston closed form is available as an oracle.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::special::{composite_gl, gamma};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// `F(u, x) = -u(u+i)/2 + (iuρν - κ) x + ν² x² / 2`.
pub fn riccati_rhs(u: Complex64, x: Complex64, params: &ModelParams) -> Complex64 {
    -u * (u + I) * 0.5 + (I * u * params.rho * params.nu - params.kappa) * x
        + 0.5 * params.nu * params.nu * x * x
}

/// Product-trapezoidal weights for a fractional integral of order `order` on
/// a uniform grid. `lag_weight(l)` is the weight of node `k - l` at node `k`
/// for `1 ≤ l < k`; the end nodes have their own formulas.
#[derive(Debug, Clone)]
struct TrapezoidalWeights {
    scale: f64,
    order: f64,
}

impl TrapezoidalWeights {
    fn new(order: f64, dt: f64) -> Self {
        TrapezoidalWeights {
            scale: dt.powf(order) / gamma(order + 2.0),
            order,
        }
    }

    // weight of node j at node k
    fn weight(&self, j: usize, k: usize) -> f64 {
        let r1 = self.order + 1.0;
        if j == k {
            return self.scale;
        }
        if j == 0 {
            let kf = k as f64;
            return self.scale * ((kf - 1.0).powf(r1) - (kf - self.order - 1.0) * kf.powf(self.order));
        }
        let l = (k - j) as f64;
        self.scale * ((l + 1.0).powf(r1) + (l - 1.0).powf(r1) - 2.0 * l.powf(r1))
    }
}

/// Corrector weights `a_{j,k}` and predictor weights `b_{j,k}` of the Adams
/// scheme. They depend only on `(n, dt, α)`.
#[derive(Debug, Clone)]
pub struct AdamsWeights {
    pub n: usize,
    pub dt: f64,
    pub alpha: f64,
    /// `a_{0,k}`, indexed by `k` (entry 0 unused).
    a_first: Vec<f64>,
    /// `a_{j,k}` for `1 ≤ j < k`, indexed by the lag `k - j`.
    a_lag: Vec<f64>,
    /// `a_{k,k}`.
    a_diag: f64,
    /// `b_{j,k}`, indexed by the lag `k - j`.
    b_lag: Vec<f64>,
}

impl AdamsWeights {
    pub fn new(n: usize, dt: f64, alpha: f64) -> Self {
        let tw = TrapezoidalWeights::new(alpha, dt);
        let a_first = (0..=n).map(|k| if k == 0 { 0.0 } else { tw.weight(0, k) }).collect();
        // a_{j,k} for j ≥ 1 only depends on k - j; take k = n.
        let a_lag = (0..=n).map(|l| if l == 0 || l >= n { 0.0 } else { tw.weight(n - l, n) }).collect();
        let bscale = dt.powf(alpha) / gamma(alpha + 1.0);
        let b_lag = (0..=n)
            .map(|l| {
                if l == 0 {
                    0.0
                } else {
                    let l = l as f64;
                    bscale * (l.powf(alpha) - (l - 1.0).powf(alpha))
                }
            })
            .collect();
        AdamsWeights {
            n,
            dt,
            alpha,
            a_first,
            a_lag,
            a_diag: tw.scale,
            b_lag,
        }
    }

    pub fn a(&self, j: usize, k: usize) -> f64 {
        assert!(j <= k && k <= self.n && k >= 1);
        if j == k {
            self.a_diag
        } else if j == 0 {
            self.a_first[k]
        } else {
            self.a_lag[k - j]
        }
    }

    pub fn b(&self, j: usize, k: usize) -> f64 {
        assert!(j < k && k <= self.n);
        self.b_lag[k - j]
    }
}

/// `h(u, t_k)` on the Adams grid plus the two fractional integrals at `T`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub u: Complex64,
    pub dt: f64,
    pub h: Vec<Complex64>,
    /// `I¹h(u, T)`
    pub frac_int_1: Complex64,
    /// `I^{1-α}h(u, T)`
    pub frac_int_1ma: Complex64,
}

/// Adams solver bound to a parameter set and maturity; weights are computed
/// once and reused for every frequency.
#[derive(Debug, Clone)]
pub struct RiccatiSolver {
    pub params: ModelParams,
    pub maturity: f64,
    weights: AdamsWeights,
    int_1: Vec<f64>,
    int_1ma: Vec<f64>,
}

impl RiccatiSolver {
    pub fn new(params: &ModelParams, maturity: f64, n_steps: usize) -> Result<Self> {
        params.validate()?;
        if n_steps == 0 {
            return Err(Error::InvalidGrid("Adams scheme needs at least one step".into()));
        }
        if !(maturity > 0.0) {
            return Err(Error::InvalidGrid(format!("maturity {maturity} must be positive")));
        }
        let dt = maturity / n_steps as f64;
        let weights = AdamsWeights::new(n_steps, dt, params.alpha);
        let at_maturity = |order: f64| -> Vec<f64> {
            let tw = TrapezoidalWeights::new(order, dt);
            (0..=n_steps).map(|j| tw.weight(j, n_steps)).collect()
        };
        Ok(RiccatiSolver {
            params: *params,
            maturity,
            weights,
            int_1: at_maturity(1.0),
            int_1ma: at_maturity(1.0 - params.alpha),
        })
    }

    pub fn n_steps(&self) -> usize {
        self.weights.n
    }

    pub fn weights(&self) -> &AdamsWeights {
        &self.weights
    }

    pub fn solve(&self, u: Complex64) -> Result<RiccatiSolution> {
        let w = &self.weights;
        let n = w.n;
        let p = &self.params;
        let mut h = vec![Complex64::new(0.0, 0.0); n + 1];
        let mut f = vec![Complex64::new(0.0, 0.0); n + 1];
        f[0] = riccati_rhs(u, h[0], p);
        for k in 1..=n {
            let mut pred = Complex64::new(0.0, 0.0);
            let mut corr = f[0] * w.a_first[k];
            pred += f[0] * w.b_lag[k];
            for j in 1..k {
                pred += f[j] * w.b_lag[k - j];
                corr += f[j] * w.a_lag[k - j];
            }
            let hk = corr + riccati_rhs(u, pred, p) * w.a_diag;
            if !(hk.re.is_finite() && hk.im.is_finite()) {
                return Err(Error::RiccatiDivergence { u, step: k });
            }
            h[k] = hk;
            f[k] = riccati_rhs(u, hk, p);
        }
        let dot = |wts: &[f64]| h.iter().zip(wts).map(|(x, w)| x * w).sum::<Complex64>();
        Ok(RiccatiSolution {
            u,
            dt: w.dt,
            frac_int_1: dot(&self.int_1),
            frac_int_1ma: dot(&self.int_1ma),
            h,
        })
    }

    /// `Φ_T(u) = E[(S_T/S_0)^{iu}]`, including the `e^{iurT}` drift factor.
    pub fn char_fn(&self, u: Complex64) -> Result<Complex64> {
        let sol = self.solve(u)?;
        let p = &self.params;
        let log_phi = p.kappa * p.theta * sol.frac_int_1 + p.v0 * sol.frac_int_1ma
            + I * u * p.r * self.maturity;
        Ok(log_phi.exp())
    }
}

pub fn adams_solve(u: Complex64, maturity: f64, n_steps: usize, params: &ModelParams) -> Result<RiccatiSolution> {
    RiccatiSolver::new(params, maturity, n_steps)?.solve(u)
}

pub fn char_fn(u: Complex64, maturity: f64, n_steps: usize, params: &ModelParams) -> Result<Complex64> {
    RiccatiSolver::new(params, maturity, n_steps)?.char_fn(u)
}

/// Classical Heston characteristic function (`α = 1`) in the branch-stable
/// form with `g = (β - d)/(β + d)` and `e^{-dT}`.
pub fn heston_closed_form(params: &ModelParams, maturity: f64, u: Complex64) -> Result<Complex64> {
    if params.alpha != 1.0 {
        return Err(Error::InvalidParams("closed form requires alpha = 1".into()));
    }
    let p = params;
    let t = maturity;
    let c = -u * (u + I) * 0.5;
    let (h_t, int_h) = if p.nu == 0.0 {
        if p.kappa == 0.0 {
            (c * t, c * t * t * 0.5)
        } else {
            let e = 1.0 - (-p.kappa * t).exp();
            (c * e / p.kappa, c / p.kappa * (t - e / p.kappa))
        }
    } else {
        let nu2 = p.nu * p.nu;
        let beta = p.kappa - I * p.rho * p.nu * u;
        let d = (beta * beta + nu2 * (u * u + I * u)).sqrt();
        let g = (beta - d) / (beta + d);
        let e = (-d * t).exp();
        let h_t = (beta - d) / nu2 * (1.0 - e) / (1.0 - g * e);
        let int_h = ((beta - d) * t - 2.0 * ((1.0 - g * e) / (1.0 - g)).ln()) / nu2;
        (h_t, int_h)
    };
    Ok((p.kappa * p.theta * int_h + p.v0 * h_t + I * u * p.r * t).exp())
}

/// Gauss–Legendre settings for the Lewis integral on `[0, u_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LewisQuadrature {
    pub u_max: f64,
    pub panels: usize,
    pub order: usize,
    /// Panels are doubled until successive price vectors differ by at most
    /// this much.
    pub tol: f64,
    pub max_panels: usize,
    /// Once `|Φ(u - i/2)|` falls below this, the rest of the integrand is
    /// taken as zero and `Φ` is not evaluated further out.
    pub tail_cutoff: f64,
}

impl Default for LewisQuadrature {
    fn default() -> Self {
        LewisQuadrature {
            u_max: 200.0,
            panels: 50,
            order: 8,
            tol: 1e-8,
            max_panels: 3200,
            tail_cutoff: 1e-20,
        }
    }
}

/// Lewis call prices from any characteristic function of `log(S_T/S_0)`:
/// `C = S₀ - √(S₀K) e^{-rT}/π ∫₀^∞ Re(e^{iuk} Φ(u - i/2)) du / (u² + 1/4)`
/// with `k = log(S₀/K)`.
pub fn lewis_from_cf<F>(
    cf: F,
    s0: f64,
    r: f64,
    maturity: f64,
    strikes: &[f64],
    quad: &LewisQuadrature,
) -> Result<Vec<f64>>
where
    F: Fn(Complex64) -> Result<Complex64> + Sync,
{
    if let Some(k) = strikes.iter().find(|k| !(**k > 0.0)) {
        return Err(Error::Domain(format!("strike {k} must be positive")));
    }
    let log_m: Vec<f64> = strikes.iter().map(|k| (s0 / k).ln()).collect();
    let disc = (-r * maturity).exp();
    let price_with = |panels: usize| -> Result<Vec<f64>> {
        let (nodes, weights) = composite_gl(0.0, quad.u_max, panels, quad.order);
        let mut phis = vec![Complex64::new(0.0, 0.0); nodes.len()];
        for (phi, &u) in phis.iter_mut().zip(&nodes) {
            *phi = cf(Complex64::new(u, -0.5))?;
            if phi.norm() < quad.tail_cutoff {
                break;
            }
        }
        Ok(strikes
            .iter()
            .zip(&log_m)
            .map(|(&k, &lm)| {
                let integral: f64 = nodes
                    .iter()
                    .zip(&weights)
                    .zip(&phis)
                    .map(|((&u, &w), phi)| {
                        w * (Complex64::new(0.0, u * lm).exp() * phi).re / (u * u + 0.25)
                    })
                    .sum();
                s0 - (s0 * k).sqrt() * disc / PI * integral
            })
            .collect())
    };

    let mut panels = quad.panels.max(1);
    let mut prices = price_with(panels)?;
    let mut change = f64::INFINITY;
    while panels * 2 <= quad.max_panels {
        let refined = price_with(panels * 2)?;
        change = prices
            .iter()
            .zip(&refined)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        panels *= 2;
        prices = refined;
        if change <= quad.tol {
            return Ok(prices);
        }
    }
    Err(Error::Quadrature { change, panels })
}

/// Rough Heston call prices via the Adams characteristic function.
pub fn lewis_price(
    params: &ModelParams,
    maturity: f64,
    strikes: &[f64],
    n_steps: usize,
    quad: &LewisQuadrature,
) -> Result<Vec<f64>> {
    let solver = RiccatiSolver::new(params, maturity, n_steps)?;
    lewis_from_cf(|u| solver.char_fn(u), params.s0, params.r, maturity, strikes, quad)
}

/// [`lewis_price`], doubling the Adams steps up to `max_doublings` times while
/// the explicit predictor diverges somewhere on `[0, u_max]`. Large vol-of-vol
/// at short maturities needs this. Returns the prices and the step count used.
pub fn lewis_price_refining(
    params: &ModelParams,
    maturity: f64,
    strikes: &[f64],
    n_steps: usize,
    quad: &LewisQuadrature,
    max_doublings: u32,
) -> Result<(Vec<f64>, usize)> {
    let mut n = n_steps;
    for _ in 0..max_doublings {
        match lewis_price(params, maturity, strikes, n, quad) {
            Err(Error::RiccatiDivergence { .. }) => n *= 2,
            other => return other.map(|p| (p, n)),
        }
    }
    lewis_price(params, maturity, strikes, n, quad).map(|p| (p, n))
}
