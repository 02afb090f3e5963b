//! Power-law Volterra kernel and the grid-dependent tables used by the
//! hybrid scheme.
//!
//! All tables carry the `1/Γ(α)` normalisation of the rough Heston kernel, so
//! the simulated variance and the Riccati pricer describe the same model.

use crate::error::{Error, Result};
use crate::params::GridSpec;
use crate::special::gamma;

/// `K(t) = t^{α-1} / Γ(α)`.
pub fn kernel_eval(t: f64, alpha: f64) -> Result<f64> {
    if alpha == 1.0 {
        return Ok(1.0);
    }
    if !(t > 0.0) {
        return Err(Error::Domain(format!(
            "kernel is singular at t = {t} for alpha = {alpha}"
        )));
    }
    Ok(t.powf(alpha - 1.0) / gamma(alpha))
}

/// Integrated kernel over one step at each lag:
/// `Ã_k = [(k dt)^α - ((k-1) dt)^α] / Γ(α+1)` for `k = 1..=n`.
///
/// Index 0 of the returned vector holds lag 1.
pub fn weights_a_tilde(grid: &GridSpec, alpha: f64) -> Vec<f64> {
    let dt = grid.dt();
    let scale = dt.powf(alpha) / gamma(alpha + 1.0);
    (1..=grid.n())
        .map(|k| {
            let k = k as f64;
            scale * (k.powf(alpha) - (k - 1.0).powf(alpha))
        })
        .collect()
}

/// Optimal evaluation point of the kernel inside cell `[k-1, k]` (in units of
/// the step): the point where `K` equals its average over the cell.
///
/// For `alpha == 1` the kernel is constant and the midpoint `k - 1/2` is
/// returned by convention.
pub fn b_star(k: usize, alpha: f64) -> f64 {
    assert!(k >= 1, "lag index starts at 1");
    let kf = k as f64;
    if alpha == 1.0 {
        return kf - 0.5;
    }
    ((kf.powf(alpha) - (kf - 1.0).powf(alpha)) / alpha).powf(1.0 / (alpha - 1.0))
}

/// Covariance of `(∫dB, ∫K(t_{i+1}-s)dB)` over one step.
pub fn covariance_step(grid: &GridSpec, alpha: f64) -> [[f64; 2]; 2] {
    let dt = grid.dt();
    let g = gamma(alpha);
    let s11 = dt;
    let s12 = dt.powf(alpha) / gamma(alpha + 1.0);
    let s22 = dt.powf(2.0 * alpha - 1.0) / ((2.0 * alpha - 1.0) * g * g);
    [[s11, s12], [s12, s22]]
}

/// Lower-triangular factor of the joint covariance of `(B̄, B̃, W)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chol3 {
    pub l: [[f64; 3]; 3],
    /// Set when a pivot was numerically zero or slightly negative and had to
    /// be clamped.
    pub regularised: bool,
}

impl Chol3 {
    /// `L z` for a vector of three independent standard normals.
    #[inline]
    pub fn apply(&self, z: [f64; 3]) -> [f64; 3] {
        let l = &self.l;
        [
            l[0][0] * z[0],
            l[1][0] * z[0] + l[1][1] * z[1],
            l[2][0] * z[0] + l[2][1] * z[1] + l[2][2] * z[2],
        ]
    }
}

/// The 3×3 covariance `[[Σ11, Σ12, ρ dt], [Σ12, Σ22, ρ Σ12], [ρ dt, ρ Σ12, dt]]`.
pub fn joint_covariance(sigma2: &[[f64; 2]; 2], rho: f64, dt: f64) -> [[f64; 3]; 3] {
    let s12 = sigma2[0][1];
    [
        [sigma2[0][0], s12, rho * dt],
        [s12, sigma2[1][1], rho * s12],
        [rho * dt, rho * s12, dt],
    ]
}

/// Cholesky factor of [`joint_covariance`]. Rank-deficient input (e.g.
/// `ρ = -1`) yields zero pivots rather than an error.
pub fn chol3(sigma2: &[[f64; 2]; 2], rho: f64, dt: f64) -> Result<Chol3> {
    let a = joint_covariance(sigma2, rho, dt);
    let scale = (0..3).map(|i| a[i][i]).fold(0.0_f64, f64::max);
    let tol = 1e-14 * scale.max(f64::MIN_POSITIVE);
    let mut l = [[0.0; 3]; 3];
    let mut regularised = false;
    for j in 0..3 {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if d <= tol {
            if d < -1e-10 * scale {
                return Err(Error::NotPsd { pivot: j, value: d });
            }
            // zero pivot: the column below is zero for a PSD matrix
            regularised = true;
            continue;
        }
        let ljj = d.sqrt();
        l[j][j] = ljj;
        for i in (j + 1)..3 {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / ljj;
        }
    }
    Ok(Chol3 { l, regularised })
}

/// Precomputed tables for a `(grid, α, ρ)` triple. Immutable once built.
#[derive(Debug, Clone)]
pub struct KernelTables {
    pub grid: GridSpec,
    pub alpha: f64,
    /// `Ã_k`, index `k - 1`.
    pub a_tilde: Vec<f64>,
    /// `b*_k`, index `k - 1`.
    pub b_star: Vec<f64>,
    /// `K(b*_k dt)`, index `k - 1`.
    pub kernel_at_b_star: Vec<f64>,
    pub sigma2: [[f64; 2]; 2],
    pub chol3: Chol3,
}

impl KernelTables {
    pub fn new(grid: GridSpec, alpha: f64, rho: f64) -> Result<Self> {
        let a_tilde = weights_a_tilde(&grid, alpha);
        let b_star: Vec<f64> = (1..=grid.n()).map(|k| b_star(k, alpha)).collect();
        let dt = grid.dt();
        let kernel_at_b_star = b_star
            .iter()
            .map(|b| kernel_eval(b * dt, alpha))
            .collect::<Result<Vec<_>>>()?;
        let sigma2 = covariance_step(&grid, alpha);
        let chol3 = chol3(&sigma2, rho, dt)?;
        Ok(KernelTables {
            grid,
            alpha,
            a_tilde,
            b_star,
            kernel_at_b_star,
            sigma2,
            chol3,
        })
    }

    /// `Ã` at lag `k ≥ 1`.
    #[inline]
    pub fn a(&self, lag: usize) -> f64 {
        self.a_tilde[lag - 1]
    }

    /// `K(b*_k dt)` at lag `k ≥ 1`.
    #[inline]
    pub fn kb(&self, lag: usize) -> f64 {
        self.kernel_at_b_star[lag - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::composite_gl;

    // ∫_a^b f(u) du after u = a + (b-a) s^m, which smooths an integrable
    // power singularity at `a`.
    fn graded_quad(f: impl Fn(f64) -> f64, a: f64, b: f64, m: f64) -> f64 {
        let (s, w) = composite_gl(0.0, 1.0, 200, 16);
        s.iter()
            .zip(&w)
            .map(|(s, w)| w * f(a + (b - a) * s.powf(m)) * (b - a) * m * s.powf(m - 1.0))
            .sum()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel_eval(7.3, 1.0).unwrap(), 1.0);
        let k = kernel_eval(1.0, 0.6).unwrap();
        // Γ(0.6) = 1.489192248812817...
        assert!((k - 1.0 / 1.489_192_248_812_817).abs() < 1e-13);
        assert!(kernel_eval(0.0, 0.6).is_err());
        assert!(kernel_eval(-1.0, 0.6).is_err());
    }

    #[test]
    fn a_tilde_telescopes() {
        for &(n, t, alpha) in &[(1, 1.0, 0.6), (100, 1.0, 0.6), (200, 0.1, 0.6), (57, 3.3, 0.8)] {
            let g = GridSpec::new(n, t).unwrap();
            let s: f64 = weights_a_tilde(&g, alpha).iter().sum();
            let target = f64::powf(t, alpha) / gamma(alpha + 1.0);
            assert!((s - target).abs() <= 1e-12 * target, "n={n} T={t}");
        }
        let g = GridSpec::new(1, 1.0).unwrap();
        assert_eq!(weights_a_tilde(&g, 1.0), vec![1.0]);
    }

    #[test]
    fn a_tilde_matches_quadrature() {
        let g = GridSpec::new(100, 1.0).unwrap();
        let a = weights_a_tilde(&g, 0.6);
        let dt = g.dt();
        let k = |u: f64| u.powf(-0.4) / gamma(0.6);
        let oracle3 = graded_quad(k, 2.0 * dt, 3.0 * dt, 1.0);
        assert!((a[2] - oracle3).abs() / oracle3 < 1e-10);
        let oracle1 = graded_quad(k, 0.0, dt, 10.0);
        assert!((a[0] - oracle1).abs() / oracle1 < 1e-10);
        assert!(a.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
    }

    #[test]
    fn b_star_values() {
        assert!((b_star(1, 0.6) - (1.0_f64 / 0.6).powf(-2.5)).abs() < 1e-14);
        let direct = ((2.0_f64.powf(0.6) - 1.0) / 0.6).powf(-2.5);
        assert!((b_star(2, 0.6) - direct).abs() < 1e-14);
        assert!(b_star(2, 0.6) > 1.0 && b_star(2, 0.6) < 2.0);
        assert_eq!(b_star(4, 1.0), 3.5);
    }

    #[test]
    fn b_star_reproduces_cell_average() {
        let g = GridSpec::new(50, 0.7).unwrap();
        let a = weights_a_tilde(&g, 0.6);
        for k in 2..=50 {
            let approx = g.dt() * kernel_eval(b_star(k, 0.6) * g.dt(), 0.6).unwrap();
            assert!((approx - a[k - 1]).abs() <= 0.15 * a[k - 1]);
        }
    }

    #[test]
    fn covariance_matches_quadrature() {
        let g = GridSpec::new(100, 1.0).unwrap();
        let s = covariance_step(&g, 0.6);
        let dt = g.dt();
        let k = |u: f64| u.powf(-0.4) / gamma(0.6);
        let s12 = graded_quad(k, 0.0, dt, 10.0);
        let s22 = graded_quad(|u| k(u) * k(u), 0.0, dt, 20.0);
        assert!((s[0][1] - s12).abs() / s12 < 1e-10);
        assert!((s[1][1] - s22).abs() / s22 < 1e-10);
        assert_eq!(s[0][0], dt);
        assert!(s[0][1] * s[0][1] <= s[0][0] * s[1][1]);
    }

    #[test]
    fn constant_kernel_covariance() {
        let g = GridSpec::new(1, 1.0).unwrap();
        assert_eq!(covariance_step(&g, 1.0), [[1.0, 1.0], [1.0, 1.0]]);
        let g = GridSpec::new(10, 1.0).unwrap();
        let a = weights_a_tilde(&g, 1.0);
        assert!(a.iter().all(|x| (x - 0.1).abs() < 1e-15));
    }

    fn reconstruct(c: &Chol3) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| c.l[i][k] * c.l[j][k]).sum();
            }
        }
        m
    }

    #[test]
    fn chol3_degenerate_cases() {
        let s = [[1.0, 1.0], [1.0, 1.0]];
        let c = chol3(&s, 0.0, 1.0).unwrap();
        assert_eq!(reconstruct(&c), joint_covariance(&s, 0.0, 1.0));
        assert_eq!(c.l[2], [0.0, 0.0, 1.0]);

        let c = chol3(&s, -1.0, 1.0).unwrap();
        assert!(c.regularised);
        assert_eq!(c.l[2][2], 0.0);
        assert_eq!(reconstruct(&c), joint_covariance(&s, -1.0, 1.0));
    }

    #[test]
    fn chol3_reconstructs_rough_case() {
        let g = GridSpec::new(200, 0.1).unwrap();
        let s = covariance_step(&g, 0.6);
        let c = chol3(&s, -0.7, g.dt()).unwrap();
        let a = joint_covariance(&s, -0.7, g.dt());
        let m = reconstruct(&c);
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i][j] - a[i][j]).abs() <= 1e-12 * a[i][j].abs().max(a[i][i]));
            }
            for j in (i + 1)..3 {
                assert_eq!(c.l[i][j], 0.0);
            }
        }
    }
}
