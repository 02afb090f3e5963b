//! Hybrid-scheme kernel tables for the reference parameters on a 200-step
//! grid: integrated kernel weights, optimal abscissae and the joint Gaussian
//! covariance of one step.

use rough_cpde::kernel::{joint_covariance, KernelTables};
use rough_cpde::special::gamma;
use rough_cpde::{GridSpec, ModelParams};

fn main() -> rough_cpde::Result<()> {
    let p = ModelParams::reference();
    let grid = GridSpec::new(200, 1.0)?;
    let tables = KernelTables::new(grid, p.alpha, p.rho)?;

    println!("lag      A~_k          b*_k      K(b*_k dt)");
    for k in [1, 2, 3, 5, 10, 50, 200] {
        println!("{k:>3}  {:.6e}  {:.6}  {:.6e}", tables.a(k), tables.b_star[k - 1], tables.kb(k));
    }

    // the weights telescope to the integral of the kernel over [0, T]
    let sum: f64 = tables.a_tilde.iter().sum();
    let exact = grid.maturity().powf(p.alpha) / gamma(p.alpha + 1.0);
    println!("\nsum A~_k = {sum:.15}, T^α/Γ(1+α) = {exact:.15}");

    let cov = joint_covariance(&tables.sigma2, p.rho, grid.dt());
    println!("\ncovariance of (B̄, B̃, W) over one step:");
    for row in cov {
        println!("  {:>12.4e} {:>12.4e} {:>12.4e}", row[0], row[1], row[2]);
    }
    println!("cholesky regularised: {}", tables.chol3.regularised);
    Ok(())
}
