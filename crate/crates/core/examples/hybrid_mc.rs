//! Monte Carlo call prices from the hybrid scheme, checked against the
//! Riccati prices, plus one simulated forward variance curve.

use rough_cpde::hybrid::{mc_price, simulate_with_tables, theta_step, ThetaCurve};
use rough_cpde::kernel::KernelTables;
use rough_cpde::riccati::{lewis_price, LewisQuadrature};
use rough_cpde::{GridSpec, ModelParams};

fn main() -> rough_cpde::Result<()> {
    let p = ModelParams::reference();
    let t = 0.5;
    let grid = GridSpec::new(200, t)?;
    let tables = KernelTables::new(grid, p.alpha, p.rho)?;

    let start = std::time::Instant::now();
    let batch = simulate_with_tables(&p, &tables, 20_000, 42)?;
    println!("20000 paths x 200 steps in {:.2}s", start.elapsed().as_secs_f64());

    let strikes = [0.8, 0.9, 1.0, 1.1, 1.2];
    let mc = mc_price(&batch, &strikes)?;
    let reference = lewis_price(&p, t, &strikes, 100, &LewisQuadrature::default())?;
    println!("\n strike      mc        se    riccati   |err|/se");
    for ((k, (price, se)), r) in strikes.iter().zip(&mc).zip(&reference) {
        println!("{k:>7.2} {price:>9.5} {se:>9.2e} {r:>9.5} {:>8.2}", (price - r).abs() / se);
    }

    // forward variance curve of path 0 seen from t = T/2
    let mut curve = ThetaCurve::initial(grid.n(), p.v0);
    for i in 1..=grid.n() / 2 {
        curve = theta_step(&curve, batch.v[[0, i - 1]], batch.bbar[[0, i - 1]], &tables, &p, i)?;
    }
    println!("\nΘ at t = {:.2} on path 0 (V_t = {:.4}):", grid.time(curve.base_time_index), batch.v[[0, curve.base_time_index]]);
    for k in (curve.base_time_index..=grid.n()).step_by(20) {
        println!("  s = {:.3}  Θ = {:.5}", grid.time(k), curve.at(k));
    }
    Ok(())
}
