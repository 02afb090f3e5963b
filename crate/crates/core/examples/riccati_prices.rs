//! Call prices on the 20-strike log-moneyness grid from the fractional
//! Riccati equation (100 Adams steps) and Lewis inversion.

use rough_cpde::riccati::{lewis_price, LewisQuadrature};
use rough_cpde::ModelParams;

fn main() -> rough_cpde::Result<()> {
    let p = ModelParams::reference();
    let ks: Vec<f64> = (0..20).map(|i| -0.4 + 0.8 * i as f64 / 19.0).collect();
    let strikes: Vec<f64> = ks.iter().map(|k| p.s0 * k.exp()).collect();
    print!("    T");
    for k in &ks {
        print!(" {k:>9.2}");
    }
    println!();
    for t in [0.1, 0.5, 1.6, 5.0] {
        let start = std::time::Instant::now();
        let prices = lewis_price(&p, t, &strikes, 100, &LewisQuadrature::default())?;
        print!("{t:>5}");
        for x in prices {
            print!(" {x:>9.2e}");
        }
        println!("   ({:.2}s)", start.elapsed().as_secs_f64());
    }
    Ok(())
}
