//! Deep BSDE prices for the 20-strike grid at T = 0.1, trained on a pool of
//! hybrid-scheme paths and compared with the Riccati prices. Pass the number
//! of BSDE steps as the first argument (default 5).

use rough_cpde::bsde::{solve, BsdeHyper};
use rough_cpde::riccati::{lewis_price, LewisQuadrature};
use rough_cpde::{GridSpec, ModelParams};

fn main() -> rough_cpde::Result<()> {
    let m = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let p = ModelParams::reference();
    let t = 0.1;
    let ks: Vec<f64> = (0..20).map(|i| -0.4 + 0.8 * i as f64 / 19.0).collect();
    let hyper = BsdeHyper { m, ..BsdeHyper::default() };

    let mut log = Vec::new();
    let run = solve(&p, GridSpec::new(200, t)?, hyper, 20_000, &ks, 1, Some(&mut log))?;
    println!(
        "m = {m}: build {:.1}s, train {:.1}s, loss {:.3e} -> {:.3e}",
        run.build_seconds, run.train_seconds, run.summary.initial_loss, run.summary.final_loss
    );

    let strikes: Vec<f64> = ks.iter().map(|k| p.s0 * k.exp()).collect();
    let reference = lewis_price(&p, t, &strikes, 100, &LewisQuadrature::default())?;
    println!("\n    k      bsde        se     riccati");
    for ((k, (price, se)), r) in ks.iter().zip(&run.prices).zip(&reference) {
        println!("{k:>5.2} {price:>9.6} {se:>9.2e} {r:>9.6}");
    }
    let max = run.prices.iter().zip(&reference).map(|((a, _), b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max abs error {max:.2e}");
    Ok(())
}
