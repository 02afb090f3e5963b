//! Implied volatility smiles of the steep-skew parameter set, from Riccati
//! prices at a few maturities.

use rough_cpde::implied::smile;
use rough_cpde::riccati::{lewis_price_refining, LewisQuadrature};
use rough_cpde::ModelParams;

fn main() -> rough_cpde::Result<()> {
    let p = ModelParams::steep_skew();
    let ks: Vec<f64> = (0..17).map(|i| -0.4 + 0.05 * i as f64).collect();
    let strikes: Vec<f64> = ks.iter().map(|k| p.s0 * k.exp()).collect();
    for t in [0.2, 0.6] {
        // the explicit Adams predictor needs finer steps at large vol-of-vol
        let quad = LewisQuadrature { tol: 1e-6, ..LewisQuadrature::default() };
        let (prices, n) = lewis_price_refining(&p, t, &strikes, 400, &quad, 4)?;
        println!("T = {t} ({n} Adams steps)");
        for pt in smile(p.s0, t, p.r, &ks, &prices) {
            match pt.vol {
                Some(v) => println!("  k = {:>5.2}  price {:.6}  vol {:.4}", pt.log_moneyness, pt.price, v),
                None => println!("  k = {:>5.2}  price {:.2e}  no implied vol", pt.log_moneyness, pt.price),
            }
        }
    }
    Ok(())
}
