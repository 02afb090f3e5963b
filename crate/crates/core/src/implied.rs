//! Black–Scholes calls and implied volatility inversion for smile reports.

use serde::Serialize;

use crate::error::{Error, PriceBound, Result};
use crate::special::{norm_cdf, norm_pdf};

/// One point of an implied-volatility smile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmilePoint {
    /// `log(K / S₀)`
    pub log_moneyness: f64,
    pub maturity: f64,
    pub price: f64,
    /// `None` when the price sits outside the open no-arbitrage interval.
    pub vol: Option<f64>,
}

/// Black–Scholes call value. `vol = 0` gives the discounted intrinsic value.
pub fn bs_price(spot: f64, strike: f64, maturity: f64, vol: f64, r: f64) -> f64 {
    let df = (-r * maturity).exp();
    let sd = vol * maturity.sqrt();
    if sd == 0.0 {
        return (spot - strike * df).max(0.0);
    }
    if !sd.is_finite() {
        return spot;
    }
    let d1 = ((spot / (strike * df)).ln() + 0.5 * sd * sd) / sd;
    spot * norm_cdf(d1) - strike * df * norm_cdf(d1 - sd)
}

/// `∂C/∂σ`.
pub fn bs_vega(spot: f64, strike: f64, maturity: f64, vol: f64, r: f64) -> f64 {
    let df = (-r * maturity).exp();
    let sd = vol * maturity.sqrt();
    if sd == 0.0 {
        return 0.0;
    }
    let d1 = ((spot / (strike * df)).ln() + 0.5 * sd * sd) / sd;
    spot * norm_pdf(d1) * maturity.sqrt()
}

const BISECTION_WIDTH: f64 = 1e-4;
const MAX_NEWTON: usize = 100;

/// Volatility reproducing `price`: bisection down to a 1e-4 bracket, then
/// Newton steps on vega kept inside the bracket.
pub fn implied_vol(price: f64, spot: f64, strike: f64, maturity: f64, r: f64) -> Result<f64> {
    let lower = (spot - strike * (-r * maturity).exp()).max(0.0);
    let upper = spot;
    let out = |bound| Error::PriceOutOfBounds { bound, price, lower, upper };
    if !(price > lower) {
        return Err(out(PriceBound::Lower));
    }
    if !(price < upper) {
        return Err(out(PriceBound::Upper));
    }

    let f = |v: f64| bs_price(spot, strike, maturity, v, r) - price;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(out(PriceBound::Upper));
        }
    }
    while hi - lo > BISECTION_WIDTH {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let mut vol = 0.5 * (lo + hi);
    for _ in 0..MAX_NEWTON {
        let diff = f(vol);
        if diff == 0.0 {
            break;
        }
        if diff < 0.0 {
            lo = vol;
        } else {
            hi = vol;
        }
        let vega = bs_vega(spot, strike, maturity, vol, r);
        let mut next = vol - diff / vega;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let step = (next - vol).abs();
        vol = next;
        if step <= 1e-15 * vol.max(1.0) {
            break;
        }
    }
    Ok(vol)
}

/// Smile points for call prices on a log-moneyness grid.
pub fn smile(spot: f64, maturity: f64, r: f64, log_moneyness: &[f64], prices: &[f64]) -> Vec<SmilePoint> {
    log_moneyness
        .iter()
        .zip(prices)
        .map(|(&k, &price)| SmilePoint {
            log_moneyness: k,
            maturity,
            price,
            vol: implied_vol(price, spot, spot * k.exp(), maturity, r).ok(),
        })
        .collect()
}
