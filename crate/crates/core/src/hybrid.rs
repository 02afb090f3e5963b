//! Hybrid-scheme simulation of the rough Heston variance, the spot, and the
//! forward variance curves `Θ^i`.
//!
//! The singular cell of the kernel is simulated exactly through the Gaussian
//! pair `(B̄_i, B̃_i)`; the remaining cells evaluate the kernel at `b*_k`.
//! Variance is fully truncated: `V_i` is clamped at zero after each step.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::KernelTables;
use crate::params::{GridSpec, ModelParams};

/// Simulated fine-grid paths. Row `p` belongs to path `p`.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub params: ModelParams,
    pub grid: GridSpec,
    pub seed: u64,
    /// `[n_paths × (n+1)]`
    pub v: Array2<f64>,
    /// `[n_paths × (n+1)]`
    pub s: Array2<f64>,
    /// `[n_paths × n]`, `B̄_i = ∫_{t_i}^{t_{i+1}} dB`
    pub bbar: Array2<f64>,
    /// `[n_paths × n]`, `B̃_i = ∫_{t_i}^{t_{i+1}} K(t_{i+1}-s) dB`
    pub btilde: Array2<f64>,
    /// `[n_paths × n]`, increments of the spot Brownian motion
    pub w: Array2<f64>,
}

impl PathBatch {
    pub fn n_paths(&self) -> usize {
        self.v.nrows()
    }

    pub fn terminal_spots(&self) -> ArrayView1<'_, f64> {
        self.s.column(self.grid.n())
    }
}

/// Deterministic RNG substream for one path.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

struct PathRow {
    v: Vec<f64>,
    s: Vec<f64>,
    bbar: Vec<f64>,
    btilde: Vec<f64>,
    w: Vec<f64>,
}

fn simulate_path(
    params: &ModelParams,
    tables: &KernelTables,
    seed: u64,
    path: usize,
) -> Result<PathRow> {
    let n = tables.grid.n();
    let dt = tables.grid.dt();
    let mut rng = path_rng(seed, path);
    let mut bbar = Vec::with_capacity(n);
    let mut btilde = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for _ in 0..n {
        let z: [f64; 3] = [
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        ];
        let g = tables.chol3.apply(z);
        bbar.push(g[0]);
        btilde.push(g[1]);
        w.push(g[2]);
    }

    let mut v = vec![0.0; n + 1];
    let mut s = vec![0.0; n + 1];
    v[0] = params.v0;
    s[0] = params.s0;
    // drift[j] = κ(θ - V_j), noise[j] = ν √V_j B̄_j
    let mut drift = vec![0.0; n];
    let mut noise = vec![0.0; n];
    for i in 1..=n {
        let prev = i - 1;
        let sq = v[prev].max(0.0).sqrt();
        drift[prev] = params.kappa * (params.theta - v[prev]);
        noise[prev] = params.nu * sq * bbar[prev];

        let mut acc = params.v0;
        for j in 0..i {
            acc += drift[j] * tables.a(i - j);
        }
        for j in 0..i.saturating_sub(1) {
            acc += noise[j] * tables.kb(i - j);
        }
        acc += params.nu * sq * btilde[prev];
        if !acc.is_finite() {
            return Err(Error::NonFinite { path, step: i });
        }
        v[i] = acc.max(0.0);

        let si = s[prev] * ((params.r - 0.5 * v[prev]) * dt + sq * w[prev]).exp();
        if !(si.is_finite() && si > 0.0) {
            return Err(Error::NonFinite { path, step: i });
        }
        s[i] = si;
    }
    Ok(PathRow { v, s, bbar, btilde, w })
}

/// Simulate `n_paths` paths of `(S, V)` and the driving Gaussian increments.
///
/// Each path draws from its own `(seed, path)` substream, so the result does
/// not depend on the thread count.
pub fn simulate(params: &ModelParams, grid: GridSpec, n_paths: usize, seed: u64) -> Result<PathBatch> {
    params.validate()?;
    if n_paths == 0 {
        return Err(Error::EmptyBatch);
    }
    let tables = KernelTables::new(grid, params.alpha, params.rho)?;
    simulate_with_tables(params, &tables, n_paths, seed)
}

pub fn simulate_with_tables(
    params: &ModelParams,
    tables: &KernelTables,
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch> {
    let grid = tables.grid;
    let n = grid.n();
    let rows: Vec<PathRow> = (0..n_paths)
        .into_par_iter()
        .map(|p| simulate_path(params, tables, seed, p))
        .collect::<Result<_>>()?;

    let mut batch = PathBatch {
        params: *params,
        grid,
        seed,
        v: Array2::zeros((n_paths, n + 1)),
        s: Array2::zeros((n_paths, n + 1)),
        bbar: Array2::zeros((n_paths, n)),
        btilde: Array2::zeros((n_paths, n)),
        w: Array2::zeros((n_paths, n)),
    };
    for (p, row) in rows.into_iter().enumerate() {
        batch.v.row_mut(p).assign(&ArrayView1::from(&row.v));
        batch.s.row_mut(p).assign(&ArrayView1::from(&row.s));
        batch.bbar.row_mut(p).assign(&ArrayView1::from(&row.bbar));
        batch.btilde.row_mut(p).assign(&ArrayView1::from(&row.btilde));
        batch.w.row_mut(p).assign(&ArrayView1::from(&row.w));
    }
    Ok(batch)
}

/// Forward part `Θ^i_k`, `k = i..=n`, of the discretised forward variance
/// curve at base time index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaCurve {
    pub base_time_index: usize,
    /// `values[k - base_time_index] = Θ^i_k`, truncated at zero.
    pub values: Vec<f64>,
    // untruncated sums carried by the recursion
    running: Vec<f64>,
}

impl ThetaCurve {
    /// `Θ^0 ≡ V₀`.
    pub fn initial(n: usize, v0: f64) -> Self {
        ThetaCurve {
            base_time_index: 0,
            values: vec![v0; n + 1],
            running: vec![v0; n + 1],
        }
    }

    /// `Θ^i_k` for `k ≥ i`.
    pub fn at(&self, k: usize) -> f64 {
        self.values[k - self.base_time_index]
    }

    pub fn last_index(&self) -> usize {
        self.base_time_index + self.values.len() - 1
    }
}

/// One-step update `Θ^{i-1} → Θ^i`:
/// `Θ^i_k = Θ^{i-1}_k + κ(θ - V_{i-1}) Ã_{k-i+1} + ν √V_{i-1} K(b*_{k-i+1} dt) B̄_{i-1}`.
pub fn theta_step(
    prev: &ThetaCurve,
    v_prev: f64,
    bbar_prev: f64,
    tables: &KernelTables,
    params: &ModelParams,
    i: usize,
) -> Result<ThetaCurve> {
    let n = tables.grid.n();
    if i == 0 || i > n || prev.base_time_index + 1 != i || prev.last_index() != n {
        return Err(Error::Dimension(format!(
            "theta_step to index {i} from curve based at {} (n = {n})",
            prev.base_time_index
        )));
    }
    let drift = params.kappa * (params.theta - v_prev);
    let vol = params.nu * v_prev.max(0.0).sqrt() * bbar_prev;
    let running: Vec<f64> = (i..=n)
        .map(|k| {
            let lag = k - i + 1;
            prev.running[k - prev.base_time_index] + drift * tables.a(lag) + vol * tables.kb(lag)
        })
        .collect();
    Ok(ThetaCurve {
        base_time_index: i,
        values: running.iter().map(|x| x.max(0.0)).collect(),
        running,
    })
}

/// `Θ^i_k` evaluated directly from the realised path for the requested
/// indices `k ≥ i`, without materialising the intermediate curves.
///
/// The sum is the same truncated stochastic convolution that
/// [`theta_step`] accumulates.
pub fn theta_at(
    batch: &PathBatch,
    tables: &KernelTables,
    path: usize,
    i: usize,
    ks: &[usize],
) -> Vec<f64> {
    let p = &batch.params;
    let v = batch.v.row(path);
    let bbar = batch.bbar.row(path);
    ks.iter()
        .map(|&k| {
            debug_assert!(k >= i && k <= tables.grid.n());
            let mut acc = p.v0;
            for j in 0..i {
                let lag = k - j;
                acc += p.kappa * (p.theta - v[j]) * tables.a(lag)
                    + p.nu * v[j].max(0.0).sqrt() * tables.kb(lag) * bbar[j];
            }
            acc.max(0.0)
        })
        .collect()
}

/// Discounted call prices and standard errors, one pair per strike.
pub fn mc_price(batch: &PathBatch, strikes: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n_paths = batch.n_paths();
    if n_paths == 0 {
        return Err(Error::EmptyBatch);
    }
    let disc = (-batch.params.r * batch.grid.maturity()).exp();
    let st = batch.terminal_spots();
    Ok(strikes
        .iter()
        .map(|&k| {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for &s in st.iter() {
                let x = disc * (s - k).max(0.0);
                sum += x;
                sum_sq += x * x;
            }
            let nf = n_paths as f64;
            let mean = sum / nf;
            let se = if n_paths > 1 {
                let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
                (var / nf).sqrt()
            } else {
                0.0
            };
            (mean, se)
        })
        .collect())
}

const DUMP_MAGIC: &[u8; 4] = b"RHPB";
const DUMP_VERSION: u32 = 1;

/// Header of a binary path dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpHeader {
    pub n: usize,
    pub maturity: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub params: ModelParams,
}

/// Write `S` and `V` in the binary dump layout (little-endian):
///
/// ```text
/// magic "RHPB" | version u32 | n u64 | T f64 | n_paths u64 | seed u64 |
/// kappa theta nu alpha rho v0 s0 r (8 × f64) |
/// S row-major n_paths × (n+1) f64 | V row-major n_paths × (n+1) f64
/// ```
pub fn write_path_dump<W: Write>(batch: &PathBatch, mut out: W) -> Result<()> {
    let p = &batch.params;
    out.write_all(DUMP_MAGIC)?;
    out.write_all(&DUMP_VERSION.to_le_bytes())?;
    out.write_all(&(batch.grid.n() as u64).to_le_bytes())?;
    out.write_all(&batch.grid.maturity().to_le_bytes())?;
    out.write_all(&(batch.n_paths() as u64).to_le_bytes())?;
    out.write_all(&batch.seed.to_le_bytes())?;
    for x in [p.kappa, p.theta, p.nu, p.alpha, p.rho, p.v0, p.s0, p.r] {
        out.write_all(&x.to_le_bytes())?;
    }
    for m in [&batch.s, &batch.v] {
        for x in m.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Inverse of [`write_path_dump`]: returns the header, `S` and `V`.
pub fn read_path_dump<R: Read>(mut input: R) -> Result<(DumpHeader, Array2<f64>, Array2<f64>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Format("bad path dump magic".into()));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported dump version {version}")));
    }
    let mut b8 = [0u8; 8];
    let mut u64_next = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8))
    };
    let n = u64_next(&mut input)? as usize;
    let maturity = f64::from_bits(u64_next(&mut input)?);
    let n_paths = u64_next(&mut input)? as usize;
    let seed = u64_next(&mut input)?;
    let mut vals = [0.0; 8];
    for v in vals.iter_mut() {
        *v = f64::from_bits(u64_next(&mut input)?);
    }
    let params = ModelParams {
        kappa: vals[0],
        theta: vals[1],
        nu: vals[2],
        alpha: vals[3],
        rho: vals[4],
        v0: vals[5],
        s0: vals[6],
        r: vals[7],
    };
    let mut read_matrix = |r: &mut R| -> Result<Array2<f64>> {
        let mut m = Array2::zeros((n_paths, n + 1));
        for x in m.iter_mut() {
            *x = f64::from_bits(u64_next(r)?);
        }
        Ok(m)
    };
    let s = read_matrix(&mut input)?;
    let v = read_matrix(&mut input)?;
    Ok((
        DumpHeader {
            n,
            maturity,
            n_paths,
            seed,
            params,
        },
        s,
        v,
    ))
}
