//! Deep BSDE solver for the pricing PDE written on a finite basis of
//! forward-curve coefficients.
//!
//! The forward curve `Θ^t` on `[t, T]` is reduced to `p` piecewise-constant
//! coefficients `θ_a = Θ^t_{t_a}`. The price then solves a PDE in
//! `(t, x, θ_1..θ_p)` whose diffusion has rank two, driven by the pair
//! `(B⊥, B)`. On a coarse grid `τ_0 < … < τ_m` one small network per step
//! estimates `Z = Σᵀ∇P`, and the backward recursion
//!
//! ```text
//! P_m = g(S_T),    P_i = (1 - r Δ_{i+1}) P_{i+1} - Z_i · (ΔB⊥_i, ΔB_i)
//! ```
//!
//! turns each simulated path into a sample of `P_0`. Training minimises the
//! spread of those samples; the price is their mean.

use std::io::Write;
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::{simulate_with_tables, theta_at, PathBatch, ThetaCurve};
use crate::implied::{implied_vol, SmilePoint};
use crate::kernel::{kernel_eval, KernelTables};
use crate::nn::{DenseNet, ForwardCache, OptimState};
use crate::params::{GridSpec, ModelParams};

/// Piecewise-constant projection of a forward curve at base time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisProjection {
    pub p: usize,
    pub base_time: f64,
    /// Right endpoints `t_a = t + a (T - t) / p`, `a = 1..=p`.
    pub bucket_times: Vec<f64>,
    /// Fine-grid index at which each `θ_a` is read.
    pub sample_indices: Vec<usize>,
    pub theta_coeffs: Vec<f64>,
    /// `κ_a = K(t_a - t)`.
    pub kappa_coeffs: Vec<f64>,
}

impl BasisProjection {
    pub fn is_empty(&self) -> bool {
        self.p == 0
    }
}

/// Bucket times, sampling indices and kernel coefficients for base index `c`.
///
/// Bucket times are exact; `θ_a` is read at the nearest fine index, pushed
/// strictly past `c`. At `c = n` (maturity) the layout is empty.
pub fn bucket_layout(grid: &GridSpec, c: usize, p: usize, alpha: f64) -> Result<(Vec<f64>, Vec<usize>, Vec<f64>)> {
    let n = grid.n();
    if p == 0 {
        return Err(Error::Dimension("basis dimension p must be at least 1".into()));
    }
    if c > n {
        return Err(Error::Dimension(format!("base index {c} beyond grid end {n}")));
    }
    if c == n {
        return Ok((vec![], vec![], vec![]));
    }
    let t = grid.time(c);
    let horizon = grid.maturity() - t;
    let mut times = Vec::with_capacity(p);
    let mut idx = Vec::with_capacity(p);
    let mut kappa = Vec::with_capacity(p);
    for a in 1..=p {
        let ta = if a == p { grid.maturity() } else { t + horizon * a as f64 / p as f64 };
        times.push(ta);
        idx.push(((ta / grid.dt()).round() as usize).clamp(c + 1, n));
        kappa.push(kernel_eval(ta - t, alpha)?);
    }
    Ok((times, idx, kappa))
}

pub fn project_theta(curve: &ThetaCurve, grid: &GridSpec, p: usize, alpha: f64) -> Result<BasisProjection> {
    let c = curve.base_time_index;
    if curve.last_index() != grid.n() {
        return Err(Error::Dimension("curve does not reach maturity".into()));
    }
    let (bucket_times, sample_indices, kappa_coeffs) = bucket_layout(grid, c, p, alpha)?;
    Ok(BasisProjection {
        p: bucket_times.len(),
        base_time: grid.time(c),
        theta_coeffs: sample_indices.iter().map(|&k| curve.at(k)).collect(),
        bucket_times,
        sample_indices,
        kappa_coeffs,
    })
}

/// `(1+p) × 2` factor of the diffusion matrix: row 0 drives the spot, row `a`
/// the coefficient `θ_a`; columns multiply `(dB⊥, dB)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionFactor(pub Array2<f64>);

impl DiffusionFactor {
    pub fn gram(&self) -> Array2<f64> {
        self.0.dot(&self.0.t())
    }
}

/// Factor for the rough Heston specialisation `l = √v`, `ξ = ν√v`.
/// Negative `v` is clamped to zero.
pub fn assemble_diffusion(x: f64, v: f64, kappa: &[f64], params: &ModelParams) -> DiffusionFactor {
    let sv = v.max(0.0).sqrt();
    let rho_bar = (1.0 - params.rho * params.rho).max(0.0).sqrt();
    let mut f = Array2::zeros((1 + kappa.len(), 2));
    f[[0, 0]] = sv * x * rho_bar;
    f[[0, 1]] = sv * x * params.rho;
    for (a, k) in kappa.iter().enumerate() {
        f[[a + 1, 1]] = params.nu * sv * k;
    }
    DiffusionFactor(f)
}

/// `ΣΣᵀ` entry by entry: `l²x²` in the corner, `ρ l ξ x κ_a` on the border,
/// `ξ² κ_a κ_j` in the block.
pub fn diffusion_gram(x: f64, v: f64, kappa: &[f64], params: &ModelParams) -> Array2<f64> {
    let v = v.max(0.0);
    let l = v.sqrt();
    let xi = params.nu * v.sqrt();
    let p = kappa.len();
    let mut g = Array2::zeros((1 + p, 1 + p));
    g[[0, 0]] = l * l * x * x;
    for a in 0..p {
        g[[0, a + 1]] = params.rho * l * xi * x * kappa[a];
        g[[a + 1, 0]] = g[[0, a + 1]];
        for j in 0..p {
            g[[a + 1, j + 1]] = xi * xi * kappa[a] * kappa[j];
        }
    }
    g
}

/// Drift `(x r, b κ_1, …, b κ_p)` with `b = κ(θ - v)`.
pub fn drift_vector(x: f64, v: f64, kappa: &[f64], params: &ModelParams) -> Array1<f64> {
    let b = params.kappa * (params.theta - v);
    std::iter::once(x * params.r).chain(kappa.iter().map(|k| b * k)).collect()
}

/// Biased sample variance, `(1/N) Σ (x - x̄)²`.
pub fn variance_loss(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Dimension("variance needs at least two samples".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    Ok(samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Payoff {
    #[default]
    Call,
    Put,
}

impl Payoff {
    pub fn eval(self, spot: f64, strike: f64) -> f64 {
        match self {
            Payoff::Call => (spot - strike).max(0.0),
            Payoff::Put => (strike - spot).max(0.0),
        }
    }
}

/// Coarse grid `τ_i` as fine indices `round(i n / m)`.
pub fn coarse_grid(n: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::InvalidGrid(format!("need 1 ≤ m ≤ n, got m = {m}, n = {n}")));
    }
    Ok((0..=m).map(|i| ((i * n) as f64 / m as f64).round() as usize).collect())
}

/// Network inputs and aggregated increments on the coarse grid, per path.
#[derive(Debug, Clone)]
pub struct BsdeData {
    pub params: ModelParams,
    pub maturity: f64,
    pub p: usize,
    pub coarse_indices: Vec<usize>,
    pub coarse_times: Vec<f64>,
    /// `m` blocks of `[n_paths × (1+p)]`: `(S_{τ_i}, θ^{τ_i}_1..θ^{τ_i}_p)`.
    pub features: Vec<Array2<f64>>,
    /// `[n_paths × m]`, `√V_{τ_i}`.
    pub sqrt_v: Array2<f64>,
    /// `m` blocks of `[n_paths × 2]`: `(ΔB⊥, ΔB)` over `[τ_i, τ_{i+1}]`.
    pub increments: Vec<Array2<f64>>,
    pub s_terminal: Array1<f64>,
}

impl BsdeData {
    pub fn from_batch(batch: &PathBatch, tables: &KernelTables, m: usize, p: usize) -> Result<Self> {
        let grid = batch.grid;
        if tables.grid != grid {
            return Err(Error::Dimension("kernel tables built for another grid".into()));
        }
        let prm = batch.params;
        let coarse = coarse_grid(grid.n(), m)?;
        let n_paths = batch.n_paths();
        let rho_bar = (1.0 - prm.rho * prm.rho).max(0.0).sqrt();

        let mut features = Vec::with_capacity(m);
        let mut increments = Vec::with_capacity(m);
        let mut sqrt_v = Array2::zeros((n_paths, m));
        for i in 0..m {
            let (c, c_next) = (coarse[i], coarse[i + 1]);
            let (_, idx, _) = bucket_layout(&grid, c, p, prm.alpha)?;
            let mut f = Array2::zeros((n_paths, 1 + p));
            let mut d = Array2::zeros((n_paths, 2));
            for path in 0..n_paths {
                f[[path, 0]] = batch.s[[path, c]];
                let theta = theta_at(batch, tables, path, c, &idx);
                for (a, th) in theta.into_iter().enumerate() {
                    f[[path, 1 + a]] = th;
                }
                sqrt_v[[path, i]] = batch.v[[path, c]].max(0.0).sqrt();
                let mut db = 0.0;
                let mut dperp = 0.0;
                for j in c..c_next {
                    let bb = batch.bbar[[path, j]];
                    db += bb;
                    if rho_bar > 0.0 {
                        dperp += (batch.w[[path, j]] - prm.rho * bb) / rho_bar;
                    }
                }
                d[[path, 0]] = dperp;
                d[[path, 1]] = db;
            }
            features.push(f);
            increments.push(d);
        }
        Ok(BsdeData {
            params: prm,
            maturity: grid.maturity(),
            p,
            coarse_times: coarse.iter().map(|&c| grid.time(c)).collect(),
            coarse_indices: coarse,
            features,
            sqrt_v,
            increments,
            s_terminal: batch.terminal_spots().to_owned(),
        })
    }

    pub fn n_paths(&self) -> usize {
        self.s_terminal.len()
    }

    pub fn m(&self) -> usize {
        self.features.len()
    }

    /// `Δ_{i+1} = τ_{i+1} - τ_i`.
    pub fn step(&self, i: usize) -> f64 {
        self.coarse_times[i + 1] - self.coarse_times[i]
    }

    /// `c_i = Π_{l<i} (1 - r Δ_{l+1})`, for `i = 0..=m`.
    pub fn backward_discounts(&self) -> Vec<f64> {
        let mut c = vec![1.0; self.m() + 1];
        for i in 0..self.m() {
            c[i + 1] = c[i] * (1.0 - self.params.r * self.step(i));
        }
        c
    }

    /// `Π_{l≥i} (1 + r Δ_{l+1})`, for `i = 0..=m`.
    pub fn forward_growth(&self) -> Vec<f64> {
        let m = self.m();
        let mut g = vec![1.0; m + 1];
        for i in (0..m).rev() {
            g[i] = g[i + 1] * (1.0 + self.params.r * self.step(i));
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    /// `P_0` emerges per path from the terminal payoff; loss is its variance.
    #[default]
    Backward,
    /// Trainable `P_0` and `Z_0` per strike, rolled forward to match `g(S_T)`.
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BsdeHyper {
    /// Coarse steps, one network each.
    pub m: usize,
    pub layers: usize,
    pub neurons: usize,
    pub lr: f64,
    pub iterations: usize,
    /// Paths per minibatch; every path carries all strikes.
    pub batch_size: usize,
    /// Forward-curve basis dimension.
    pub p: usize,
    /// Fraction of iterations run with Adam before switching to SGD.
    pub adam_fraction: f64,
    /// Simulate fresh paths every iteration instead of shuffling the pool.
    pub resample: bool,
    pub mode: RolloutMode,
    /// Minibatches averaged for the reported price; 0 uses the whole pool.
    pub eval_batches: usize,
}

impl Default for BsdeHyper {
    fn default() -> Self {
        BsdeHyper {
            m: 5,
            layers: 3,
            neurons: 5,
            lr: 0.2,
            iterations: 1000,
            batch_size: 256,
            p: 10,
            adam_fraction: 0.7,
            resample: false,
            mode: RolloutMode::Backward,
            eval_batches: 0,
        }
    }
}

impl BsdeHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.m == 0 || self.layers == 0 || self.neurons == 0 || self.p == 0 {
            return bad("m, layers, neurons and p must be positive".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.adam_fraction) {
            return bad(format!("bad learning schedule lr={} adam_fraction={}", self.lr, self.adam_fraction));
        }
        Ok(())
    }

    pub fn net_dims(&self) -> Vec<usize> {
        let mut d = vec![self.p + 2];
        d.extend(std::iter::repeat_n(self.neurons, self.layers));
        d.push(2);
        d
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    /// Batch-mean `P_0` per strike (the trainable `P_0` in forward mode).
    pub mean_p0: Vec<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Forward-mode anchor: `P_0` per strike followed by `Z_0` per strike.
#[derive(Debug, Clone, PartialEq)]
struct Anchor {
    values: Vec<f64>,
    optim: OptimState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsdeModel {
    pub hyper: BsdeHyper,
    pub nets: Vec<DenseNet>,
    optims: Vec<OptimState>,
    input_mean: Vec<Array1<f64>>,
    input_std: Vec<Array1<f64>>,
    standardised: bool,
    anchor: Option<Anchor>,
    rng: ChaCha8Rng,
}

// Keeps the training stream apart from the path streams 0..n_paths.
const TRAIN_STREAM: u64 = 1 << 63;

impl BsdeModel {
    pub fn new(hyper: BsdeHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TRAIN_STREAM);
        let dims = hyper.net_dims();
        let nets = (0..hyper.m).map(|_| DenseNet::new(&dims, &mut rng)).collect::<Result<Vec<_>>>()?;
        let optims = nets
            .iter()
            .map(|n| OptimState::with_schedule(n.n_params(), hyper.lr, hyper.iterations as u64, hyper.adam_fraction))
            .collect::<Result<Vec<_>>>()?;
        Ok(BsdeModel {
            hyper,
            input_mean: vec![Array1::zeros(hyper.p + 2); hyper.m],
            input_std: vec![Array1::ones(hyper.p + 2); hyper.m],
            standardised: false,
            nets,
            optims,
            anchor: None,
            rng,
        })
    }

    pub fn m(&self) -> usize {
        self.hyper.m
    }

    /// Trainable forward-mode `P_0` per strike, once training has started.
    pub fn anchor_prices(&self) -> Option<&[f64]> {
        self.anchor.as_ref().map(|a| {
            let nk = a.values.len() / 3;
            &a.values[..nk]
        })
    }

    fn check_data(&self, data: &BsdeData) -> Result<()> {
        if data.m() != self.m() || data.p != self.hyper.p {
            return Err(Error::Dimension(format!(
                "data built for m={}, p={}; model has m={}, p={}",
                data.m(),
                data.p,
                self.m(),
                self.hyper.p
            )));
        }
        Ok(())
    }

    /// Raw inputs for net `i`, strike-major rows: row `k·N + j` is path
    /// `paths[j]` with strike `strikes[k]`.
    fn raw_inputs(data: &BsdeData, i: usize, paths: &[usize], strikes: &[f64]) -> Array2<f64> {
        let n = paths.len();
        let d = data.p + 2;
        let f = &data.features[i];
        let mut x = Array2::zeros((n * strikes.len(), d));
        for (k, &strike) in strikes.iter().enumerate() {
            for (j, &path) in paths.iter().enumerate() {
                let mut row = x.row_mut(k * n + j);
                row.slice_mut(s![..d - 1]).assign(&f.row(path));
                row[d - 1] = strike;
            }
        }
        x
    }

    fn inputs(&self, data: &BsdeData, i: usize, paths: &[usize], strikes: &[f64]) -> Array2<f64> {
        let x = Self::raw_inputs(data, i, paths, strikes);
        (x - &self.input_mean[i]) / &self.input_std[i]
    }

    fn fit_standardisation(&mut self, data: &BsdeData, paths: &[usize], strikes: &[f64]) {
        for i in 0..self.m() {
            let x = Self::raw_inputs(data, i, paths, strikes);
            self.input_mean[i] = x.mean_axis(Axis(0)).unwrap();
            self.input_std[i] = x.var_axis(Axis(0), 0.0).mapv(|v| {
                let s = v.sqrt();
                if s < 1e-12 { 1.0 } else { s }
            });
        }
        self.standardised = true;
    }

    /// `Z_i` per row: `√V_{τ_i}` times the network output, so that `Z`
    /// vanishes with the diffusion.
    fn z(&mut self, data: &BsdeData, i: usize, paths: &[usize], strikes: &[f64], training: bool) -> Result<(Array2<f64>, ForwardCache)> {
        let x = self.inputs(data, i, paths, strikes);
        let (mut out, cache) = self.nets[i].forward(x.view(), training)?;
        let n = paths.len();
        for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row *= data.sqrt_v[[paths[r % n], i]];
        }
        Ok((out, cache))
    }

    fn dot_increment(z: &Array2<f64>, data: &BsdeData, i: usize, paths: &[usize]) -> Array1<f64> {
        let n = paths.len();
        let inc = &data.increments[i];
        Array1::from_shape_fn(z.nrows(), |r| {
            let p = paths[r % n];
            z[[r, 0]] * inc[[p, 0]] + z[[r, 1]] * inc[[p, 1]]
        })
    }

    fn payoffs(data: &BsdeData, paths: &[usize], strikes: &[f64], payoff: Payoff) -> Array2<f64> {
        Array2::from_shape_fn((strikes.len(), paths.len()), |(k, j)| payoff.eval(data.s_terminal[paths[j]], strikes[k]))
    }

    /// Per-path `P̂_0` as `[n_strikes × paths.len()]`, networks in inference
    /// mode.
    pub fn backward_rollout(&mut self, data: &BsdeData, paths: &[usize], strikes: &[f64], payoff: Payoff) -> Result<Array2<f64>> {
        self.check_data(data)?;
        Ok(self.backward_pass(data, paths, strikes, payoff, false)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn backward_pass(
        &mut self,
        data: &BsdeData,
        paths: &[usize],
        strikes: &[f64],
        payoff: Payoff,
        training: bool,
    ) -> Result<(Array2<f64>, Vec<ForwardCache>)> {
        let c = data.backward_discounts();
        let m = self.m();
        let mut p0 = Self::payoffs(data, paths, strikes, payoff) * c[m];
        let mut caches = Vec::with_capacity(m);
        for i in 0..m {
            let (z, cache) = self.z(data, i, paths, strikes, training)?;
            let zw = Self::dot_increment(&z, data, i, paths);
            let zw = zw.into_shape_with_order((strikes.len(), paths.len())).expect("row layout");
            p0.scaled_add(-c[i], &zw);
            caches.push(cache);
        }
        Ok((p0, caches))
    }

    /// Forward recursion `P_{i+1} = (1 + r Δ) P_i + Z_i · ΔW_i` from per-row
    /// starting values, networks in inference mode. Returns `P_m`.
    pub fn forward_rollout(&mut self, data: &BsdeData, paths: &[usize], strikes: &[f64], p0: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_data(data)?;
        if p0.dim() != (strikes.len(), paths.len()) {
            return Err(Error::Dimension("starting values must be [n_strikes × n_paths]".into()));
        }
        let mut p = p0.to_owned();
        for i in 0..self.m() {
            let (z, _) = self.z(data, i, paths, strikes, false)?;
            let zw = Self::dot_increment(&z, data, i, paths);
            p *= 1.0 + data.params.r * data.step(i);
            p += &zw.into_shape_with_order((strikes.len(), paths.len())).expect("row layout");
        }
        Ok(p)
    }

    /// Mean and standard error of `P̂_0` per strike, in inference mode, over
    /// the whole pool or over `eval_batches` random minibatches. In forward mode the trained `P_0` is returned with a
    /// zero error.
    pub fn price(&mut self, data: &BsdeData, strikes: &[f64], payoff: Payoff) -> Result<Vec<(f64, f64)>> {
        self.check_data(data)?;
        if self.hyper.mode == RolloutMode::Forward {
            if let Some(a) = self.anchor_prices() {
                if a.len() == strikes.len() {
                    return Ok(a.iter().map(|&p| (p, 0.0)).collect());
                }
            }
            return Err(Error::Dimension("forward-mode model was trained on other strikes".into()));
        }
        if data.n_paths() == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut chosen: Vec<usize> = (0..data.n_paths()).collect();
        if self.hyper.eval_batches > 0 {
            chosen.shuffle(&mut self.rng);
            chosen.truncate(self.hyper.eval_batches * self.hyper.batch_size);
        }
        let n = chosen.len();
        let mut sum = vec![0.0; strikes.len()];
        let mut sum_sq = vec![0.0; strikes.len()];
        for chunk in chosen.chunks(4096) {
            let p0 = self.backward_pass(data, chunk, strikes, payoff, false)?.0;
            for (k, row) in p0.axis_iter(Axis(0)).enumerate() {
                sum[k] += row.sum();
                sum_sq[k] += row.mapv(|v| v * v).sum();
            }
        }
        let nf = n as f64;
        Ok(sum
            .iter()
            .zip(&sum_sq)
            .map(|(&s, &q)| {
                let mean = s / nf;
                let var = if n > 1 { ((q - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
                (mean, (var / nf).sqrt())
            })
            .collect())
    }

    /// One optimisation step on the given paths. Returns the loss and the
    /// per-strike mean `P_0` before the update.
    pub fn train_step(&mut self, data: &BsdeData, paths: &[usize], strikes: &[f64], payoff: Payoff) -> Result<(f64, Vec<f64>)> {
        self.check_data(data)?;
        if paths.len() < 2 {
            return Err(Error::Dimension("training batch needs at least two paths".into()));
        }
        if !self.standardised {
            self.fit_standardisation(data, paths, strikes);
        }
        match self.hyper.mode {
            RolloutMode::Backward => self.backward_step(data, paths, strikes, payoff),
            RolloutMode::Forward => self.forward_step(data, paths, strikes, payoff),
        }
    }

    fn backward_step(&mut self, data: &BsdeData, paths: &[usize], strikes: &[f64], payoff: Payoff) -> Result<(f64, Vec<f64>)> {
        let n = paths.len();
        let nf = n as f64;
        let (p0, caches) = self.backward_pass(data, paths, strikes, payoff, true)?;
        let means = p0.mean_axis(Axis(1)).unwrap();
        let dev = &p0 - &means.view().insert_axis(Axis(1));
        let loss = dev.mapv(|d| d * d).sum() / nf;
        // dL/dP0 for each row, in the same strike-major order as the net inputs
        let dp0 = (dev * (2.0 / nf)).into_shape_with_order(strikes.len() * n).expect("contiguous");
        let c = data.backward_discounts();
        for (i, cache) in caches.iter().enumerate() {
            let dout = Self::output_gradient(data, i, paths, dp0.len(), |r| -c[i] * dp0[r]);
            let g = self.nets[i].backward(cache, dout.view())?;
            self.optims[i].step(self.nets[i].params_mut(), &g)?;
        }
        Ok((loss, means.to_vec()))
    }

    // dL/d(net output) for net i, given dL/d(Z·ΔW) for each of the `rows` rows.
    fn output_gradient(data: &BsdeData, i: usize, paths: &[usize], rows: usize, dzw: impl Fn(usize) -> f64) -> Array2<f64> {
        let n = paths.len();
        let inc = &data.increments[i];
        Array2::from_shape_fn((rows, 2), |(r, col)| {
            let p = paths[r % n];
            dzw(r) * inc[[p, col]] * data.sqrt_v[[p, i]]
        })
    }

    fn forward_step(&mut self, data: &BsdeData, paths: &[usize], strikes: &[f64], payoff: Payoff) -> Result<(f64, Vec<f64>)> {
        let n = paths.len();
        let nf = n as f64;
        let nk = strikes.len();
        let rows = n * nk;
        if self.anchor.as_ref().is_none_or(|a| a.values.len() != 3 * nk) {
            // P_0 starts at the batch-mean discounted payoff, Z_0 at zero
            let g = Self::payoffs(data, paths, strikes, payoff);
            let c = data.backward_discounts()[self.m()];
            let mut values = vec![0.0; 3 * nk];
            for k in 0..nk {
                values[k] = c * g.row(k).mean().unwrap();
            }
            let optim = OptimState::with_schedule(3 * nk, self.hyper.lr, self.hyper.iterations as u64, self.hyper.adam_fraction)?;
            self.anchor = Some(Anchor { values, optim });
        }
        let anchor = self.anchor.as_ref().expect("set above").values.clone();
        let growth = data.forward_growth();

        // P_m = G_0 P_0 + Σ_i G_{i+1} Z_i·ΔW_i, with G_i = Π_{l≥i}(1 + rΔ_{l+1})
        let mut pm = Array2::from_shape_fn((nk, n), |(k, _)| growth[0] * anchor[k]);
        let inc0 = &data.increments[0];
        let sv0 = data.params.v0.max(0.0).sqrt();
        for k in 0..nk {
            for (j, &p) in paths.iter().enumerate() {
                let zw = sv0 * (anchor[nk + 2 * k] * inc0[[p, 0]] + anchor[nk + 2 * k + 1] * inc0[[p, 1]]);
                pm[[k, j]] += growth[1] * zw;
            }
        }
        let mut caches = Vec::with_capacity(self.m());
        for i in 1..self.m() {
            let (z, cache) = self.z(data, i, paths, strikes, true)?;
            let zw = Self::dot_increment(&z, data, i, paths).into_shape_with_order((nk, n)).expect("row layout");
            pm.scaled_add(growth[i + 1], &zw);
            caches.push(cache);
        }
        let resid = pm - Self::payoffs(data, paths, strikes, payoff);
        let loss = resid.mapv(|d| d * d).sum() / nf;
        let dpm = (resid * (2.0 / nf)).into_shape_with_order(rows).expect("contiguous");

        for (i, cache) in (1..self.m()).zip(&caches) {
            let dout = Self::output_gradient(data, i, paths, rows, |r| growth[i + 1] * dpm[r]);
            let g = self.nets[i].backward(cache, dout.view())?;
            self.optims[i].step(self.nets[i].params_mut(), &g)?;
        }
        let mut ga = vec![0.0; 3 * nk];
        for k in 0..nk {
            for (j, &p) in paths.iter().enumerate() {
                let d = dpm[k * n + j];
                ga[k] += growth[0] * d;
                ga[nk + 2 * k] += growth[1] * d * sv0 * inc0[[p, 0]];
                ga[nk + 2 * k + 1] += growth[1] * d * sv0 * inc0[[p, 1]];
            }
        }
        let a = self.anchor.as_mut().expect("set above");
        a.optim.step(&mut a.values, &ga)?;
        Ok((loss, anchor[..nk].to_vec()))
    }

    /// Runs `hyper.iterations` steps on minibatches of `data`, shuffled once per
    /// epoch. With `resample`, each step instead simulates a fresh batch.
    pub fn train(
        &mut self,
        data: &BsdeData,
        tables: &KernelTables,
        strikes: &[f64],
        payoff: Payoff,
        mut log: Option<&mut dyn Write>,
    ) -> Result<TrainSummary> {
        self.check_data(data)?;
        let start = Instant::now();
        let batch = self.hyper.batch_size.min(data.n_paths());
        if batch < 2 {
            return Err(Error::EmptyBatch);
        }
        let mut order: Vec<usize> = (0..data.n_paths()).collect();
        let mut cursor = order.len();
        let mut initial_loss = f64::NAN;
        let mut final_loss = f64::NAN;
        let fresh_paths: Vec<usize> = (0..self.hyper.batch_size).collect();
        for it in 0..self.hyper.iterations {
            let (loss, means) = if self.hyper.resample {
                let seed = rand::Rng::random::<u64>(&mut self.rng);
                let fresh = simulate_with_tables(&data.params, tables, self.hyper.batch_size, seed)?;
                let fresh = BsdeData::from_batch(&fresh, tables, self.m(), self.hyper.p)?;
                self.train_step(&fresh, &fresh_paths, strikes, payoff)?
            } else {
                if cursor + batch > order.len() {
                    order.shuffle(&mut self.rng);
                    cursor = 0;
                }
                let idx = order[cursor..cursor + batch].to_vec();
                cursor += batch;
                self.train_step(data, &idx, strikes, payoff)?
            };
            if !loss.is_finite() || means.iter().any(|m| !m.is_finite()) {
                return Err(Error::TrainingDiverged { iteration: it, loss });
            }
            if it == 0 {
                initial_loss = loss;
            }
            final_loss = loss;
            if let Some(w) = log.as_deref_mut() {
                let rec = LogRecord { iteration: it, loss, mean_p0: means, wall_seconds: start.elapsed().as_secs_f64() };
                serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::Format(e.to_string()))?;
                w.write_all(b"\n")?;
            }
        }
        Ok(TrainSummary { iterations: self.hyper.iterations, initial_loss, final_loss })
    }

    /// Checkpoint: the hyper-parameters as one JSON line, then each network
    /// in the `nn` binary layout.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.hyper).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        for net in &self.nets {
            net.write_checkpoint(&mut w)?;
        }
        Ok(())
    }
}

/// Prices and wall-clock split for one maturity.
#[derive(Debug, Clone)]
pub struct BsdeRun {
    pub maturity: f64,
    pub prices: Vec<(f64, f64)>,
    pub smile: Vec<SmilePoint>,
    pub summary: TrainSummary,
    pub build_seconds: f64,
    pub train_seconds: f64,
    pub price_seconds: f64,
}

/// Simulate the pool, train, and price one maturity's strike grid.
pub fn solve(
    params: &ModelParams,
    grid: GridSpec,
    hyper: BsdeHyper,
    n_paths: usize,
    log_moneyness: &[f64],
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<BsdeRun> {
    params.validate()?;
    let t0 = Instant::now();
    let tables = KernelTables::new(grid, params.alpha, params.rho)?;
    let batch = simulate_with_tables(params, &tables, n_paths, seed)?;
    let data = BsdeData::from_batch(&batch, &tables, hyper.m, hyper.p)?;
    drop(batch);
    let build_seconds = t0.elapsed().as_secs_f64();

    let strikes: Vec<f64> = log_moneyness.iter().map(|k| params.s0 * k.exp()).collect();
    let t1 = Instant::now();
    let mut model = BsdeModel::new(hyper, seed)?;
    let summary = model.train(&data, &tables, &strikes, Payoff::Call, log)?;
    let train_seconds = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let prices = model.price(&data, &strikes, Payoff::Call)?;
    let price_seconds = t2.elapsed().as_secs_f64();
    let smile = log_moneyness
        .iter()
        .zip(&prices)
        .map(|(&k, &(price, _))| SmilePoint {
            log_moneyness: k,
            maturity: grid.maturity(),
            price,
            vol: implied_vol(price, params.s0, params.s0 * k.exp(), grid.maturity(), params.r).ok(),
        })
        .collect();
    Ok(BsdeRun { maturity: grid.maturity(), prices, smile, summary, build_seconds, train_seconds, price_seconds })
}

/// Smile per maturity for one network configuration.
pub fn price_smile(
    params: &ModelParams,
    hyper: BsdeHyper,
    fine_steps: usize,
    n_paths: usize,
    maturities: &[f64],
    log_moneyness: &[f64],
    seed: u64,
) -> Result<Vec<Vec<SmilePoint>>> {
    maturities
        .iter()
        .map(|&t| {
            let grid = GridSpec::new(fine_steps, t)?;
            Ok(solve(params, grid, hyper, n_paths, log_moneyness, seed, None)?.smile)
        })
        .collect()
}
