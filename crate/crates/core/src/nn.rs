//! Small fully connected networks: affine layers, batch normalisation and ReLU,
//! with hand-written backpropagation and an Adam/SGD optimiser.
//!
//! All trainable parameters of a net live in one flat vector so the optimiser
//! and the checkpoint format never need to know the layer structure. Layer `l`
//! with fan-in `a` and fan-out `b` occupies, in order: the weight matrix
//! (`a × b`, row-major, input index first), the bias `δ` (`b`), and for hidden
//! layers the batch-norm scale `γ` (`b`) and offset `β` (`b`).

use std::io::{Read, Write};
use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-6;
pub const BN_MOMENTUM: f64 = 0.99;

const CHECKPOINT_MAGIC: &[u8; 4] = b"RHNN";
const CHECKPOINT_VERSION: u32 = 1;

/// Where one layer's parameters sit inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRanges {
    pub weights: Range<usize>,
    pub bias: Range<usize>,
    pub gamma: Option<Range<usize>>,
    pub beta: Option<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    layers: Vec<LayerRanges>,
    params: Vec<f64>,
    running_mean: Vec<Array1<f64>>,
    running_std: Vec<Array1<f64>>,
}

/// Intermediates kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    training: bool,
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    // hidden layers only
    xhat: Option<Array2<f64>>,
    std: Option<Array1<f64>>,
    pre_activation: Option<Array2<f64>>,
}

impl ForwardCache {
    /// Smallest |pre-activation| over all hidden units and rows; values near
    /// zero sit on a ReLU kink.
    pub fn min_abs_pre_activation(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| l.pre_activation.as_ref())
            .flat_map(|y| y.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Which hidden units are active, row by row.
    fn relu_pattern(&self) -> Vec<bool> {
        self.layers
            .iter()
            .filter_map(|l| l.pre_activation.as_ref())
            .flat_map(|y| y.iter().map(|&v| v > 0.0))
            .collect()
    }
}

fn layout(dims: &[usize]) -> (Vec<LayerRanges>, usize) {
    let mut off = 0;
    let mut take = |len: usize| {
        let r = off..off + len;
        off += len;
        r
    };
    let n = dims.len() - 1;
    let layers = (0..n)
        .map(|l| {
            let (a, b) = (dims[l], dims[l + 1]);
            let hidden = l + 1 < n;
            LayerRanges {
                weights: take(a * b),
                bias: take(b),
                gamma: hidden.then(|| take(b)),
                beta: hidden.then(|| take(b)),
            }
        })
        .collect();
    (layers, off)
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases, `γ = 1`, `β = 0`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        for l in 0..net.layers.len() {
            let lim = (6.0 / (dims[l] + dims[l + 1]) as f64).sqrt();
            let r = net.layers[l].clone();
            for w in &mut net.params[r.weights] {
                *w = rng.random_range(-lim..=lim);
            }
            if let Some(g) = r.gamma {
                net.params[g].fill(1.0);
            }
        }
        Ok(net)
    }

    /// All parameters zero, running statistics at mean 0 and std 1.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Dimension(format!("bad layer dims {dims:?}")));
        }
        let (layers, n_params) = layout(dims);
        let hidden = &dims[1..dims.len() - 1];
        Ok(Self {
            dims: dims.to_vec(),
            layers,
            params: vec![0.0; n_params],
            running_mean: hidden.iter().map(|&b| Array1::zeros(b)).collect(),
            running_std: hidden.iter().map(|&b| Array1::ones(b)).collect(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Number of affine layers, output layer included.
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn ranges(&self, layer: usize) -> &LayerRanges {
        &self.layers[layer]
    }

    /// Running `(mean, std)` of hidden layer `layer`.
    pub fn running_stats(&self, layer: usize) -> (&Array1<f64>, &Array1<f64>) {
        (&self.running_mean[layer], &self.running_std[layer])
    }

    pub fn set_running_stats(&mut self, layer: usize, mean: Array1<f64>, std: Array1<f64>) {
        assert_eq!(mean.len(), self.dims[layer + 1]);
        assert_eq!(std.len(), self.dims[layer + 1]);
        self.running_mean[layer] = mean;
        self.running_std[layer] = std;
    }

    fn weights(&self, l: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.dims[l], self.dims[l + 1]), &self.params[self.layers[l].weights.clone()])
            .expect("layout")
    }

    fn vec(&self, r: &Range<usize>) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[r.clone()])
    }

    /// Training pass: batch statistics, running averages updated.
    pub fn forward_train(&mut self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if x.nrows() < 2 {
            return Err(Error::Dimension("training batch needs at least two rows".into()));
        }
        let (out, cache, stats) = self.run(x, true)?;
        for (l, (mean, std)) in stats.into_iter().enumerate() {
            self.running_mean[l] = &self.running_mean[l] * BN_MOMENTUM + &(mean * (1.0 - BN_MOMENTUM));
            self.running_std[l] = &self.running_std[l] * BN_MOMENTUM + &(std * (1.0 - BN_MOMENTUM));
        }
        Ok((out, cache))
    }

    /// Inference pass on running statistics.
    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        let (out, cache, _) = self.run(x, false)?;
        Ok((out, cache))
    }

    pub fn forward(&mut self, x: ArrayView2<f64>, training: bool) -> Result<(Array2<f64>, ForwardCache)> {
        if training {
            self.forward_train(x)
        } else {
            self.forward_eval(x)
        }
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        x: ArrayView2<f64>,
        training: bool,
    ) -> Result<(Array2<f64>, ForwardCache, Vec<(Array1<f64>, Array1<f64>)>)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} columns, net expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut layers = Vec::with_capacity(self.n_layers());
        let mut stats = Vec::new();
        let mut h = x.to_owned();
        for l in 0..self.n_layers() {
            let r = &self.layers[l];
            let mut z = h.dot(&self.weights(l));
            z += &self.vec(&r.bias);
            let input = std::mem::take(&mut h);
            let (Some(g), Some(b)) = (&r.gamma, &r.beta) else {
                layers.push(LayerCache { input, xhat: None, std: None, pre_activation: None });
                h = z;
                break;
            };
            let (mean, std) = if training {
                let mean = z.mean_axis(Axis(0)).unwrap();
                let var = z.var_axis(Axis(0), 0.0);
                let std = var.mapv(|v| (v + BN_EPS).sqrt());
                stats.push((mean.clone(), std.clone()));
                (mean, std)
            } else {
                (self.running_mean[l].clone(), self.running_std[l].clone())
            };
            let xhat = (z - &mean) / &std;
            let y = &xhat * &self.vec(g) + &self.vec(b);
            h = y.mapv(|v| v.max(0.0));
            layers.push(LayerCache { input, xhat: Some(xhat), std: Some(std), pre_activation: Some(y) });
        }
        Ok((h, ForwardCache { training, layers }, stats))
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the net outputs.
    pub fn backward(&self, cache: &ForwardCache, dout: ArrayView2<f64>) -> Result<Vec<f64>> {
        if cache.layers.len() != self.n_layers() || dout.ncols() != self.output_dim() {
            return Err(Error::Dimension("cache or output gradient does not match the net".into()));
        }
        let mut grads = vec![0.0; self.n_params()];
        let mut d = dout.to_owned();
        for l in (0..self.n_layers()).rev() {
            let r = &self.layers[l];
            let c = &cache.layers[l];
            if let (Some(g), Some(b), Some(xhat), Some(std), Some(y)) =
                (&r.gamma, &r.beta, &c.xhat, &c.std, &c.pre_activation)
            {
                d.zip_mut_with(y, |dv, &yv| {
                    if yv <= 0.0 {
                        *dv = 0.0;
                    }
                });
                accumulate(&mut grads[b.clone()], d.sum_axis(Axis(0)));
                accumulate(&mut grads[g.clone()], (&d * xhat).sum_axis(Axis(0)));
                let dxhat = &d * &self.vec(g);
                d = if cache.training {
                    let m1 = dxhat.mean_axis(Axis(0)).unwrap();
                    let m2 = (&dxhat * xhat).mean_axis(Axis(0)).unwrap();
                    (dxhat - &m1 - &(xhat * &m2)) / std
                } else {
                    dxhat / std
                };
            }
            let w_grad = c.input.t().dot(&d);
            for (g, v) in grads[r.weights.clone()].iter_mut().zip(w_grad.iter()) {
                *g = *v;
            }
            accumulate(&mut grads[r.bias.clone()], d.sum_axis(Axis(0)));
            if l > 0 {
                d = d.dot(&self.weights(l).t());
            }
        }
        Ok(grads)
    }

    /// Layout (little-endian): magic `RHNN`, version u32, layer count u32,
    /// dims as u64, parameter count u64, parameters as f64, then for each
    /// hidden layer its running means followed by its running stds.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        let stats = self.running_mean.iter().zip(&self.running_std).flat_map(|(m, s)| m.iter().chain(s));
        for v in self.params.iter().chain(stats) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a network checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n_dims = read_u32(&mut r)? as usize;
        if n_dims > 1024 {
            return Err(Error::Format(format!("implausible layer count {n_dims}")));
        }
        let dims = (0..n_dims).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let mut net = Self::zeros(&dims).map_err(|e| Error::Format(e.to_string()))?;
        if read_u64(&mut r)? as usize != net.n_params() {
            return Err(Error::Format("parameter count does not match dims".into()));
        }
        for p in net.params.iter_mut() {
            *p = read_f64(&mut r)?;
        }
        for (m, s) in net.running_mean.iter_mut().zip(net.running_std.iter_mut()) {
            for v in m.iter_mut().chain(s.iter_mut()) {
                *v = read_f64(&mut r)?;
            }
        }
        Ok(net)
    }
}

fn accumulate(dst: &mut [f64], src: Array1<f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

// Probe loss for gradient checks: Σ c ⊙ out + ½ Σ out², so dL/dout = c + out.
fn probe_loss(out: &Array2<f64>, c: &Array2<f64>) -> (f64, Array2<f64>) {
    let loss = (out * c).sum() + 0.5 * out.mapv(|v| v * v).sum();
    (loss, c + out)
}

/// Worst per-parameter relative error between [`DenseNet::backward`] and
/// fourth-order central differences (h = 1e-4) of the loss `Σ c ⊙ out + ½ Σ out²`.
///
/// The denominator is floored at 1e-4: biases feeding batch norm have an exactly
/// zero gradient, where finite differences only return rounding noise.
/// Returns `None` when a pre-activation lies within 1e-3 of a ReLU kink or a
/// probe flips any ReLU: the loss is not smooth across those points.
pub fn gradient_check(net: &DenseNet, x: ArrayView2<f64>, c: ArrayView2<f64>, training: bool) -> Result<Option<f64>> {
    let c = c.to_owned();
    let fwd = |n: &DenseNet| n.run(x, training).map(|(out, cache, _)| (out, cache));
    let (out, cache) = fwd(net)?;
    if out.dim() != c.dim() {
        return Err(Error::Dimension("probe weights must match the output shape".into()));
    }
    if cache.min_abs_pre_activation() < 1e-3 {
        return Ok(None);
    }
    let grads = net.backward(&cache, probe_loss(&out, &c).1.view())?;
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let pattern = cache.relu_pattern();
    let mut probe = net.clone();
    for i in 0..net.n_params() {
        let p = net.params[i];
        let mut at = |d: f64| -> Result<Option<f64>> {
            probe.params[i] = p + d;
            let (out, cache) = fwd(&probe)?;
            Ok((cache.relu_pattern() == pattern).then(|| probe_loss(&out, &c).0))
        };
        let (Some(a), Some(b), Some(c2), Some(d)) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?) else {
            return Ok(None);
        };
        let fd = (8.0 * (a - b) - (c2 - d)) / (12.0 * h);
        probe.params[i] = p;
        let scale = grads[i].abs().max(fd.abs()).max(1e-4);
        worst = worst.max((grads[i] - fd).abs() / scale);
    }
    Ok(Some(worst))
}

/// Moves biases, `γ` and `β` away from their initial values so that every
/// parameter influences the output.
pub fn randomise_affine<R: Rng + ?Sized>(net: &mut DenseNet, rng: &mut R) {
    for l in 0..net.n_layers() {
        let r = net.ranges(l).clone();
        if let (Some(g), Some(b)) = (r.gamma, r.beta) {
            for v in &mut net.params[g] {
                *v = rng.random_range(0.5..1.5);
            }
            for v in &mut net.params[b] {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        for v in &mut net.params[r.bias] {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum OptimMode {
    Adam,
    Sgd,
}

/// Adam for the first `switch_iteration` steps, plain gradient descent after.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    lr: f64,
    step: u64,
    switch_iteration: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimState {
    pub fn new(n_params: usize, lr: f64, switch_iteration: u64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParams(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            step: 0,
            switch_iteration,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        })
    }

    /// Adam for `fraction` of `iterations`, rounded down.
    pub fn with_schedule(n_params: usize, lr: f64, iterations: u64, fraction: f64) -> Result<Self> {
        Self::new(n_params, lr, (iterations as f64 * fraction).floor() as u64)
    }

    pub fn sgd(n_params: usize, lr: f64) -> Result<Self> {
        Self::new(n_params, lr, 0)
    }

    pub fn mode(&self) -> OptimMode {
        if self.step < self.switch_iteration {
            OptimMode::Adam
        } else {
            OptimMode::Sgd
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn switch_iteration(&self) -> u64 {
        self.switch_iteration
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimiser sized for {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let mode = self.mode();
        self.step += 1;
        match mode {
            OptimMode::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimMode::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn layout_is_contiguous() {
        let net = DenseNet::zeros(&[3, 5, 4, 2]).unwrap();
        assert_eq!(net.n_params(), (3 * 5 + 5 * 3) + (5 * 4 + 4 * 3) + (4 * 2 + 2));
        assert_eq!(net.ranges(2).gamma, None);
        assert_eq!(net.ranges(1).weights.start, net.ranges(0).beta.clone().unwrap().end);
        assert!(DenseNet::zeros(&[3]).is_err());
        assert!(DenseNet::zeros(&[3, 0, 1]).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::new(&[12, 5, 5, 5, 2], &mut rng).unwrap();
        for l in 0..net.n_layers() {
            let lim = (6.0 / (net.dims()[l] + net.dims()[l + 1]) as f64).sqrt();
            let r = net.ranges(l);
            assert!(net.params()[r.weights.clone()].iter().all(|w| w.abs() <= lim));
            assert!(net.params()[r.bias.clone()].iter().all(|&b| b == 0.0));
            if let Some(g) = &r.gamma {
                assert!(net.params()[g.clone()].iter().all(|&v| v == 1.0));
            }
        }
        for l in 0..3 {
            assert!(net.running_stats(l).1.iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn neutralised_batch_norm_gives_relu() {
        let x = array![[1.0, -2.0], [-0.5, 3.0], [2.0, 0.5], [-1.0, -1.0]];
        let mut net = DenseNet::zeros(&[2, 2, 2]).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        let std = x.var_axis(Axis(0), 0.0).mapv(|v| (v + BN_EPS).sqrt());
        let r0 = net.ranges(0).clone();
        let r1 = net.ranges(1).clone();
        let p = net.params_mut();
        p[r0.weights.clone()].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p[r0.gamma.unwrap()].copy_from_slice(std.as_slice().unwrap());
        p[r0.beta.unwrap()].copy_from_slice(mean.as_slice().unwrap());
        p[r1.weights].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let (out, _) = net.forward_train(x.view()).unwrap();
        for (o, v) in out.iter().zip(x.iter()) {
            assert!((o - v.max(0.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_column_normalises_to_zero() {
        let x = array![[2.0], [2.0], [2.0]];
        let mut net = DenseNet::zeros(&[1, 1, 1]).unwrap();
        let r = net.ranges(0).clone();
        net.params_mut()[r.weights].fill(1.0);
        net.params_mut()[r.gamma.unwrap()].fill(1.0);
        let (_, cache) = net.forward_train(x.view()).unwrap();
        let y = cache.layers[0].pre_activation.as_ref().unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hidden_unit_batch_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = DenseNet::new(&[4, 5, 5, 5, 2], &mut rng).unwrap();
        randomise_affine(&mut net, &mut rng);
        let x = random_batch(&mut rng, 64, 4);
        let (_, cache) = net.forward_train(x.view()).unwrap();
        for l in 0..3 {
            let r = net.ranges(l);
            let gamma = &net.params()[r.gamma.clone().unwrap()];
            let beta = &net.params()[r.beta.clone().unwrap()];
            let y = cache.layers[l].pre_activation.as_ref().unwrap();
            // direct statistics, computed without ndarray's reductions
            for j in 0..5 {
                let col: Vec<f64> = (0..64).map(|i| y[[i, j]]).collect();
                let mean = col.iter().sum::<f64>() / 64.0;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
                assert!((mean - beta[j]).abs() < 1e-6, "layer {l} unit {j} mean {mean}");
                assert!((var.sqrt() - gamma[j].abs()).abs() < 1e-3, "layer {l} unit {j} std");
            }
        }
    }

    #[test]
    fn running_averages_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = DenseNet::new(&[3, 5, 2], &mut rng).unwrap();
        let x = random_batch(&mut rng, 128, 3).mapv(|v| 2.0 + 3.0 * v);
        for _ in 0..1000 {
            net.forward_train(x.view()).unwrap();
        }
        let z = x.dot(&net.weights(0));
        let mean = z.mean_axis(Axis(0)).unwrap();
        let std = z.var_axis(Axis(0), 0.0).mapv(f64::sqrt);
        let (rm, rs) = net.running_stats(0);
        for j in 0..5 {
            assert!((rm[j] - mean[j]).abs() <= 0.02 * mean[j].abs().max(std[j]));
            assert!((rs[j] / std[j] - 1.0).abs() <= 0.02);
        }
        // eval on the same batch now matches training closely
        let (train, _) = net.clone().forward_train(x.view()).unwrap();
        let (eval, _) = net.forward_eval(x.view()).unwrap();
        assert!((&train - &eval).iter().all(|d| d.abs() < 1e-3));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 20 {
            let mut net = DenseNet::new(&[4, 5, 5, 5, 2], &mut rng).unwrap();
            randomise_affine(&mut net, &mut rng);
            let x = random_batch(&mut rng, 16, 4);
            let c = random_batch(&mut rng, 16, 2);
            for training in [true, false] {
                if let Some(err) = gradient_check(&net, x.view(), c.view(), training).unwrap() {
                    assert!(err <= 1e-5, "training={training} rel err {err}");
                    checked += 1;
                }
            }
        }
    }

    #[test]
    fn linear_net_normal_equations() {
        // dims [2, 1]: out = x w + δ; loss = ½ Σ (out − t)²
        let x = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        let t = array![[1.0], [0.0], [2.0]];
        let mut net = DenseNet::zeros(&[2, 1]).unwrap();
        net.params_mut().copy_from_slice(&[0.3, -0.2, 0.1]);
        let (out, cache) = net.forward_eval(x.view()).unwrap();
        let resid = &out - &t;
        let g = net.backward(&cache, resid.view()).unwrap();
        let xt_r = x.t().dot(&resid);
        assert!((g[0] - xt_r[[0, 0]]).abs() < 1e-15);
        assert!((g[1] - xt_r[[1, 0]]).abs() < 1e-15);
        assert!((g[2] - resid.sum()).abs() < 1e-15);
    }

    #[test]
    fn zero_output_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = DenseNet::new(&[3, 5, 5, 2], &mut rng).unwrap();
        let x = random_batch(&mut rng, 8, 3);
        let (_, cache) = net.forward_train(x.view()).unwrap();
        let g = net.backward(&cache, Array2::zeros((8, 2)).view()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_errors() {
        let mut net = DenseNet::zeros(&[3, 2]).unwrap();
        assert!(net.forward_eval(Array2::zeros((4, 2)).view()).is_err());
        assert!(net.forward_train(Array2::zeros((1, 3)).view()).is_err());
        let mut opt = OptimState::sgd(3, 0.1).unwrap();
        assert!(opt.step(&mut [0.0; 2], &[0.0; 2]).is_err());
        assert!(OptimState::sgd(3, 0.0).is_err());
    }

    #[test]
    fn sgd_step() {
        let mut opt = OptimState::sgd(2, 1.0).unwrap();
        let mut p = [1.0, -2.0];
        opt.step(&mut p, &[0.25, -0.5]).unwrap();
        assert_eq!(p, [0.75, -1.5]);
        assert_eq!(opt.mode(), OptimMode::Sgd);
    }

    #[test]
    fn adam_first_step_is_unit() {
        let mut opt = OptimState::new(3, 0.01, 10).unwrap();
        let mut p = [0.0; 3];
        opt.step(&mut p, &[3.0, -1e-3, 40.0]).unwrap();
        for (v, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - 0.01 * s).abs() < 1e-7, "{v}");
        }
    }

    #[test]
    fn schedule_switches() {
        let mut opt = OptimState::with_schedule(1, 0.1, 10, 0.7).unwrap();
        let mut p = [0.0];
        let modes: Vec<_> = (0..10)
            .map(|_| {
                let m = opt.mode();
                opt.step(&mut p, &[1.0]).unwrap();
                m
            })
            .collect();
        assert_eq!(modes.iter().filter(|&&m| m == OptimMode::Adam).count(), 7);
        assert_eq!(modes[7], OptimMode::Sgd);
    }

    #[test]
    fn quadratic_bowl() {
        // f(p) = ½ Σ a_i (p_i − c_i)²
        let a = [1.0, 4.0, 0.5];
        let c = [1.0, -2.0, 3.0];
        let mut p = [0.0; 3];
        let mut opt = OptimState::with_schedule(3, 0.05, 2000, 0.7).unwrap();
        for _ in 0..2000 {
            let g: Vec<f64> = (0..3).map(|i| a[i] * (p[i] - c[i])).collect();
            opt.step(&mut p, &g).unwrap();
        }
        for i in 0..3 {
            assert!((p[i] - c[i]).abs() < 1e-6, "{p:?}");
        }
    }

    fn train_a_bit(seed: u64) -> DenseNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = DenseNet::new(&[3, 5, 5, 1], &mut rng).unwrap();
        let x = random_batch(&mut rng, 32, 3);
        let t = x.sum_axis(Axis(1)).insert_axis(Axis(1));
        let mut opt = OptimState::with_schedule(net.n_params(), 0.01, 50, 0.7).unwrap();
        for _ in 0..50 {
            let (out, cache) = net.forward_train(x.view()).unwrap();
            let g = net.backward(&cache, (&out - &t).view()).unwrap();
            opt.step(net.params_mut(), &g).unwrap();
        }
        net
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_a_bit(9);
        let b = train_a_bit(9);
        assert_eq!(a, b);
        assert_ne!(a, train_a_bit(10));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = train_a_bit(4);
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"RHNN");
        let back = DenseNet::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, net);
        buf[0] = b'X';
        assert!(matches!(DenseNet::read_checkpoint(buf.as_slice()), Err(Error::Format(_))));
    }
}
