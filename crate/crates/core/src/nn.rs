//! Small dense-network engine: affine, ReLU, batch normalization and
//! split-softmax layers with analytic backpropagation, an Adam optimizer and
//! the stage-weighted cross-entropy loss.
//!
//! Batches are `Array2<f64>` with one sample per row.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::SimRng;

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;
/// Probability floor inside the cross entropy.
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `y = x·W + b` with `W` of shape `in×out`.
    Affine { w: Array2<f64>, b: Array1<f64> },
    Relu { dim: usize },
    BatchNorm {
        gamma: Array1<f64>,
        beta: Array1<f64>,
        running_mean: Array1<f64>,
        running_var: Array1<f64>,
        momentum: f64,
        eps: f64,
    },
    /// Independent softmax over consecutive groups of outputs.
    SoftmaxSplit { heads: Vec<usize> },
}

impl Layer {
    pub fn affine(input: usize, output: usize, rng: &mut SimRng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let w = Array2::from_shape_fn((input, output), |_| rng.random_range(-bound..=bound));
        Layer::Affine { w, b: Array1::zeros(output) }
    }

    pub fn batch_norm(dim: usize) -> Self {
        Layer::BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Layer::Affine { w, .. } => w.nrows(),
            Layer::Relu { dim } => *dim,
            Layer::BatchNorm { gamma, .. } => gamma.len(),
            Layer::SoftmaxSplit { heads } => heads.iter().sum(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Layer::Affine { w, .. } => w.ncols(),
            _ => self.input_dim(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Layer::Affine { .. } => 1,
            Layer::Relu { .. } => 2,
            Layer::BatchNorm { .. } => 3,
            Layer::SoftmaxSplit { .. } => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
enum LayerCache {
    None,
    Input(Array2<f64>),
    Output(Array2<f64>),
    Bn {
        x_hat: Array2<f64>,
        inv_std: Array1<f64>,
        mean: Array1<f64>,
        var: Array1<f64>,
    },
}

/// Activations recorded by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    mode: Mode,
    rows: usize,
}

/// Per-parameter-tensor gradients in declaration order (affine: `W` then
/// `b`; batch norm: scale then shift).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients(net.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Dimension(format!(
                    "layer output {} feeds layer input {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Dense ReLU network with batch normalization after the input and after
    /// every `bn_every`-th hidden layer (0 disables the latter), ending in an
    /// affine output layer and optionally a split softmax.
    pub fn fcnn(
        input: usize,
        hidden_layers: usize,
        width: usize,
        output: usize,
        bn_every: usize,
        softmax_heads: Option<Vec<usize>>,
        rng: &mut SimRng,
    ) -> Result<Self> {
        let mut layers = vec![Layer::batch_norm(input)];
        let mut dim = input;
        for i in 1..=hidden_layers {
            layers.push(Layer::affine(dim, width, rng));
            layers.push(Layer::Relu { dim: width });
            if bn_every > 0 && i % bn_every == 0 {
                layers.push(Layer::batch_norm(width));
            }
            dim = width;
        }
        layers.push(Layer::affine(dim, output, rng));
        if let Some(heads) = softmax_heads {
            layers.push(Layer::SoftmaxSplit { heads });
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Trainable parameter tensors in declaration order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Affine { w, b } => {
                    out.push(w.as_slice().expect("standard layout"));
                    out.push(b.as_slice().expect("standard layout"));
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma.as_slice().expect("standard layout"));
                    out.push(beta.as_slice().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Affine { w, b } => {
                    out.push(w.as_slice_mut().expect("standard layout"));
                    out.push(b.as_slice_mut().expect("standard layout"));
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma.as_slice_mut().expect("standard layout"));
                    out.push(beta.as_slice_mut().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Runs the network. Training mode normalizes with batch statistics and
    /// records what [`Network::backward`] needs; running statistics are only
    /// changed by [`Network::update_running_stats`].
    pub fn forward(&self, x: &Array2<f64>, mode: Mode) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Affine { w, b } => {
                    let out = a.dot(w) + b;
                    (out, LayerCache::Input(a))
                }
                Layer::Relu { .. } => {
                    let out = a.mapv(|v| v.max(0.0));
                    (out, LayerCache::Input(a))
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var, eps, .. } => {
                    match mode {
                        Mode::Infer => {
                            let inv_std = running_var.mapv(|v| (v + eps).sqrt().recip());
                            let out = (&a - running_mean) * &(&inv_std * gamma) + beta;
                            (out, LayerCache::None)
                        }
                        Mode::Train => {
                            let n = a.nrows() as f64;
                            if a.nrows() == 0 {
                                return Err(Error::Dimension("empty batch".into()));
                            }
                            let mean = a.sum_axis(Axis(0)) / n;
                            let centered = &a - &mean;
                            let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
                            let inv_std = var.mapv(|v| (v + eps).sqrt().recip());
                            let x_hat = centered * &inv_std;
                            let out = &x_hat * gamma + beta;
                            (out, LayerCache::Bn { x_hat, inv_std, mean, var })
                        }
                    }
                }
                Layer::SoftmaxSplit { heads } => {
                    let mut out = a;
                    softmax_split_in_place(&mut out, heads);
                    (out.clone(), LayerCache::Output(out))
                }
            };
            caches.push(if mode == Mode::Train { cache } else { LayerCache::None });
            a = next;
        }
        let rows = x.nrows();
        Ok((a, ForwardCache { layers: caches, mode, rows }))
    }

    /// Inference-mode forward pass.
    pub fn infer(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x, Mode::Infer)?.0)
    }

    /// Moves running batch-norm statistics toward the batch statistics of a
    /// training-mode pass.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
            if let (
                Layer::BatchNorm { running_mean, running_var, momentum, .. },
                LayerCache::Bn { mean, var, .. },
            ) = (layer, c)
            {
                let m = *momentum;
                let unbias = if cache.rows > 1 {
                    cache.rows as f64 / (cache.rows - 1) as f64
                } else {
                    1.0
                };
                running_mean.zip_mut_with(mean, |r, b| *r = m * *r + (1.0 - m) * b);
                running_var.zip_mut_with(var, |r, b| *r = m * *r + (1.0 - m) * b * unbias);
            }
        }
    }

    /// Backpropagates `grad_out` (gradient of the loss at the network output).
    /// Returns parameter gradients and the gradient at the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &Array2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        if cache.mode != Mode::Train || cache.layers.len() != self.layers.len() {
            return Err(Error::InvalidParameter(
                "backward needs the cache of a training-mode forward pass".into(),
            ));
        }
        if grad_out.dim() != (cache.rows, self.output_dim()) {
            return Err(Error::Dimension(format!(
                "output gradient has shape {:?}, expected ({}, {})",
                grad_out.dim(),
                cache.rows,
                self.output_dim()
            )));
        }
        let mut grads_rev: Vec<Vec<f64>> = Vec::new();
        let mut g = grad_out.to_owned();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            g = match (layer, c) {
                (Layer::Affine { w, .. }, LayerCache::Input(x)) => {
                    let dw = x.t().dot(&g);
                    let db = g.sum_axis(Axis(0));
                    grads_rev.push(db.to_vec());
                    grads_rev.push(dw.as_standard_layout().iter().copied().collect());
                    g.dot(&w.t())
                }
                (Layer::Relu { .. }, LayerCache::Input(x)) => {
                    let mut g = g;
                    g.zip_mut_with(x, |gi, &xi| {
                        if xi <= 0.0 {
                            *gi = 0.0
                        }
                    });
                    g
                }
                (Layer::BatchNorm { gamma, .. }, LayerCache::Bn { x_hat, inv_std, .. }) => {
                    let n = g.nrows() as f64;
                    let dgamma = (&g * x_hat).sum_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0));
                    let dx_hat = &g * gamma;
                    let sum_dx = dx_hat.sum_axis(Axis(0));
                    let sum_dx_x = (&dx_hat * x_hat).sum_axis(Axis(0));
                    let dx = (dx_hat * n - &sum_dx - x_hat * &sum_dx_x) * &(inv_std / n);
                    grads_rev.push(dbeta.to_vec());
                    grads_rev.push(dgamma.to_vec());
                    dx
                }
                (Layer::SoftmaxSplit { heads }, LayerCache::Output(p)) => {
                    let mut dx = Array2::zeros(g.raw_dim());
                    for r in 0..g.nrows() {
                        let mut start = 0;
                        for &h in heads {
                            let dot: f64 = (start..start + h).map(|j| g[(r, j)] * p[(r, j)]).sum();
                            for j in start..start + h {
                                dx[(r, j)] = p[(r, j)] * (g[(r, j)] - dot);
                            }
                            start += h;
                        }
                    }
                    dx
                }
                _ => {
                    return Err(Error::InvalidParameter("cache does not match network".into()));
                }
            };
        }
        grads_rev.reverse();
        Ok((Gradients(grads_rev), g))
    }

    /// Serializes layer specs followed by all parameters and running
    /// statistics as little-endian `f64`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"SCNN")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&[l.tag()])?;
            match l {
                Layer::Affine { w: m, .. } => {
                    write_u64(w, m.nrows() as u64)?;
                    write_u64(w, m.ncols() as u64)?;
                }
                Layer::Relu { dim } => write_u64(w, *dim as u64)?,
                Layer::BatchNorm { gamma, momentum, eps, .. } => {
                    write_u64(w, gamma.len() as u64)?;
                    write_f64s(w, &[*momentum, *eps])?;
                }
                Layer::SoftmaxSplit { heads } => {
                    write_u64(w, heads.len() as u64)?;
                    for h in heads {
                        write_u64(w, *h as u64)?;
                    }
                }
            }
        }
        for l in &self.layers {
            match l {
                Layer::Affine { w: m, b } => {
                    write_f64s(w, m.as_slice().expect("standard layout"))?;
                    write_f64s(w, b.as_slice().expect("standard layout"))?;
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var, .. } => {
                    for a in [gamma, beta, running_mean, running_var] {
                        write_f64s(w, a.as_slice().expect("standard layout"))?;
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SCNN" {
            return Err(Error::Numeric("not a network checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Numeric(format!("unsupported checkpoint version {version}")));
        }
        let n = read_u32(r)? as usize;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            layers.push(match tag[0] {
                1 => {
                    let (i, o) = (read_u64(r)? as usize, read_u64(r)? as usize);
                    Layer::Affine { w: Array2::zeros((i, o)), b: Array1::zeros(o) }
                }
                2 => Layer::Relu { dim: read_u64(r)? as usize },
                3 => {
                    let d = read_u64(r)? as usize;
                    let me = read_f64s(r, 2)?;
                    let mut l = Layer::batch_norm(d);
                    if let Layer::BatchNorm { momentum, eps, .. } = &mut l {
                        *momentum = me[0];
                        *eps = me[1];
                    }
                    l
                }
                4 => {
                    let k = read_u64(r)? as usize;
                    let heads = (0..k).map(|_| read_u64(r).map(|v| v as usize)).collect::<Result<_>>()?;
                    Layer::SoftmaxSplit { heads }
                }
                t => return Err(Error::Numeric(format!("unknown layer tag {t}"))),
            });
        }
        for l in &mut layers {
            match l {
                Layer::Affine { w, b } => {
                    let v = read_f64s(r, w.len())?;
                    w.as_slice_mut().expect("standard layout").copy_from_slice(&v);
                    let v = read_f64s(r, b.len())?;
                    b.as_slice_mut().expect("standard layout").copy_from_slice(&v);
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var, .. } => {
                    for a in [gamma, beta, running_mean, running_var] {
                        let v = read_f64s(r, a.len())?;
                        a.as_slice_mut().expect("standard layout").copy_from_slice(&v);
                    }
                }
                _ => {}
            }
        }
        Self::new(layers)
    }
}

fn softmax_split_in_place(a: &mut Array2<f64>, heads: &[usize]) {
    for mut row in a.rows_mut() {
        let mut start = 0;
        for &h in heads {
            let seg = &mut row.as_slice_mut().expect("standard layout")[start..start + h];
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in seg.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in seg.iter_mut() {
                *v /= total;
            }
            start += h;
        }
    }
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Adam optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &Network) -> Self {
        Self::for_params(&net.params())
    }

    /// State for an arbitrary list of parameter tensors.
    pub fn for_params(params: &[&[f64]]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
        self.step_params(net.params_mut(), grads, lr)
    }

    pub fn step_params(&mut self, mut params: Vec<&mut [f64]>, grads: &Gradients, lr: f64) -> Result<()> {
        if params.len() != grads.0.len()
            || params.len() != self.m.len()
            || params.iter().zip(&grads.0).zip(&self.m).any(|((p, g), m)| p.len() != g.len() || p.len() != m.len())
        {
            return Err(Error::Dimension("gradient shapes do not match the parameters".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Stage weighting of the multi-stage cross-entropy loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    /// Number of stages `Q`.
    pub q: usize,
    /// Weight exponent `r`.
    pub r: f64,
}

impl LossSpec {
    /// `w_q = (q+1)^r / Σ_{j=1}^{Q-1} j^r` for `q = 0..Q`; the empty sum at
    /// `Q = 1` is replaced by 1.
    pub fn weights(&self) -> Vec<f64> {
        let denom: f64 = (1..self.q).map(|j| (j as f64).powf(self.r)).sum();
        let denom = if denom > 0.0 { denom } else { 1.0 };
        (0..self.q).map(|q| ((q + 1) as f64).powf(self.r) / denom).collect()
    }
}

/// Loss value and gradients with respect to each stage's PMF outputs.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<Array2<f64>>,
    /// Number of target probabilities that hit the clamp.
    pub clamped: usize,
}

/// Stage-weighted cross entropy.
///
/// Each stage output has one row per symbol holding the real-part PMF
/// followed by the imaginary-part PMF (`2·|S'|` columns). `targets` holds the
/// correct `(re, im)` level indices per row. The loss is averaged over rows
/// and stages.
pub fn weighted_ce_loss(
    stage_outputs: &[Array2<f64>],
    targets: &[(usize, usize)],
    spec: &LossSpec,
) -> Result<LossOutput> {
    if stage_outputs.len() != spec.q {
        return Err(Error::Dimension(format!(
            "{} stage outputs for Q = {}",
            stage_outputs.len(),
            spec.q
        )));
    }
    let weights = spec.weights();
    let mut loss = 0.0;
    let mut clamped = 0;
    let mut grads = Vec::with_capacity(spec.q);
    let rows = targets.len();
    for (p, w) in stage_outputs.iter().zip(&weights) {
        if p.nrows() != rows || p.ncols() % 2 != 0 {
            return Err(Error::Dimension(format!(
                "stage output of shape {:?} for {rows} targets",
                p.dim()
            )));
        }
        let d = p.ncols() / 2;
        let scale = w / (d as f64 * spec.q as f64 * rows as f64);
        let mut g = Array2::zeros(p.raw_dim());
        for (r, &(tre, tim)) in targets.iter().enumerate() {
            for col in [tre, d + tim] {
                let v = p[(r, col)];
                if v < CE_CLAMP {
                    clamped += 1;
                    loss -= scale * CE_CLAMP.ln();
                } else {
                    loss -= scale * v.ln();
                    g[(r, col)] = -scale / v;
                }
            }
        }
        grads.push(g);
    }
    if clamped > 0 {
        log::warn!("cross entropy clamped {clamped} probabilities at {CE_CLAMP:e}");
    }
    Ok(LossOutput { loss, grads, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rand_batch(rows: usize, cols: usize, rng: &mut SimRng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.standard_normal())
    }

    #[test]
    fn identity_affine_and_relu() {
        let net = Network::new(vec![Layer::Affine { w: Array2::eye(2), b: Array1::zeros(2) }]).unwrap();
        let x = array![[1.5, -2.0]];
        assert_eq!(net.infer(&x).unwrap(), x);
        let relu = Network::new(vec![Layer::Relu { dim: 2 }]).unwrap();
        assert_eq!(relu.infer(&array![[-1.0, 2.0]]).unwrap(), array![[0.0, 2.0]]);
    }

    #[test]
    fn batch_norm_standardizes() {
        let mut rng = SimRng::new(1);
        let net = Network::new(vec![Layer::batch_norm(3)]).unwrap();
        let x = rand_batch(500, 3, &mut rng).mapv(|v| 4.0 * v + 7.0);
        let (y, _) = net.forward(&x, Mode::Train).unwrap();
        for c in 0..3 {
            let col = y.column(c);
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = SimRng::new(2);
        assert!(Network::new(vec![Layer::affine(3, 4, &mut rng), Layer::Relu { dim: 5 }]).is_err());
        let net = Network::new(vec![Layer::affine(3, 4, &mut rng)]).unwrap();
        assert!(net.infer(&Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn softmax_heads_sum_to_one() {
        let mut rng = SimRng::new(3);
        let net = Network::fcnn(5, 2, 8, 6, 0, Some(vec![2, 4]), &mut rng).unwrap();
        let y = net.infer(&rand_batch(10, 5, &mut rng)).unwrap();
        for row in y.rows() {
            assert!((row.slice(ndarray::s![0..2]).sum() - 1.0).abs() < 1e-12);
            assert!((row.slice(ndarray::s![2..6]).sum() - 1.0).abs() < 1e-12);
        }
    }

    fn numeric_loss(net: &Network, x: &Array2<f64>, coef: &Array2<f64>) -> f64 {
        let (y, _) = net.forward(x, Mode::Train).unwrap();
        (&y * coef).sum() + y.mapv(|v| v * v).sum() * 0.1
    }

    fn check_gradients(net: &mut Network, x: &Array2<f64>, coef: &Array2<f64>) {
        let (y, cache) = net.forward(x, Mode::Train).unwrap();
        let g_out = coef + &(y.mapv(|v| 0.2 * v));
        let (grads, g_in) = net.backward(&cache, &g_out).unwrap();
        let h = 1e-5;
        let n_tensors = net.params().len();
        for t in 0..n_tensors {
            let len = net.params()[t].len();
            for i in 0..len {
                let orig = net.params()[t][i];
                let step = h * orig.abs().max(1.0);
                net.params_mut()[t][i] = orig + step;
                let lp = numeric_loss(net, x, coef);
                net.params_mut()[t][i] = orig - step;
                let lm = numeric_loss(net, x, coef);
                net.params_mut()[t][i] = orig;
                let num = (lp - lm) / (2.0 * step);
                let ana = grads.0[t][i];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
                assert!(err < 1e-4, "tensor {t} index {i}: {ana} vs {num}");
            }
        }
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut xp = x.clone();
                xp[(r, c)] += h;
                let mut xm = x.clone();
                xm[(r, c)] -= h;
                let num = (numeric_loss(net, &xp, coef) - numeric_loss(net, &xm, coef)) / (2.0 * h);
                let ana = g_in[(r, c)];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
                assert!(err < 1e-4, "input ({r},{c}): {ana} vs {num}");
            }
        }
    }

    #[test]
    fn gradient_check_all_layer_types() {
        let mut rng = SimRng::new(4);
        let mut net = Network::fcnn(4, 3, 6, 6, 2, Some(vec![3, 3]), &mut rng).unwrap();
        let x = rand_batch(7, 4, &mut rng);
        let coef = rand_batch(7, 6, &mut rng);
        check_gradients(&mut net, &x, &coef);
        let mut plain = Network::fcnn(3, 2, 5, 2, 0, None, &mut rng).unwrap();
        let x = rand_batch(6, 3, &mut rng);
        let coef = rand_batch(6, 2, &mut rng);
        check_gradients(&mut plain, &x, &coef);
    }

    #[test]
    fn gradient_check_through_cross_entropy() {
        let mut rng = SimRng::new(5);
        let mut net = Network::fcnn(3, 2, 6, 4, 0, Some(vec![2, 2]), &mut rng).unwrap();
        let x = rand_batch(8, 3, &mut rng);
        let targets: Vec<(usize, usize)> = (0..8).map(|i| (i % 2, (i / 2) % 2)).collect();
        let spec = LossSpec { q: 1, r: 1.0 };
        let loss_of = |net: &Network| {
            let (y, _) = net.forward(&x, Mode::Train).unwrap();
            weighted_ce_loss(&[y], &targets, &spec).unwrap().loss
        };
        let (y, cache) = net.forward(&x, Mode::Train).unwrap();
        let lo = weighted_ce_loss(&[y], &targets, &spec).unwrap();
        let (grads, _) = net.backward(&cache, &lo.grads[0]).unwrap();
        for t in 0..net.params().len() {
            for i in 0..net.params()[t].len() {
                let orig = net.params()[t][i];
                net.params_mut()[t][i] = orig + 1e-5;
                let lp = loss_of(&net);
                net.params_mut()[t][i] = orig - 1e-5;
                let lm = loss_of(&net);
                net.params_mut()[t][i] = orig;
                let num = (lp - lm) / 2e-5;
                let ana = grads.0[t][i];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-4);
                assert!(err < 1e-4, "tensor {t} index {i}: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = SimRng::new(6);
        let net = Network::fcnn(3, 2, 4, 2, 0, None, &mut rng).unwrap();
        let x = rand_batch(5, 3, &mut rng);
        let (_, cache) = net.forward(&x, Mode::Train).unwrap();
        let (g, gi) = net.backward(&cache, &Array2::zeros((5, 2))).unwrap();
        assert!(g.0.iter().flatten().all(|v| *v == 0.0));
        assert!(gi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bias_gradient_is_summed_output_gradient() {
        let mut rng = SimRng::new(7);
        let net = Network::new(vec![Layer::affine(3, 2, &mut rng)]).unwrap();
        let x = rand_batch(4, 3, &mut rng);
        let go = rand_batch(4, 2, &mut rng);
        let (_, cache) = net.forward(&x, Mode::Train).unwrap();
        let (g, _) = net.backward(&cache, &go).unwrap();
        let sum = go.sum_axis(Axis(0));
        assert!((g.0[1][0] - sum[0]).abs() < 1e-14 && (g.0[1][1] - sum[1]).abs() < 1e-14);
    }

    #[test]
    fn backward_requires_training_cache() {
        let mut rng = SimRng::new(8);
        let net = Network::new(vec![Layer::affine(3, 2, &mut rng)]).unwrap();
        let (_, cache) = net.forward(&Array2::zeros((2, 3)), Mode::Infer).unwrap();
        assert!(net.backward(&cache, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn inference_is_batch_size_invariant() {
        let mut rng = SimRng::new(9);
        let mut net = Network::fcnn(4, 3, 8, 4, 3, Some(vec![2, 2]), &mut rng).unwrap();
        let train = rand_batch(64, 4, &mut rng);
        let (_, cache) = net.forward(&train, Mode::Train).unwrap();
        net.update_running_stats(&cache);
        let x = rand_batch(10, 4, &mut rng);
        let all = net.infer(&x).unwrap();
        for r in 0..10 {
            let one = net.infer(&x.slice(ndarray::s![r..r + 1, ..]).to_owned()).unwrap();
            for c in 0..4 {
                assert_eq!(one[(0, c)], all[(r, c)]);
            }
        }
    }

    #[test]
    fn loss_weights() {
        assert_eq!(LossSpec { q: 2, r: 1.0 }.weights(), vec![1.0, 2.0]);
        assert_eq!(LossSpec { q: 1, r: 4.0 }.weights(), vec![1.0]);
        let w = LossSpec { q: 3, r: 4.0 }.weights();
        assert!((w[2] - 81.0 / 17.0).abs() < 1e-12);
    }

    #[test]
    fn loss_closed_forms() {
        let spec = LossSpec { q: 2, r: 1.0 };
        let perfect = array![[1.0, 0.0, 0.0, 1.0]];
        let lo = weighted_ce_loss(&[perfect.clone(), perfect], &[(0, 1)], &spec).unwrap();
        assert_eq!(lo.loss, 0.0);
        let uniform = Array2::from_elem((3, 4), 0.5);
        let targets = [(0, 0), (1, 0), (1, 1)];
        let lo = weighted_ce_loss(&[uniform.clone(), uniform], &targets, &spec).unwrap();
        // Per row and stage: w_q·2·(1/2)·ln 2; averaged over Q = 2 stages.
        let expect = (1.0 + 2.0) * 2.0 * 0.5 * 2f64.ln() / 2.0;
        assert!((lo.loss - expect).abs() < 1e-12);
        // Clamped target probability.
        let zero = array![[0.0, 1.0, 0.5, 0.5]];
        let lo = weighted_ce_loss(&[zero], &[(0, 0)], &LossSpec { q: 1, r: 1.0 }).unwrap();
        assert_eq!(lo.clamped, 1);
        assert!(lo.loss.is_finite());
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut rng = SimRng::new(10);
        let net = Network::fcnn(3, 1, 4, 4, 0, Some(vec![2, 2]), &mut rng).unwrap();
        let p = net.infer(&rand_batch(6, 3, &mut rng)).unwrap();
        let targets: Vec<(usize, usize)> = (0..6).map(|i| (i % 2, (i / 3) % 2)).collect();
        let spec = LossSpec { q: 1, r: 1.0 };
        let a = weighted_ce_loss(&[p.clone()], &targets, &spec).unwrap().loss;
        let perm = [3, 0, 5, 1, 4, 2];
        let pp = p.select(Axis(0), &perm);
        let tp: Vec<_> = perm.iter().map(|&i| targets[i]).collect();
        let b = weighted_ce_loss(&[pp], &tp, &spec).unwrap().loss;
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn adam_behaviour() {
        let mut rng = SimRng::new(11);
        let mut net = Network::new(vec![Layer::affine(2, 2, &mut rng)]).unwrap();
        let before = net.clone();
        let mut opt = Adam::new(&net);
        let zero = Gradients::zeros_like(&net);
        opt.step(&mut net, &zero, 1e-3).unwrap();
        assert_eq!(net, before);
        // First real step moves every coordinate by ≈ lr against the gradient.
        let mut opt = Adam::new(&net);
        let g = Gradients(vec![vec![0.5, -2.0, 3.0, -0.1], vec![1.0, -1.0]]);
        opt.step(&mut net, &g, 1e-3).unwrap();
        for (p, (q, gt)) in net.params().iter().zip(before.params().iter().zip(&g.0)) {
            for i in 0..p.len() {
                let delta = p[i] - q[i];
                assert!((delta + 1e-3 * gt[i].signum()).abs() < 1e-8);
            }
        }
        let mut x = net.clone();
        let start = x.params()[0][0];
        let mut opt = Adam::new(&x);
        let g = Gradients(vec![vec![1.0; 4], vec![0.0; 2]]);
        for _ in 0..100 {
            opt.step(&mut x, &g, 1e-2).unwrap();
        }
        assert!(x.params()[0][0] < start - 0.5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = SimRng::new(12);
        let mut net = Network::fcnn(5, 4, 7, 4, 3, Some(vec![2, 2]), &mut rng).unwrap();
        let (_, cache) = net.forward(&rand_batch(20, 5, &mut rng), Mode::Train).unwrap();
        net.update_running_stats(&cache);
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        let back = Network::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
        assert!(Network::read_from(&mut &buf[..10]).is_err());
    }
}
