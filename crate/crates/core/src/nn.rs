//! Small differentiable building blocks with hand-written gradients.
//!
//! Every module stores its parameters as offsets into one flat `f64` vector
//! described by a [`Layout`]. Forward passes read from that vector and
//! backward passes accumulate into a gradient vector with the same layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named, disjoint blocks that tile a flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    blocks: Vec<ParamBlock>,
    len: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block and returns its offset.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.len;
        let block = ParamBlock { name: name.into(), offset, shape: shape.to_vec() };
        self.len += block.len();
        self.blocks.push(block);
        offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        ParamVector { values: vec![0.0; layout.len()], layout }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::shape(layout.len(), values.len()));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.block(name).map(|b| &self.values[b.range()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activated output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y[o] = bias[o] + Σ_i w[o, i] x[i]` with `w` row-major `rows × x.len()`.
fn affine(w: &[f64], bias: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (o, out) in y.iter_mut().enumerate() {
        let row = &w[o * cols..(o + 1) * cols];
        *out = bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Accumulates `dw += dy ⊗ x`, `db += dy` and, when requested, `dx += wᵀ dy`.
fn affine_backward(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64], dx: Option<&mut [f64]>) {
    let cols = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db[o] += g;
        let row = &mut dw[o * cols..(o + 1) * cols];
        row.iter_mut().zip(x).for_each(|(d, xi)| *d += g * xi);
    }
    if let Some(dx) = dx {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * cols..(o + 1) * cols];
            dx.iter_mut().zip(row).for_each(|(d, wi)| *d += g * wi);
        }
    }
}

fn uniform_fill<R: Rng + ?Sized>(slice: &mut [f64], bound: f64, rng: &mut R) {
    for v in slice {
        *v = rng.gen_range(-bound..=bound);
    }
}

/// Fully connected layer `act(W x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    w: usize,
    b: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new(layout: &mut Layout, name: &str, n_in: usize, n_out: usize, activation: Activation) -> Self {
        let w = layout.push(format!("{name}.weight"), &[n_out, n_in]);
        let b = layout.push(format!("{name}.bias"), &[n_out]);
        Dense { n_in, n_out, w, b, activation }
    }

    fn weight<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.n_in * self.n_out]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.n_out]
    }

    pub fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R) {
        let bound = 1.0 / (self.n_in.max(1) as f64).sqrt();
        uniform_fill(&mut p[self.w..self.w + self.n_in * self.n_out], bound, rng);
        uniform_fill(&mut p[self.b..self.b + self.n_out], bound, rng);
    }

    pub fn zero(&self, p: &mut [f64]) {
        p[self.w..self.w + self.n_in * self.n_out].fill(0.0);
        p[self.b..self.b + self.n_out].fill(0.0);
    }

    pub fn forward_into(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_in);
        affine(self.weight(p), self.bias(p), x, y);
        if self.activation != Activation::Linear {
            y.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_in {
            return Err(Error::shape(self.n_in, x.len()));
        }
        let mut y = vec![0.0; self.n_out];
        self.forward_into(p, x, &mut y);
        Ok(y)
    }

    /// `y` is the activated output of `forward` on `x`.
    pub fn backward(&self, p: &[f64], x: &[f64], y: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        let dpre: Vec<f64> = dy
            .iter()
            .zip(y)
            .map(|(&g, &out)| g * self.activation.derivative_from_output(out))
            .collect();
        let (head, tail) = grad.split_at_mut(self.b);
        // weights precede their bias in every layout this module builds
        let dw = &mut head[self.w..self.w + self.n_in * self.n_out];
        let db = &mut tail[..self.n_out];
        affine_backward(self.weight(p), x, &dpre, dw, db, dx);
    }
}

/// Stack of dense layers; hidden layers share one activation, the output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    pub acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    pub fn new(layout: &mut Layout, name: &str, sizes: &[usize], hidden: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let act = if l == last { Activation::Linear } else { hidden };
                Dense::new(layout, &format!("{name}.{l}"), w[0], w[1], act)
            })
            .collect();
        Mlp { layers }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R) {
        self.layers.iter().for_each(|l| l.init(p, rng));
    }

    pub fn zero_output_layer(&self, p: &mut [f64]) {
        self.layers[self.layers.len() - 1].zero(p);
    }

    pub fn forward_cached(&self, p: &[f64], x: &[f64]) -> Result<MlpCache> {
        if x.len() != self.n_in() {
            return Err(Error::shape(self.n_in(), x.len()));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let mut y = vec![0.0; layer.n_out];
            layer.forward_into(p, acts.last().unwrap(), &mut y);
            acts.push(y);
        }
        Ok(MlpCache { acts })
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(p, x)?.acts.pop().unwrap_or_default())
    }

    /// Backpropagates `dy` through the cached pass; returns the input gradient.
    pub fn backward(&self, p: &[f64], cache: &MlpCache, dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut upstream = dy.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let mut dx = vec![0.0; layer.n_in];
            layer.backward(p, &cache.acts[l], &cache.acts[l + 1], &upstream, grad, Some(&mut dx));
            upstream = dx;
        }
        upstream
    }
}

/// Gated recurrent cell, gate order (reset, update, candidate):
///
/// ```text
/// r = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub n_in: usize,
    pub n_hidden: usize,
    w_ih: usize,
    w_hh: usize,
    b_ih: usize,
    b_hh: usize,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    /// `W_hn h + b_hn`
    hn: Vec<f64>,
    pub h: Vec<f64>,
}

impl Gru {
    pub fn new(layout: &mut Layout, name: &str, n_in: usize, n_hidden: usize) -> Self {
        let g = 3 * n_hidden;
        let w_ih = layout.push(format!("{name}.weight_ih"), &[g, n_in]);
        let w_hh = layout.push(format!("{name}.weight_hh"), &[g, n_hidden]);
        let b_ih = layout.push(format!("{name}.bias_ih"), &[g]);
        let b_hh = layout.push(format!("{name}.bias_hh"), &[g]);
        Gru { n_in, n_hidden, w_ih, w_hh, b_ih, b_hh }
    }

    pub fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R) {
        let g = 3 * self.n_hidden;
        let bound = 1.0 / (self.n_hidden.max(1) as f64).sqrt();
        uniform_fill(&mut p[self.w_ih..self.w_ih + g * self.n_in], bound, rng);
        uniform_fill(&mut p[self.w_hh..self.w_hh + g * self.n_hidden], bound, rng);
        uniform_fill(&mut p[self.b_ih..self.b_ih + g], bound, rng);
        uniform_fill(&mut p[self.b_hh..self.b_hh + g], bound, rng);
    }

    pub fn step(&self, p: &[f64], h_prev: &[f64], x: &[f64]) -> Result<GruCache> {
        if x.len() != self.n_in {
            return Err(Error::shape(self.n_in, x.len()));
        }
        if h_prev.len() != self.n_hidden {
            return Err(Error::shape(self.n_hidden, h_prev.len()));
        }
        let hs = self.n_hidden;
        let g = 3 * hs;
        let mut gi = vec![0.0; g];
        let mut gh = vec![0.0; g];
        affine(&p[self.w_ih..self.w_ih + g * self.n_in], &p[self.b_ih..self.b_ih + g], x, &mut gi);
        affine(&p[self.w_hh..self.w_hh + g * hs], &p[self.b_hh..self.b_hh + g], h_prev, &mut gh);
        let mut r = vec![0.0; hs];
        let mut z = vec![0.0; hs];
        let mut n = vec![0.0; hs];
        let mut h = vec![0.0; hs];
        for k in 0..hs {
            r[k] = sigmoid(gi[k] + gh[k]);
            z[k] = sigmoid(gi[hs + k] + gh[hs + k]);
            n[k] = (gi[2 * hs + k] + r[k] * gh[2 * hs + k]).tanh();
            h[k] = (1.0 - z[k]) * n[k] + z[k] * h_prev[k];
        }
        let hn = gh[2 * hs..].to_vec();
        Ok(GruCache { x: x.to_vec(), h_prev: h_prev.to_vec(), r, z, n, hn, h })
    }

    /// One step of backpropagation. `dh` is the total gradient reaching the
    /// step's output. Returns `(dh_prev, dx)`.
    pub fn backward_step(&self, p: &[f64], cache: &GruCache, dh: &[f64], grad: &mut [f64]) -> (Vec<f64>, Vec<f64>) {
        let hs = self.n_hidden;
        let g = 3 * hs;
        let mut d_gi = vec![0.0; g];
        let mut d_gh = vec![0.0; g];
        let mut dh_prev = vec![0.0; hs];
        for k in 0..hs {
            let (r, z, n) = (cache.r[k], cache.z[k], cache.n[k]);
            let dn = dh[k] * (1.0 - z);
            let dz = dh[k] * (cache.h_prev[k] - n);
            dh_prev[k] = dh[k] * z;
            let da_n = dn * (1.0 - n * n);
            let dr = da_n * cache.hn[k];
            let da_z = dz * z * (1.0 - z);
            let da_r = dr * r * (1.0 - r);
            d_gi[k] = da_r;
            d_gi[hs + k] = da_z;
            d_gi[2 * hs + k] = da_n;
            d_gh[k] = da_r;
            d_gh[hs + k] = da_z;
            d_gh[2 * hs + k] = da_n * r;
        }
        let mut dx = vec![0.0; self.n_in];
        {
            let (lo, hi) = grad.split_at_mut(self.b_ih);
            affine_backward(
                &p[self.w_ih..self.w_ih + g * self.n_in],
                &cache.x,
                &d_gi,
                &mut lo[self.w_ih..self.w_ih + g * self.n_in],
                &mut hi[..g],
                Some(&mut dx),
            );
        }
        {
            let (lo, hi) = grad.split_at_mut(self.b_hh);
            affine_backward(
                &p[self.w_hh..self.w_hh + g * hs],
                &cache.h_prev,
                &d_gh,
                &mut lo[self.w_hh..self.w_hh + g * hs],
                &mut hi[..g],
                Some(&mut dh_prev),
            );
        }
        (dh_prev, dx)
    }

    /// Runs the cell over `inputs` from a zero initial state.
    pub fn unroll(&self, p: &[f64], inputs: &[Vec<f64>]) -> Result<Vec<GruCache>> {
        let mut h = vec![0.0; self.n_hidden];
        let mut caches = Vec::with_capacity(inputs.len());
        for x in inputs {
            let c = self.step(p, &h, x)?;
            h.clone_from(&c.h);
            caches.push(c);
        }
        Ok(caches)
    }

    /// Backpropagation through time. `upstream[t]` is `∂L/∂h_t` from outside
    /// the recurrence. Returns the per-step input gradients.
    pub fn bptt(&self, p: &[f64], caches: &[GruCache], upstream: &[Vec<f64>], grad: &mut [f64]) -> Result<Vec<Vec<f64>>> {
        if upstream.len() != caches.len() {
            return Err(Error::shape(caches.len(), upstream.len()));
        }
        let mut carry = vec![0.0; self.n_hidden];
        let mut dxs = vec![Vec::new(); caches.len()];
        for t in (0..caches.len()).rev() {
            let dh: Vec<f64> = upstream[t].iter().zip(&carry).map(|(a, b)| a + b).collect();
            let (dh_prev, dx) = self.backward_step(p, &caches[t], &dh, grad);
            carry = dh_prev;
            dxs[t] = dx;
        }
        Ok(dxs)
    }
}

/// Two dense layers mapping a global state to the flattened parameters of a
/// generated layer. Generated weights are used as-is, without any sign constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypernetwork {
    net: Mlp,
}

impl Hypernetwork {
    pub fn new(layout: &mut Layout, name: &str, state_dim: usize, hidden: usize, generated: usize) -> Self {
        Hypernetwork { net: Mlp::new(layout, name, &[state_dim, hidden, generated], Activation::Relu) }
    }

    pub fn state_dim(&self) -> usize {
        self.net.n_in()
    }

    pub fn generated_len(&self) -> usize {
        self.net.n_out()
    }

    pub fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R, zero_output: bool) {
        self.net.init(p, rng);
        if zero_output {
            self.net.zero_output_layer(p);
        }
    }

    pub fn weights(&self, p: &[f64], state: &[f64]) -> Result<MlpCache> {
        self.net.forward_cached(p, state)
    }

    pub fn backward(&self, p: &[f64], cache: &MlpCache, d_generated: &[f64], grad: &mut [f64]) {
        self.net.backward(p, cache, d_generated, grad);
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(self.m.len(), params.len()));
        }
        if grads.len() != params.len() {
            return Err(Error::shape(params.len(), grads.len()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Step used by [`finite_diff_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares `analytic` against central differences of `f` on `coords`.
/// Returns the largest `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], analytic: &[f64], coords: &[usize]) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != params.len() {
        return Err(Error::shape(params.len(), analytic.len()));
    }
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for &c in coords {
        if c >= params.len() {
            return Err(Error::OutOfRange { index: c, limit: params.len() });
        }
        probe[c] = params[c] + FD_STEP;
        let up = f(&probe);
        probe[c] = params[c] - FD_STEP;
        let down = f(&probe);
        probe[c] = params[c];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {c}")));
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[c];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Draws `count` coordinates (with replacement when `count > len`).
pub fn sample_coords<R: Rng + ?Sized>(len: usize, count: usize, rng: &mut R) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    rand::seq::index::sample(rng, len, count).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_dense_is_identity() {
        let mut layout = Layout::new();
        let d = Dense::new(&mut layout, "fc", 3, 3, Activation::Linear);
        let mut p = vec![0.0; layout.len()];
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        assert_eq!(d.forward(&p, &[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        assert!(d.forward(&p, &[1.0]).is_err());
    }

    #[test]
    fn square_gradient_through_dense() {
        // f(x) = (w x)^2 with w = 1 at x = 3
        let mut layout = Layout::new();
        let d = Dense::new(&mut layout, "fc", 1, 1, Activation::Linear);
        let p = vec![1.0, 0.0];
        let x = [3.0];
        let y = d.forward(&p, &x).unwrap();
        let mut grad = vec![0.0; 2];
        let mut dx = vec![0.0];
        d.backward(&p, &x, &y, &[2.0 * y[0]], &mut grad, Some(&mut dx));
        assert_eq!(dx[0], 6.0);
    }

    #[test]
    fn layout_tiles_vector() {
        let mut layout = Layout::new();
        Mlp::new(&mut layout, "mlp", &[4, 5, 2], Activation::Relu);
        Gru::new(&mut layout, "gru", 3, 4);
        let mut covered = vec![0u8; layout.len()];
        for b in layout.blocks() {
            for i in b.range() {
                covered[i] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn dense_tanh_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut layout = Layout::new();
        let d = Dense::new(&mut layout, "fc", 4, 3, Activation::Tanh);
        let mut p = vec![0.0; layout.len()];
        d.init(&mut p, &mut rng);
        let x = [0.3, -0.8, 1.2, 0.1];
        let w = [0.7, -1.1, 0.4];
        let loss = |p: &[f64]| d.forward(p, &x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let y = d.forward(&p, &x).unwrap();
        let mut grad = vec![0.0; p.len()];
        d.backward(&p, &x, &y, &w, &mut grad, None);
        let coords: Vec<usize> = (0..p.len()).collect();
        assert!(finite_diff_check(loss, &p, &grad, &coords).unwrap() <= 1e-5);
    }

    #[test]
    fn finite_diff_exact_for_linear() {
        let p = vec![1.0, 2.0, -3.0];
        let err = finite_diff_check(|q| 2.0 * q[0] - q[1] + 0.5 * q[2], &p, &[2.0, -1.0, 0.5], &[0, 1, 2]).unwrap();
        assert!(err <= 1e-10);
        assert!(finite_diff_check(|_| f64::NAN, &p, &[0.0; 3], &[0]).is_err());
    }

    #[test]
    fn zero_gru_keeps_zero_state() {
        let mut layout = Layout::new();
        let g = Gru::new(&mut layout, "gru", 3, 4);
        let p = vec![0.0; layout.len()];
        let c = g.step(&p, &[0.0; 4], &[1.0, -2.0, 5.0]).unwrap();
        assert_eq!(c.h, vec![0.0; 4]);
        assert!(c.z.iter().chain(&c.r).all(|&v| v == 0.5));
    }

    #[test]
    fn single_step_bptt_equals_backward_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layout = Layout::new();
        let g = Gru::new(&mut layout, "gru", 2, 3);
        let mut p = vec![0.0; layout.len()];
        g.init(&mut p, &mut rng);
        let caches = g.unroll(&p, &[vec![0.5, -0.25]]).unwrap();
        let up = vec![vec![1.0, -0.5, 0.25]];
        let mut g1 = vec![0.0; p.len()];
        g.bptt(&p, &caches, &up, &mut g1).unwrap();
        let mut g2 = vec![0.0; p.len()];
        g.backward_step(&p, &caches[0], &up[0], &mut g2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn gru_bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut layout = Layout::new();
        let g = Gru::new(&mut layout, "gru", 3, 4);
        let mut p = vec![0.0; layout.len()];
        g.init(&mut p, &mut rng);
        let inputs: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let weights: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let loss = |q: &[f64]| {
            g.unroll(q, &inputs)
                .unwrap()
                .iter()
                .zip(&weights)
                .map(|(c, w)| c.h.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
        };
        let caches = g.unroll(&p, &inputs).unwrap();
        let mut grad = vec![0.0; p.len()];
        g.bptt(&p, &caches, &weights, &mut grad).unwrap();
        let coords: Vec<usize> = (0..p.len()).collect();
        assert!(finite_diff_check(loss, &p, &grad, &coords).unwrap() <= 1e-4);
    }

    #[test]
    fn hypernetwork_zero_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layout = Layout::new();
        let hn = Hypernetwork::new(&mut layout, "hyper", 3, 8, 6);
        let mut p = vec![0.0; layout.len()];
        assert!(hn.weights(&p, &[1.0, 2.0, 3.0]).unwrap().output().iter().all(|&v| v == 0.0));
        hn.init(&mut p, &mut rng, false);
        let a = hn.weights(&p, &[1.0, 0.0, -1.0]).unwrap().output().to_vec();
        let b = hn.weights(&p, &[-0.5, 2.0, 0.3]).unwrap().output().to_vec();
        assert_ne!(a, b);
        assert!(hn.weights(&p, &[1.0]).is_err());
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut adam = Adam::new(3, 1e-3);
        adam.update(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);

        let mut adam = Adam::new(3, 1e-3);
        let mut q = vec![0.0; 3];
        adam.update(&mut q, &[0.3, -4.0, 1e-3]).unwrap();
        // first bias-corrected step is lr * g / (|g| + eps)
        for (v, g) in q.iter().zip([0.3f64, -4.0, 1e-3]) {
            assert!((v + 1e-3 * g.signum()).abs() < 1e-8);
        }
        assert!(adam.update(&mut q, &[f64::NAN, 0.0, 0.0]).is_err());
        assert!(adam.update(&mut q, &[0.0; 2]).is_err());

        let run = || {
            let mut p = vec![0.1, 0.2];
            let mut a = Adam::new(2, 0.01);
            for k in 0..10 {
                a.update(&mut p, &[k as f64 * 0.1, -0.3]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
