//! Kernel families, batched evaluation and exact parameter gradients.
//!
//! Two families are implemented, both bounded in `(0, 1]`:
//!
//! ```text
//! Gaussian:  k(a,b) = exp(-|a-b|^2 / (2 s^2))
//! Deep:      k(a,b) = [(1-eps) G1(phi(a), phi(b)) + eps] * G2(a, b)
//! ```
//!
//! where `G1`, `G2` are Gaussian kernels with their own bandwidths and `phi`
//! is a small fully connected network (softplus hidden layers, linear
//! output). All parameters are stored in unconstrained coordinates
//! (log-bandwidths, logit of `eps`, raw weights) so a plain gradient step
//! never leaves the valid region.
//!
//! Gradients are exact reverse-mode derivatives. Parameters and gradients
//! share one flat layout (see [`KernelParams::to_flat`]):
//!
//! ```text
//! Gaussian: [log_bandwidth]
//! Deep:     [log_bw_feature, log_bw_raw, logit_eps,
//!            layer0.weight (row-major), layer0.bias, layer1.weight, ...]
//! ```

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gaussian kernel parameterized by `log σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub log_bandwidth: f64,
}

impl GaussianParams {
    pub fn from_bandwidth(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(AmdError::Input(format!("bandwidth must be finite and positive, got {sigma}")));
        }
        Ok(Self { log_bandwidth: sigma.ln() })
    }

    pub fn bandwidth(&self) -> f64 {
        self.log_bandwidth.exp()
    }
}

/// One affine layer, `out = weight · in + bias` with `weight` of shape
/// `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Feature network: softplus after every layer except the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    layers: Vec<DenseLayer>,
}

/// Activations kept from a batched forward pass for backpropagation.
/// `inputs[l]` is the input to layer `l`; `pre[l]` its affine output.
struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl NetworkParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(AmdError::Input("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(AmdError::Dimension(format!(
                    "layer {i}: bias length {} != weight rows {}",
                    l.bias.len(),
                    l.weight.nrows()
                )));
            }
            if i > 0 && l.weight.ncols() != layers[i - 1].weight.nrows() {
                return Err(AmdError::Dimension(format!(
                    "layer {i}: weight columns {} != previous layer rows {}",
                    l.weight.ncols(),
                    layers[i - 1].weight.nrows()
                )));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(AmdError::Numeric(format!("layer {i} has non-finite entries")));
            }
        }
        Ok(Self { layers })
    }

    /// Random initialization: every weight and bias uniform on
    /// `[-1/√fan_in, 1/√fan_in]`. `dims` lists input, hidden and output widths.
    pub fn init_uniform<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(AmdError::Input(format!("invalid network dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
                let bias = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound));
                DenseLayer { weight, bias }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.nrows()).unwrap_or(0)
    }

    /// Widths from input to output, e.g. `[d, 32, 32]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.weight.nrows())).collect()
    }

    fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Feature map of a single point.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(AmdError::Dimension(format!(
                "network expects input dim {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.weight.dot(&h) + &l.bias;
            if i < last {
                h.mapv_inplace(softplus);
            }
        }
        Ok(h)
    }

    /// Batched forward pass over the rows of `x`, keeping activations.
    fn forward_batch(&self, x: ArrayView2<f64>) -> (Array2<f64>, ForwardCache) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let z = h.dot(&l.weight.t()) + &l.bias;
            inputs.push(h);
            h = if i < last { z.mapv(softplus) } else { z.clone() };
            pre.push(z);
        }
        (h, ForwardCache { inputs, pre })
    }

    /// Backpropagate `d_out` (gradient w.r.t. the batch outputs) and add the
    /// parameter gradient into `out`, which uses the flat network layout.
    fn backward_batch(&self, cache: &ForwardCache, d_out: Array2<f64>, out: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.weight.len() + l.bias.len();
        }
        let mut delta = d_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let gw = delta.t().dot(&cache.inputs[i]);
            let gb = delta.sum_axis(Axis(0));
            let base = offsets[i];
            for (dst, g) in out[base..base + gw.len()].iter_mut().zip(gw.iter()) {
                *dst += *g;
            }
            let bb = base + gw.len();
            for (dst, g) in out[bb..bb + gb.len()].iter_mut().zip(gb.iter()) {
                *dst += *g;
            }
            if i > 0 {
                let mut d_in = delta.dot(&l.weight);
                d_in.zip_mut_with(&cache.pre[i - 1], |d, &z| *d *= sigmoid(z));
                delta = d_in;
            }
        }
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
    }

    fn read_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = it.next().expect("flat vector too short");
            }
            for b in l.bias.iter_mut() {
                *b = it.next().expect("flat vector too short");
            }
        }
    }
}

/// Parameters of `[(1-eps) G1(phi(a),phi(b)) + eps] G2(a,b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepKernelParams {
    pub network: NetworkParams,
    pub log_bw_feature: f64,
    pub log_bw_raw: f64,
    pub logit_eps: f64,
}

impl DeepKernelParams {
    pub fn epsilon(&self) -> f64 {
        sigmoid(self.logit_eps)
    }

    pub fn bw_feature(&self) -> f64 {
        self.log_bw_feature.exp()
    }

    pub fn bw_raw(&self) -> f64 {
        self.log_bw_raw.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Deep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelParams {
    Gaussian(GaussianParams),
    Deep(DeepKernelParams),
}

impl KernelParams {
    pub fn family(&self) -> KernelFamily {
        match self {
            KernelParams::Gaussian(_) => KernelFamily::Gaussian,
            KernelParams::Deep(_) => KernelFamily::Deep,
        }
    }

    /// Input dimension the kernel is tied to, if any. Gaussian kernels accept
    /// any dimension.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            KernelParams::Gaussian(_) => None,
            KernelParams::Deep(p) => Some(p.network.input_dim()),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            KernelParams::Gaussian(_) => 1,
            KernelParams::Deep(p) => 3 + p.network.n_params(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            KernelParams::Gaussian(g) => vec![g.log_bandwidth],
            KernelParams::Deep(p) => {
                let mut v = Vec::with_capacity(self.n_params());
                v.extend([p.log_bw_feature, p.log_bw_raw, p.logit_eps]);
                p.network.write_flat(&mut v);
                v
            }
        }
    }

    /// Copy of `self` with every free parameter replaced from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.n_params() {
            return Err(AmdError::Dimension(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                self.n_params()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(AmdError::Numeric("non-finite kernel parameter".into()));
        }
        Ok(match self {
            KernelParams::Gaussian(_) => KernelParams::Gaussian(GaussianParams { log_bandwidth: flat[0] }),
            KernelParams::Deep(p) => {
                let mut q = p.clone();
                q.log_bw_feature = flat[0];
                q.log_bw_raw = flat[1];
                q.logit_eps = flat[2];
                q.network.read_flat(&flat[3..]);
                KernelParams::Deep(q)
            }
        })
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        match self.input_dim() {
            Some(k) if k != d => Err(AmdError::Dimension(format!("kernel expects dim {k}, got {d}"))),
            _ => Ok(()),
        }
    }
}

/// Gradient in the flat parameter layout of the owning [`KernelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub values: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros_like(params: &KernelParams) -> Self {
        Self { values: vec![0.0; params.n_params()] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.scale(c);
        self
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &ParamGradient, c: f64) {
        assert_eq!(self.values.len(), other.values.len(), "gradient shape mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::ops::AddAssign<&ParamGradient> for ParamGradient {
    fn add_assign(&mut self, rhs: &ParamGradient) {
        self.add_scaled(rhs, 1.0);
    }
}

#[inline]
fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Evaluate the kernel at a single pair of points.
pub fn kernel_eval(params: &KernelParams, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AmdError::Dimension(format!("point dims differ: {} vs {}", a.len(), b.len())));
    }
    params.check_dim(a.len())?;
    match params {
        KernelParams::Gaussian(g) => {
            let s2 = g.bandwidth().powi(2);
            Ok((-sq_dist(a, b) / (2.0 * s2)).exp())
        }
        KernelParams::Deep(p) => {
            let fa = p.network.forward(a)?;
            let fb = p.network.forward(b)?;
            let g1 = (-sq_dist(fa.view(), fb.view()) / (2.0 * p.bw_feature().powi(2))).exp();
            let g2 = (-sq_dist(a, b) / (2.0 * p.bw_raw().powi(2))).exp();
            let eps = p.epsilon();
            Ok(((1.0 - eps) * g1 + eps) * g2)
        }
    }
}

/// A point set mapped through the kernel's feature network (if any), with
/// squared row norms cached for the `|a|²+|b|²-2a·b` distance form.
struct Embedded {
    raw: Array2<f64>,
    raw_sq: Array1<f64>,
    feat: Option<(Array2<f64>, Array1<f64>, ForwardCache)>,
}

fn row_sq_norms(a: &Array2<f64>) -> Array1<f64> {
    a.rows().into_iter().map(|r| r.dot(&r)).collect()
}

fn embed(params: &KernelParams, a: ArrayView2<f64>) -> Embedded {
    let raw = a.to_owned();
    let raw_sq = row_sq_norms(&raw);
    let feat = match params {
        KernelParams::Gaussian(_) => None,
        KernelParams::Deep(p) => {
            let (f, cache) = p.network.forward_batch(a);
            let fsq = row_sq_norms(&f);
            Some((f, fsq, cache))
        }
    };
    Embedded { raw, raw_sq, feat }
}

/// Pairwise squared distances, `|a|²+|b|²-2a·b`, clamped at zero.
fn sq_dist_matrix(a: &Array2<f64>, a_sq: &Array1<f64>, b: &Array2<f64>, b_sq: &Array1<f64>) -> Array2<f64> {
    let mut d = a.dot(&b.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (a_sq[i] + b_sq[j] - 2.0 * *v).max(0.0);
    }
    d
}

/// Intermediate matrices of one kernel block, shared by value and gradient.
struct BlockTerms {
    k: Array2<f64>,
    raw_d2: Array2<f64>,
    /// `(G1, feature_d2)` for the deep family.
    deep: Option<(Array2<f64>, Array2<f64>, Array2<f64>)>,
}

fn block_terms(params: &KernelParams, a: &Embedded, b: &Embedded) -> BlockTerms {
    let raw_d2 = sq_dist_matrix(&a.raw, &a.raw_sq, &b.raw, &b.raw_sq);
    match params {
        KernelParams::Gaussian(g) => {
            let c = 1.0 / (2.0 * g.bandwidth().powi(2));
            let k = raw_d2.mapv(|r| (-r * c).exp());
            BlockTerms { k, raw_d2, deep: None }
        }
        KernelParams::Deep(p) => {
            let (fa, fa_sq, _) = a.feat.as_ref().expect("deep embedding carries features");
            let (fb, fb_sq, _) = b.feat.as_ref().expect("deep embedding carries features");
            let feat_d2 = sq_dist_matrix(fa, fa_sq, fb, fb_sq);
            let c1 = 1.0 / (2.0 * p.bw_feature().powi(2));
            let c2 = 1.0 / (2.0 * p.bw_raw().powi(2));
            let eps = p.epsilon();
            let g1 = feat_d2.mapv(|r| (-r * c1).exp());
            let g2 = raw_d2.mapv(|r| (-r * c2).exp());
            let mut k = g1.mapv(|v| (1.0 - eps) * v + eps);
            k *= &g2;
            BlockTerms { k, raw_d2, deep: Some((g1, g2, feat_d2)) }
        }
    }
}

/// Kernel matrix between the rows of `a` and the rows of `b`.
pub fn gram_block(params: &KernelParams, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(AmdError::Dimension(format!("column counts differ: {} vs {}", a.ncols(), b.ncols())));
    }
    params.check_dim(a.ncols())?;
    let ea = embed(params, a);
    let eb = embed(params, b);
    Ok(block_terms(params, &ea, &eb).k)
}

/// Which entries of a block enter a weighted kernel sum.
#[derive(Debug, Clone, Copy)]
pub(crate) enum PairPattern<'w> {
    /// Every `(i, j)` with `i != j`, all with the same weight.
    OffDiagonal(f64),
    /// Only `(k, k)`, with per-pair weights.
    Diagonal(&'w [f64]),
}

/// A block `sum_{(i,j) in pattern} w_ij k(sets[a]_i, sets[b]_j)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct WeightedBlock<'w> {
    pub a: usize,
    pub b: usize,
    pub pattern: PairPattern<'w>,
}

fn weight_matrix(pattern: PairPattern<'_>, rows: usize, cols: usize) -> Array2<f64> {
    match pattern {
        PairPattern::OffDiagonal(w) => Array2::from_shape_fn((rows, cols), |(i, j)| if i == j { 0.0 } else { w }),
        PairPattern::Diagonal(ws) => {
            let mut m = Array2::zeros((rows, cols));
            for (k, &w) in ws.iter().enumerate() {
                m[[k, k]] = w;
            }
            m
        }
    }
}

/// `(sum w k, sum w k d²)` over one block of a Gaussian kernel with
/// `k = exp(-c d²)`, without materializing the weighted matrices.
fn gaussian_block_sums(a: &Embedded, b: &Embedded, pattern: PairPattern<'_>, c: f64) -> (f64, f64) {
    match pattern {
        PairPattern::OffDiagonal(w) => {
            let d2 = sq_dist_matrix(&a.raw, &a.raw_sq, &b.raw, &b.raw_sq);
            let (mut k_sum, mut kd_sum) = (0.0, 0.0);
            for ((i, j), &r) in d2.indexed_iter() {
                if i != j {
                    let k = (-r * c).exp();
                    k_sum += k;
                    kd_sum += k * r;
                }
            }
            (w * k_sum, w * kd_sum)
        }
        PairPattern::Diagonal(ws) => {
            let (mut k_sum, mut kd_sum) = (0.0, 0.0);
            for (idx, &w) in ws.iter().enumerate() {
                let diff = &a.raw.row(idx) - &b.raw.row(idx);
                let r = diff.dot(&diff);
                let k = (-r * c).exp();
                k_sum += w * k;
                kd_sum += w * k * r;
            }
            (k_sum, kd_sum)
        }
    }
}

/// [`gaussian_block_sums`] for a set paired with itself, visiting each
/// unordered off-diagonal pair once.
fn gaussian_self_block_sums(a: &Embedded, pattern: PairPattern<'_>, c: f64) -> (f64, f64) {
    let PairPattern::OffDiagonal(w) = pattern else {
        return gaussian_block_sums(a, a, pattern, c);
    };
    let n = a.raw.nrows();
    let (mut k_sum, mut kd_sum) = (0.0, 0.0);
    for i in 0..n {
        let ri = a.raw.row(i);
        for j in (i + 1)..n {
            let r = (a.raw_sq[i] + a.raw_sq[j] - 2.0 * ri.dot(&a.raw.row(j))).max(0.0);
            let k = (-r * c).exp();
            k_sum += k;
            kd_sum += k * r;
        }
    }
    (2.0 * w * k_sum, 2.0 * w * kd_sum)
}

/// Value and exact gradient of a sum of weighted kernel blocks over a
/// collection of point sets. Each set is embedded once and its feature
/// gradients from all blocks are backpropagated together.
pub(crate) fn weighted_blocks_value_and_gradient(
    params: &KernelParams,
    sets: &[ArrayView2<f64>],
    blocks: &[WeightedBlock<'_>],
) -> Result<(f64, ParamGradient)> {
    for s in sets {
        params.check_dim(s.ncols())?;
    }
    let embedded: Vec<Embedded> = sets.iter().map(|s| embed(params, *s)).collect();
    let mut grad = ParamGradient::zeros_like(params);
    let mut value = 0.0;

    match params {
        KernelParams::Gaussian(g) => {
            let inv_s2 = 1.0 / g.bandwidth().powi(2);
            for blk in blocks {
                let (k_sum, kd_sum) = if blk.a == blk.b {
                    gaussian_self_block_sums(&embedded[blk.a], blk.pattern, 0.5 * inv_s2)
                } else {
                    gaussian_block_sums(&embedded[blk.a], &embedded[blk.b], blk.pattern, 0.5 * inv_s2)
                };
                value += k_sum;
                grad.values[0] += kd_sum * inv_s2;
            }
        }
        KernelParams::Deep(p) => {
            let eps = p.epsilon();
            let inv_s1 = 1.0 / p.bw_feature().powi(2);
            let inv_s2 = 1.0 / p.bw_raw().powi(2);
            let mut d_feat: Vec<Array2<f64>> = embedded
                .iter()
                .map(|e| Array2::zeros(e.feat.as_ref().expect("features").0.raw_dim()))
                .collect();
            for blk in blocks {
                let (ea, eb) = (&embedded[blk.a], &embedded[blk.b]);
                let t = block_terms(params, ea, eb);
                let (g1, g2, feat_d2) = t.deep.as_ref().expect("deep terms");
                let w = weight_matrix(blk.pattern, t.k.nrows(), t.k.ncols());
                let wk = &w * &t.k;
                value += wk.sum();
                // d/d log s2
                grad.values[1] += (&wk * &t.raw_d2).sum() * inv_s2;
                // d/d logit eps: (1 - G1) G2 eps (1 - eps)
                let one_minus_g1 = g1.mapv(|v| 1.0 - v);
                grad.values[2] += (&w * &one_minus_g1 * g2).sum() * eps * (1.0 - eps);
                // c_ij = w (1-eps) G2 G1, shared by the feature bandwidth and
                // feature-position derivatives.
                let c = (&w * g2 * g1) * (1.0 - eps);
                grad.values[0] += (&c * feat_d2).sum() * inv_s1;
                // dk/dphi_a = -c (phi_a - phi_b)/s1^2, dk/dphi_b = +c (phi_a - phi_b)/s1^2
                let fa = &ea.feat.as_ref().expect("features").0;
                let fb = &eb.feat.as_ref().expect("features").0;
                let row = c.sum_axis(Axis(1));
                let col = c.sum_axis(Axis(0));
                let c_fb = c.dot(fb);
                let ct_fa = c.t().dot(fa);
                let mut ga = fa * &row.insert_axis(Axis(1));
                ga -= &c_fb;
                ga *= -inv_s1;
                let mut gb = fb * &col.insert_axis(Axis(1));
                gb -= &ct_fa;
                gb *= -inv_s1;
                d_feat[blk.a] += &ga;
                d_feat[blk.b] += &gb;
            }
            for (e, df) in embedded.iter().zip(d_feat) {
                let cache = &e.feat.as_ref().expect("features").2;
                p.network.backward_batch(cache, df, &mut grad.values[3..]);
            }
        }
    }
    if !value.is_finite() || !grad.is_finite() {
        return Err(AmdError::Numeric("non-finite kernel sum or gradient".into()));
    }
    Ok((value, grad))
}

/// Exact gradient of `sum_k w_k k(a_k, b_k)` with respect to every free
/// kernel parameter.
pub fn pairwise_weighted_gradient(
    params: &KernelParams,
    pairs: &[(ArrayView1<f64>, ArrayView1<f64>, f64)],
) -> Result<ParamGradient> {
    if pairs.is_empty() {
        return Ok(ParamGradient::zeros_like(params));
    }
    let d = pairs[0].0.len();
    if pairs.iter().any(|(a, b, _)| a.len() != d || b.len() != d) {
        return Err(AmdError::Dimension("pairs have inconsistent dimensions".into()));
    }
    let n = pairs.len();
    let mut a = Array2::zeros((n, d));
    let mut b = Array2::zeros((n, d));
    let mut w = Vec::with_capacity(n);
    for (k, (pa, pb, pw)) in pairs.iter().enumerate() {
        a.row_mut(k).assign(pa);
        b.row_mut(k).assign(pb);
        w.push(*pw);
    }
    let blocks = [WeightedBlock { a: 0, b: 1, pattern: PairPattern::Diagonal(&w) }];
    let (_, g) = weighted_blocks_value_and_gradient(params, &[a.view(), b.view()], &blocks)?;
    Ok(g)
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let cmp = |x: &f64, y: &f64| x.total_cmp(y);
    let (_, hi, _) = v.select_nth_unstable_by(n / 2, cmp);
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

fn cross_distances(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.nrows() * b.nrows());
    for ra in a.rows() {
        for rb in b.rows() {
            out.push(sq_dist(ra, rb).sqrt());
        }
    }
    out
}

/// Median-heuristic Gaussian bandwidth: the average of the median anchor–P
/// distance and the median anchor–Q distance, over all cross pairs.
pub fn median_heuristic(z: ArrayView2<f64>, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<GaussianParams> {
    if z.nrows() == 0 || x.nrows() == 0 || y.nrows() == 0 {
        return Err(AmdError::Input("median heuristic needs at least one row per sample".into()));
    }
    if z.ncols() != x.ncols() || z.ncols() != y.ncols() {
        return Err(AmdError::Dimension("samples have different column counts".into()));
    }
    let mzx = median_in_place(&mut cross_distances(z, x));
    let mzy = median_in_place(&mut cross_distances(z, y));
    let sigma = 0.5 * (mzx + mzy);
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(AmdError::Degenerate("median pairwise distance is zero".into()));
    }
    GaussianParams::from_bandwidth(sigma)
}

/// Feature map of one point under `net`.
pub fn network_forward(net: &NetworkParams, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    net.forward(x)
}

/// Deep kernel initialized from data: uniform network weights, `eps = 0.5`,
/// raw bandwidth from the median heuristic on the inputs and feature
/// bandwidth from the median heuristic on the initial features.
pub fn init_deep_kernel<R: Rng + ?Sized>(
    z: ArrayView2<f64>,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    hidden: &[usize],
    rng: &mut R,
) -> Result<DeepKernelParams> {
    let d = z.ncols();
    let dims: Vec<usize> = std::iter::once(d).chain(hidden.iter().copied()).collect();
    let network = NetworkParams::init_uniform(&dims, rng)?;
    let raw = median_heuristic(z, x, y)?;
    let (fz, _) = network.forward_batch(z);
    let (fx, _) = network.forward_batch(x);
    let (fy, _) = network.forward_batch(y);
    let feat = median_heuristic(fz.view(), fx.view(), fy.view())?;
    Ok(DeepKernelParams {
        network,
        log_bw_feature: feat.log_bandwidth,
        log_bw_raw: raw.log_bandwidth,
        logit_eps: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array};
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gauss(sigma: f64) -> KernelParams {
        KernelParams::Gaussian(GaussianParams::from_bandwidth(sigma).unwrap())
    }

    fn random_deep(d: usize, rng: &mut ChaCha8Rng) -> KernelParams {
        let network = NetworkParams::init_uniform(&[d, 5, 4], rng).unwrap();
        KernelParams::Deep(DeepKernelParams {
            network,
            log_bw_feature: rng.random_range(-0.5..0.5),
            log_bw_raw: rng.random_range(-0.2..0.8),
            logit_eps: rng.random_range(-1.0..1.0),
        })
    }

    #[test]
    fn gaussian_values() {
        let k = gauss(1.0);
        assert_eq!(kernel_eval(&k, array![0.0].view(), array![0.0].view()).unwrap(), 1.0);
        assert_abs_diff_eq!(
            kernel_eval(&k, array![0.0].view(), array![1.0].view()).unwrap(),
            (-0.5f64).exp(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn deep_identical_inputs_give_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_deep(3, &mut rng);
        let x = array![0.3, -1.2, 2.0];
        assert_eq!(kernel_eval(&k, x.view(), x.view()).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_deep(3, &mut rng);
        assert!(matches!(
            kernel_eval(&k, array![0.0, 1.0].view(), array![0.0, 1.0].view()),
            Err(AmdError::Dimension(_))
        ));
        assert!(kernel_eval(&gauss(1.0), array![0.0].view(), array![0.0, 1.0].view()).is_err());
        let a = Array2::<f64>::zeros((2, 2));
        let b = Array2::<f64>::zeros((2, 3));
        assert!(gram_block(&gauss(1.0), a.view(), b.view()).is_err());
    }

    #[test]
    fn gram_block_closed_form() {
        let a = array![[0.0], [2.0]];
        let b = array![[1.0], [3.0]];
        let g = gram_block(&gauss(1.0), a.view(), b.view()).unwrap();
        let e = |r2: f64| (-r2 / 2.0).exp();
        let expect = array![[e(1.0), e(9.0)], [e(1.0), e(1.0)]];
        for (x, y) in g.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn gram_block_diagonal_and_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = random_deep(2, &mut rng);
        let a = Array::from_shape_fn((6, 2), |_| rng.random_range(-2.0..2.0));
        let b = Array::from_shape_fn((4, 2), |_| rng.random_range(-2.0..2.0));
        let aa = gram_block(&k, a.view(), a.view()).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(aa[[i, i]], 1.0, epsilon = 1e-12);
        }
        let ab = gram_block(&k, a.view(), b.view()).unwrap();
        let ba = gram_block(&k, b.view(), a.view()).unwrap();
        for ((i, j), v) in ab.indexed_iter() {
            assert_abs_diff_eq!(*v, ba[[j, i]], epsilon = 1e-12);
            assert_abs_diff_eq!(*v, kernel_eval(&k, a.row(i), b.row(j)).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn large_logit_eps_reduces_to_raw_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let KernelParams::Deep(mut p) = random_deep(3, &mut rng) else { unreachable!() };
            p.logit_eps = 30.0;
            let raw = gauss(p.bw_raw());
            let k = KernelParams::Deep(p);
            let a = Array::from_shape_fn(3, |_| rng.random_range(-2.0..2.0));
            let b = Array::from_shape_fn(3, |_| rng.random_range(-2.0..2.0));
            let diff = kernel_eval(&k, a.view(), b.view()).unwrap() - kernel_eval(&raw, a.view(), b.view()).unwrap();
            assert!(diff.abs() < 1e-9, "diff {diff}");
        }
    }

    #[test]
    fn empty_pairs_zero_gradient() {
        let g = pairwise_weighted_gradient(&gauss(1.3), &[]).unwrap();
        assert_eq!(g.values, vec![0.0]);
    }

    #[test]
    fn identical_pair_has_no_bandwidth_gradient() {
        let x = array![1.0, -2.0];
        let g = pairwise_weighted_gradient(&gauss(0.7), &[(x.view(), x.view(), 3.0)]).unwrap();
        assert_eq!(g.values, vec![0.0]);
    }

    /// Central differences of `sum w k(a, b)` in the flat parameter space.
    fn fd_gradient(params: &KernelParams, pairs: &[(Array1<f64>, Array1<f64>, f64)], h: f64) -> Vec<f64> {
        let base = params.to_flat();
        let f = |flat: &[f64]| -> f64 {
            let p = params.with_flat(flat).unwrap();
            pairs.iter().map(|(a, b, w)| w * kernel_eval(&p, a.view(), b.view()).unwrap()).sum()
        };
        (0..base.len())
            .map(|i| {
                let mut up = base.clone();
                let mut dn = base.clone();
                up[i] += h;
                dn[i] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn pairwise_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for draw in 0..20 {
            let d = 2 + draw % 3;
            let params = if draw % 4 == 0 {
                gauss(rng.random_range(0.5..2.0))
            } else {
                random_deep(d, &mut rng)
            };
            let pairs: Vec<_> = (0..10)
                .map(|_| {
                    (
                        Array::from_shape_fn(d, |_| rng.random_range(-1.5..1.5)),
                        Array::from_shape_fn(d, |_| rng.random_range(-1.5..1.5)),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            let views: Vec<_> = pairs.iter().map(|(a, b, w)| (a.view(), b.view(), *w)).collect();
            let g = pairwise_weighted_gradient(&params, &views).unwrap();
            let fd = fd_gradient(&params, &pairs, 1e-5);
            for (i, (a, b)) in g.values.iter().zip(&fd).enumerate() {
                assert!(rel_err(*a, *b) < 1e-5, "draw {draw} coord {i}: exact {a} vs fd {b}");
            }
        }
    }

    #[test]
    fn network_identity_layer() {
        let net = NetworkParams::new(vec![DenseLayer { weight: Array2::eye(3), bias: Array1::zeros(3) }]).unwrap();
        let x = array![0.5, -1.0, 2.0];
        assert_eq!(network_forward(&net, x.view()).unwrap(), x);
        assert_eq!(net.output_dim(), 3);
    }

    #[test]
    fn network_zero_hidden_layer() {
        let w2 = array![[1.0, 2.0, 3.0], [-1.0, 0.0, 0.5]];
        let b2 = array![0.25, -0.5];
        let net = NetworkParams::new(vec![
            DenseLayer { weight: Array2::zeros((3, 2)), bias: Array1::zeros(3) },
            DenseLayer { weight: w2.clone(), bias: b2.clone() },
        ])
        .unwrap();
        let out = network_forward(&net, array![3.0, -4.0].view()).unwrap();
        let ln2 = 2f64.ln();
        let expect = &b2 + &w2.dot(&Array1::from_elem(3, ln2));
        for (a, b) in out.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        assert_eq!(out.len(), 2);
        assert!(network_forward(&net, array![1.0].view()).is_err());
    }

    #[test]
    fn network_rejects_inconsistent_layers() {
        let bad = NetworkParams::new(vec![
            DenseLayer { weight: Array2::zeros((3, 2)), bias: Array1::zeros(3) },
            DenseLayer { weight: Array2::zeros((2, 4)), bias: Array1::zeros(2) },
        ]);
        assert!(matches!(bad, Err(AmdError::Dimension(_))));
    }

    #[test]
    fn median_heuristic_enumerated() {
        let z = array![[0.0], [2.0]];
        let x = array![[1.0], [3.0]];
        let y = array![[0.0], [4.0]];
        let g = median_heuristic(z.view(), x.view(), y.view()).unwrap();
        assert_abs_diff_eq!(g.bandwidth(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn median_heuristic_degenerate() {
        let z = Array2::<f64>::from_elem((4, 2), 1.0);
        assert!(matches!(
            median_heuristic(z.view(), z.view(), z.view()),
            Err(AmdError::Degenerate(_))
        ));
    }

    #[test]
    fn median_heuristic_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Array::from_shape_fn((7, 2), |_| rng.random_range(-1.0..1.0));
        let x = Array::from_shape_fn((7, 2), |_| rng.random_range(-1.0..1.0));
        let y = Array::from_shape_fn((7, 2), |_| rng.random_range(-1.0..1.0));
        let s = median_heuristic(z.view(), x.view(), y.view()).unwrap().bandwidth();
        let c = 3.5;
        let s2 = median_heuristic((&z * c).view(), (&x * c).view(), (&y * c).view()).unwrap().bandwidth();
        assert_abs_diff_eq!(s2, c * s, epsilon = 1e-12);
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_deep(2, &mut rng);
        let flat = k.to_flat();
        assert_eq!(flat.len(), k.n_params());
        assert_eq!(k.with_flat(&flat).unwrap(), k);
    }

    proptest! {
        #[test]
        fn kernel_symmetric_and_bounded(
            seed in 0u64..1000,
            a in proptest::collection::vec(-3.0f64..3.0, 2),
            b in proptest::collection::vec(-3.0f64..3.0, 2),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_deep(2, &mut rng);
            let (a, b) = (Array1::from(a), Array1::from(b));
            let ab = kernel_eval(&k, a.view(), b.view()).unwrap();
            let ba = kernel_eval(&k, b.view(), a.view()).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab > 0.0 && ab <= 1.0);
            prop_assert_eq!(kernel_eval(&k, a.view(), a.view()).unwrap(), 1.0);
        }

        #[test]
        fn median_heuristic_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Array::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
            let x = Array::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
            let y = Array::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
            let rev = |m: &Array2<f64>| m.slice(ndarray::s![..;-1, ..]).to_owned();
            let s1 = median_heuristic(z.view(), x.view(), y.view()).unwrap();
            let s2 = median_heuristic(rev(&z).view(), x.view(), rev(&y).view()).unwrap();
            prop_assert!((s1.log_bandwidth - s2.log_bandwidth).abs() < 1e-14);
        }
    }
}
