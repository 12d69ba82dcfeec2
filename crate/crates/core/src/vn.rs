//! Vector-list features and the SO(3)-equivariant layer kit.
//!
//! Every layer keeps the rotation action `v ↦ v·R` on each 3-vector channel
//! intact: `L(V·R) = L(V)·R`. The equivariant-to-invariant layer [`E2i`]
//! contracts two equivariant branches into per-point Gram matrices, which do
//! not change under rotation.
//!
//! Forward passes are pure (`&self`) and return a cache; backward passes take
//! that cache, accumulate parameter gradients and return the input gradient.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Rotation;
use crate::linalg::{gemm, Mat, Mlp2, Mlp2Cache};
use crate::params::{Param, Parameterized};

/// `‖k‖` below which VN-ReLU passes `q` through unchanged.
pub const DIRECTION_EPS: f64 = 1e-12;
/// Floor applied to channel norms before dividing in batch norm.
pub const NORM_FLOOR: f64 = 1e-8;
/// Variance epsilon of the scalar batch norm applied to the norms.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("no forward pass recorded for backward")]
    NoForwardRecorded,
}

impl From<crate::linalg::ShapeError> for VnError {
    fn from(e: crate::linalg::ShapeError) -> Self {
        VnError::ShapeMismatch(e.to_string())
    }
}

/// `N × C × 3` features: `N` points, `C` vector channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorFeature {
    pub n: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

/// `N × S` rotation-invariant per-point channels.
pub type ScalarFeature = Mat;

impl VectorFeature {
    pub fn zeros(n: usize, c: usize) -> Self {
        Self {
            n,
            c,
            data: vec![0.0; n * c * 3],
        }
    }

    pub fn from_vec(n: usize, c: usize, data: Vec<f64>) -> Result<Self, VnError> {
        if data.len() != n * c * 3 {
            return Err(VnError::ShapeMismatch(format!("{} values for {n}×{c}×3", data.len())));
        }
        Ok(Self { n, c, data })
    }

    pub fn random(n: usize, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            n,
            c,
            data: (0..n * c * 3).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    #[inline]
    pub fn at(&self, point: usize, channel: usize) -> [f64; 3] {
        let o = (point * self.c + channel) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set(&mut self, point: usize, channel: usize, v: [f64; 3]) {
        let o = (point * self.c + channel) * 3;
        self.data[o..o + 3].copy_from_slice(&v);
    }

    /// Flattened channels of one point, channel-major then xyz.
    pub fn point(&self, point: usize) -> &[f64] {
        &self.data[point * self.c * 3..(point + 1) * self.c * 3]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `N × 3C` scalar view, channel-major then xyz.
    pub fn flatten(&self) -> Mat {
        Mat {
            rows: self.n,
            cols: self.c * 3,
            data: self.data.clone(),
        }
    }

    pub fn from_flat(m: Mat) -> Result<Self, VnError> {
        if !m.cols.is_multiple_of(3) {
            return Err(VnError::ShapeMismatch(format!(
                "{} columns is not a multiple of 3",
                m.cols
            )));
        }
        Ok(Self {
            n: m.rows,
            c: m.cols / 3,
            data: m.data,
        })
    }

    /// Channel-wise concatenation per point.
    pub fn concat_channels(&self, other: &VectorFeature) -> Result<VectorFeature, VnError> {
        if self.n != other.n {
            return Err(VnError::ShapeMismatch(format!(
                "cannot concatenate {} points with {}",
                self.n, other.n
            )));
        }
        let c = self.c + other.c;
        let mut data = Vec::with_capacity(self.n * c * 3);
        for i in 0..self.n {
            data.extend_from_slice(self.point(i));
            data.extend_from_slice(other.point(i));
        }
        Ok(VectorFeature { n: self.n, c, data })
    }

    pub fn permute_points(&self, perm: &[usize]) -> VectorFeature {
        let mut out = VectorFeature::zeros(perm.len(), self.c);
        let w = self.c * 3;
        for (i, &p) in perm.iter().enumerate() {
            out.data[i * w..(i + 1) * w].copy_from_slice(self.point(p));
        }
        out
    }

    pub fn sub(&self, other: &VectorFeature) -> VectorFeature {
        VectorFeature {
            n: self.n,
            c: self.c,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Right action `v ↦ v·R` on every 3-vector channel.
///
/// This is the single definition of how a rotation acts on features; every
/// equivariance check and the consistency loss go through it.
pub fn rotate_feature(v: &VectorFeature, r: &Rotation) -> VectorFeature {
    let m = r.matrix();
    let mut out = VectorFeature::zeros(v.n, v.c);
    for (src, dst) in v.data.chunks_exact(3).zip(out.data.chunks_exact_mut(3)) {
        for j in 0..3 {
            dst[j] = src[0] * m[(0, j)] + src[1] * m[(1, j)] + src[2] * m[(2, j)];
        }
    }
    out
}

/// `‖L(V·R) − L(V)·R‖_max / (1 + ‖L(V)‖_max)`.
pub fn equivariance_residual(rotated_then_mapped: &VectorFeature, mapped: &VectorFeature, r: &Rotation) -> f64 {
    let expected = rotate_feature(mapped, r);
    let diff = rotated_then_mapped
        .data
        .iter()
        .zip(&expected.data)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / (1.0 + mapped.max_abs())
}

#[inline]
fn dot3(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// `out[n] = W · V[n]` for `W: c_out × c_in`, as three strided GEMMs.
fn channel_mix(w: &[f64], c_out: usize, x: &VectorFeature) -> VectorFeature {
    let (n, c_in) = (x.n, x.c);
    let mut y = VectorFeature::zeros(n, c_out);
    if n == 0 {
        return y;
    }
    for k in 0..3 {
        gemm(
            c_out,
            c_in,
            n,
            1.0,
            w,
            c_in,
            1,
            &x.data[k..],
            3,
            3 * c_in,
            0.0,
            &mut y.data[k..],
            3,
            3 * c_out,
        );
    }
    y
}

/// Backward of [`channel_mix`]: accumulates `dW` and adds `Wᵀ·dY` into `dx`.
fn channel_mix_backward(w: &[f64], w_grad: &mut [f64], x: &VectorFeature, dy: &VectorFeature, dx: &mut VectorFeature) {
    let (n, c_in, c_out) = (x.n, x.c, dy.c);
    if n == 0 {
        return;
    }
    for k in 0..3 {
        // dW (c_out×c_in) += dY_k (c_out×n) · X_kᵀ (n×c_in)
        gemm(
            c_out,
            n,
            c_in,
            1.0,
            &dy.data[k..],
            3,
            3 * c_out,
            &x.data[k..],
            3 * c_in,
            3,
            1.0,
            w_grad,
            c_in,
            1,
        );
        // dX_k (c_in×n) += Wᵀ (c_in×c_out) · dY_k (c_out×n)
        gemm(
            c_in,
            c_out,
            n,
            1.0,
            w,
            1,
            c_in,
            &dy.data[k..],
            3,
            3 * c_out,
            1.0,
            &mut dx.data[k..],
            3,
            3 * c_in,
        );
    }
}

/// Channel-mixing linear map `V' = W·V`.
#[derive(Debug, Clone)]
pub struct VnLinear {
    pub weight: Param,
}

impl VnLinear {
    pub fn init(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::gaussian(&format!("{name}.weight"), vec![c_out, c_in], c_in.max(1), rng),
        }
    }

    pub fn from_weights(name: &str, c_in: usize, c_out: usize, w: Vec<f64>) -> Result<Self, VnError> {
        if w.len() != c_in * c_out {
            return Err(VnError::ShapeMismatch(format!(
                "{} weights for {c_out}×{c_in}",
                w.len()
            )));
        }
        let mut weight = Param::zeros(&format!("{name}.weight"), vec![c_out, c_in]);
        weight.value = w;
        Ok(Self { weight })
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &VectorFeature) -> Result<VectorFeature, VnError> {
        if x.c != self.c_in() {
            return Err(VnError::ShapeMismatch(format!(
                "{} expects {} channels, got {}",
                self.weight.name,
                self.c_in(),
                x.c
            )));
        }
        Ok(channel_mix(&self.weight.value, self.c_out(), x))
    }

    /// `x` is the input of the recorded forward pass.
    pub fn backward(&mut self, x: &VectorFeature, dy: &VectorFeature) -> VectorFeature {
        let mut dx = VectorFeature::zeros(x.n, x.c);
        channel_mix_backward(&self.weight.value, &mut self.weight.grad, x, dy, &mut dx);
        dx
    }
}

impl Parameterized for VnLinear {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
    }
}

/// Vector ReLU: `q = W·V`, `k = U·V`; keep `q` when `⟨q,k⟩ ≥ 0`, otherwise
/// remove its component along `k`.
#[derive(Debug, Clone)]
pub struct VnRelu {
    pub w: Param,
    pub u: Param,
}

#[derive(Debug, Clone)]
pub struct VnReluCache {
    input: VectorFeature,
    q: VectorFeature,
    k: VectorFeature,
}

/// One channel of VN-ReLU.
#[inline]
pub fn truncate_half_space(q: [f64; 3], k: [f64; 3]) -> [f64; 3] {
    let s = dot3(&q, &k);
    let kk = dot3(&k, &k);
    if s >= 0.0 || kk.sqrt() < DIRECTION_EPS {
        q
    } else {
        let f = s / kk;
        [q[0] - f * k[0], q[1] - f * k[1], q[2] - f * k[2]]
    }
}

impl VnRelu {
    pub fn init(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Param::gaussian(&format!("{name}.w"), vec![c_out, c_in], c_in.max(1), rng),
            u: Param::gaussian(&format!("{name}.u"), vec![c_out, c_in], c_in.max(1), rng),
        }
    }

    pub fn c_in(&self) -> usize {
        self.w.shape[1]
    }

    pub fn c_out(&self) -> usize {
        self.w.shape[0]
    }

    pub fn forward(&self, x: &VectorFeature) -> Result<(VectorFeature, VnReluCache), VnError> {
        if x.c != self.c_in() {
            return Err(VnError::ShapeMismatch(format!(
                "{} expects {} channels, got {}",
                self.w.name,
                self.c_in(),
                x.c
            )));
        }
        let q = channel_mix(&self.w.value, self.c_out(), x);
        let k = channel_mix(&self.u.value, self.c_out(), x);
        let mut out = VectorFeature::zeros(x.n, self.c_out());
        for ((o, qv), kv) in out
            .data
            .chunks_exact_mut(3)
            .zip(q.data.chunks_exact(3))
            .zip(k.data.chunks_exact(3))
        {
            o.copy_from_slice(&truncate_half_space([qv[0], qv[1], qv[2]], [kv[0], kv[1], kv[2]]));
        }
        Ok((out, VnReluCache { input: x.clone(), q, k }))
    }

    pub fn backward(&mut self, cache: &VnReluCache, dy: &VectorFeature) -> VectorFeature {
        let mut dq = VectorFeature::zeros(cache.q.n, cache.q.c);
        let mut dk = VectorFeature::zeros(cache.k.n, cache.k.c);
        for (((g, q), k), (dqv, dkv)) in dy
            .data
            .chunks_exact(3)
            .zip(cache.q.data.chunks_exact(3))
            .zip(cache.k.data.chunks_exact(3))
            .zip(dq.data.chunks_exact_mut(3).zip(dk.data.chunks_exact_mut(3)))
        {
            let s = dot3(q, k);
            let kk = dot3(k, k);
            if s >= 0.0 || kk.sqrt() < DIRECTION_EPS {
                dqv.copy_from_slice(g);
                continue;
            }
            // out = q − (s/kk)·k
            let gk = dot3(g, k);
            let f = s / kk;
            for j in 0..3 {
                dqv[j] = g[j] - gk / kk * k[j];
                dkv[j] = -f * g[j] - gk * (q[j] / kk - 2.0 * s * k[j] / (kk * kk));
            }
        }
        let mut dx = VectorFeature::zeros(cache.input.n, cache.input.c);
        channel_mix_backward(&self.w.value, &mut self.w.grad, &cache.input, &dq, &mut dx);
        channel_mix_backward(&self.u.value, &mut self.u.grad, &cache.input, &dk, &mut dx);
        dx
    }
}

impl Parameterized for VnRelu {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w);
        f(&self.u);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.u);
    }
}

/// Channel-wise mean over points, `N×C×3 → 1×C×3`.
pub fn vn_mean_pool(v: &VectorFeature) -> Result<VectorFeature, VnError> {
    if v.n == 0 {
        return Err(VnError::EmptyInput);
    }
    let mut out = VectorFeature::zeros(1, v.c);
    for i in 0..v.n {
        for (o, x) in out.data.iter_mut().zip(v.point(i)) {
            *o += x;
        }
    }
    let inv = 1.0 / v.n as f64;
    out.data.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

pub fn vn_mean_pool_backward(n: usize, dy: &VectorFeature) -> VectorFeature {
    let mut dx = VectorFeature::zeros(n, dy.c);
    let inv = 1.0 / n as f64;
    let w = dy.c * 3;
    for i in 0..n {
        for (d, g) in dx.data[i * w..(i + 1) * w].iter_mut().zip(&dy.data) {
            *d = g * inv;
        }
    }
    dx
}

/// Appends the mean-pooled channels to every point: `N×C×3 → N×2C×3`.
pub fn global_concat(v: &VectorFeature) -> Result<VectorFeature, VnError> {
    let pooled = vn_mean_pool(v)?;
    let mut out = VectorFeature::zeros(v.n, 2 * v.c);
    let w = v.c * 3;
    for i in 0..v.n {
        out.data[i * 2 * w..i * 2 * w + w].copy_from_slice(v.point(i));
        out.data[i * 2 * w + w..(i + 1) * 2 * w].copy_from_slice(&pooled.data);
    }
    Ok(out)
}

pub fn global_concat_backward(c: usize, dy: &VectorFeature) -> VectorFeature {
    let n = dy.n;
    let w = c * 3;
    let mut dx = VectorFeature::zeros(n, c);
    let mut pooled_grad = vec![0.0; w];
    for i in 0..n {
        let row = dy.point(i);
        dx.data[i * w..(i + 1) * w].copy_from_slice(&row[..w]);
        for (p, g) in pooled_grad.iter_mut().zip(&row[w..]) {
            *p += g;
        }
    }
    let inv = 1.0 / n as f64;
    for i in 0..n {
        for (d, p) in dx.data[i * w..(i + 1) * w].iter_mut().zip(&pooled_grad) {
            *d += p * inv;
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch norm over channel norms; directions are untouched.
///
/// Statistics are per channel over every (sample, point) pair in the batch.
#[derive(Debug, Clone)]
pub struct VnBatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct VnBatchNormCache {
    inputs: Vec<VectorFeature>,
    /// Raw norms per sample, `n × c`.
    norms: Vec<Vec<f64>>,
    /// Normalised norms `x̂` per sample.
    normalized: Vec<Vec<f64>>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    mode: BnMode,
}

impl VnBatchNorm {
    pub fn new(name: &str, c: usize) -> Self {
        Self {
            gamma: Param::filled(&format!("{name}.gamma"), vec![c], 1.0),
            beta: Param::zeros(&format!("{name}.beta"), vec![c]),
            running_mean: Param::zeros(&format!("{name}.running_mean"), vec![c]).frozen(),
            running_var: Param::filled(&format!("{name}.running_var"), vec![c], 1.0).frozen(),
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(
        &self,
        batch: &[VectorFeature],
        mode: BnMode,
    ) -> Result<(Vec<VectorFeature>, VnBatchNormCache), VnError> {
        let c = self.channels();
        if batch.is_empty() {
            return Err(VnError::EmptyInput);
        }
        if let Some(bad) = batch.iter().find(|v| v.c != c) {
            return Err(VnError::ShapeMismatch(format!(
                "batch norm over {c} channels got {}",
                bad.c
            )));
        }
        let norms: Vec<Vec<f64>> = batch
            .iter()
            .map(|v| v.data.chunks_exact(3).map(|x| dot3(x, x).sqrt()).collect())
            .collect();
        let (mean, var) = match mode {
            BnMode::Train => {
                let count: usize = batch.iter().map(|v| v.n).sum();
                if count == 0 {
                    return Err(VnError::EmptyInput);
                }
                let mut mean = vec![0.0; c];
                for ns in &norms {
                    for row in ns.chunks_exact(c) {
                        for (m, x) in mean.iter_mut().zip(row) {
                            *m += x;
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; c];
                for ns in &norms {
                    for row in ns.chunks_exact(c) {
                        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                            *v += (x - m) * (x - m);
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var)
            }
            BnMode::Eval => (self.running_mean.value.clone(), self.running_var.value.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut outputs = Vec::with_capacity(batch.len());
        let mut normalized = Vec::with_capacity(batch.len());
        for (v, ns) in batch.iter().zip(&norms) {
            let mut out = VectorFeature::zeros(v.n, c);
            let mut xhat = vec![0.0; ns.len()];
            for (idx, (src, dst)) in v.data.chunks_exact(3).zip(out.data.chunks_exact_mut(3)).enumerate() {
                let ch = idx % c;
                let xh = (ns[idx] - mean[ch]) * inv_std[ch];
                xhat[idx] = xh;
                let target = self.gamma.value[ch] * xh + self.beta.value[ch];
                let scale = target / ns[idx].max(NORM_FLOOR);
                for j in 0..3 {
                    dst[j] = src[j] * scale;
                }
            }
            outputs.push(out);
            normalized.push(xhat);
        }
        Ok((
            outputs,
            VnBatchNormCache {
                inputs: batch.to_vec(),
                norms,
                normalized,
                batch_mean: mean,
                batch_var: var,
                mode,
            },
        ))
    }

    pub fn backward(&mut self, cache: &VnBatchNormCache, dys: &[VectorFeature]) -> Vec<VectorFeature> {
        let c = self.channels();
        let inv_std: Vec<f64> = cache.batch_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        // gradient w.r.t. the batch-normed norm N' and the direct path through v
        let mut d_target: Vec<Vec<f64>> = Vec::with_capacity(dys.len());
        let mut dxs: Vec<VectorFeature> = Vec::with_capacity(dys.len());
        let mut d_norm_direct: Vec<Vec<f64>> = Vec::with_capacity(dys.len());
        for (b, dy) in dys.iter().enumerate() {
            let v = &cache.inputs[b];
            let ns = &cache.norms[b];
            let xhat = &cache.normalized[b];
            let mut dt = vec![0.0; ns.len()];
            let mut dn = vec![0.0; ns.len()];
            let mut dx = VectorFeature::zeros(v.n, c);
            for (idx, ((src, g), d)) in v
                .data
                .chunks_exact(3)
                .zip(dy.data.chunks_exact(3))
                .zip(dx.data.chunks_exact_mut(3))
                .enumerate()
            {
                let ch = idx % c;
                let target = self.gamma.value[ch] * xhat[idx] + self.beta.value[ch];
                let nf = ns[idx].max(NORM_FLOOR);
                let gv = dot3(g, src);
                for j in 0..3 {
                    d[j] = g[j] * target / nf;
                }
                dt[idx] = gv / nf;
                if ns[idx] > NORM_FLOOR {
                    dn[idx] = -gv * target / (nf * nf);
                }
            }
            d_target.push(dt);
            d_norm_direct.push(dn);
            dxs.push(dx);
        }
        // through the scalar batch norm
        let mut sum_dxhat = vec![0.0; c];
        let mut sum_dxhat_xhat = vec![0.0; c];
        let mut count = 0usize;
        for (b, dt) in d_target.iter().enumerate() {
            let xhat = &cache.normalized[b];
            for (idx, d) in dt.iter().enumerate() {
                let ch = idx % c;
                self.gamma.grad[ch] += d * xhat[idx];
                self.beta.grad[ch] += d;
                let dxh = d * self.gamma.value[ch];
                sum_dxhat[ch] += dxh;
                sum_dxhat_xhat[ch] += dxh * xhat[idx];
            }
            count += cache.inputs[b].n;
        }
        let m = count as f64;
        for (b, dx) in dxs.iter_mut().enumerate() {
            let v = &cache.inputs[b];
            let ns = &cache.norms[b];
            let xhat = &cache.normalized[b];
            for (idx, (src, d)) in v.data.chunks_exact(3).zip(dx.data.chunks_exact_mut(3)).enumerate() {
                let ch = idx % c;
                let dxh = d_target[b][idx] * self.gamma.value[ch];
                let dnorm_bn = match cache.mode {
                    BnMode::Train => inv_std[ch] * (dxh - sum_dxhat[ch] / m - xhat[idx] * sum_dxhat_xhat[ch] / m),
                    BnMode::Eval => dxh * inv_std[ch],
                };
                let dnorm = dnorm_bn + d_norm_direct[b][idx];
                if ns[idx] > 0.0 {
                    for j in 0..3 {
                        d[j] += dnorm * src[j] / ns[idx];
                    }
                }
            }
        }
        dxs
    }

    /// Folds the batch statistics of a training forward pass into the running averages.
    pub fn commit_running_stats(&mut self, cache: &VnBatchNormCache) {
        if cache.mode != BnMode::Train {
            return;
        }
        let m = self.momentum;
        for (r, b) in self.running_mean.value.iter_mut().zip(&cache.batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.value.iter_mut().zip(&cache.batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

impl Parameterized for VnBatchNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Serializable description of one backbone layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear { c_out: usize },
    Relu { c_out: usize },
    BatchNorm,
    MeanPool,
    GlobalConcat,
}

impl LayerSpec {
    pub fn output_channels(&self, c_in: usize) -> usize {
        match *self {
            LayerSpec::Linear { c_out } | LayerSpec::Relu { c_out } => c_out,
            LayerSpec::BatchNorm | LayerSpec::MeanPool => c_in,
            LayerSpec::GlobalConcat => 2 * c_in,
        }
    }
}

#[derive(Debug, Clone)]
pub enum VnLayer {
    Linear(VnLinear),
    Relu(VnRelu),
    BatchNorm(VnBatchNorm),
    MeanPool,
    GlobalConcat,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Linear(Vec<VectorFeature>),
    Relu(Vec<VnReluCache>),
    BatchNorm(VnBatchNormCache),
    MeanPool(Vec<usize>),
    GlobalConcat(usize),
}

/// Record of one forward pass through a [`VnStack`].
#[derive(Debug, Clone, Default)]
pub struct StackTape {
    caches: Vec<LayerCache>,
}

impl StackTape {
    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }
}

/// A sequence of equivariant layers applied to a batch of samples.
#[derive(Debug, Clone)]
pub struct VnStack {
    pub c_in: usize,
    pub layers: Vec<VnLayer>,
}

impl VnStack {
    pub fn init(name: &str, c_in: usize, specs: &[LayerSpec], rng: &mut impl Rng) -> Self {
        let mut c = c_in;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let lname = format!("{name}.{i}");
            layers.push(match *spec {
                LayerSpec::Linear { c_out } => VnLayer::Linear(VnLinear::init(&lname, c, c_out, rng)),
                LayerSpec::Relu { c_out } => VnLayer::Relu(VnRelu::init(&lname, c, c_out, rng)),
                LayerSpec::BatchNorm => VnLayer::BatchNorm(VnBatchNorm::new(&lname, c)),
                LayerSpec::MeanPool => VnLayer::MeanPool,
                LayerSpec::GlobalConcat => VnLayer::GlobalConcat,
            });
            c = spec.output_channels(c);
        }
        Self { c_in, layers }
    }

    pub fn c_out(&self) -> usize {
        let mut c = self.c_in;
        for l in &self.layers {
            c = match l {
                VnLayer::Linear(x) => x.c_out(),
                VnLayer::Relu(x) => x.c_out(),
                VnLayer::BatchNorm(_) | VnLayer::MeanPool => c,
                VnLayer::GlobalConcat => 2 * c,
            };
        }
        c
    }

    pub fn forward(&self, batch: &[VectorFeature], mode: BnMode) -> Result<(Vec<VectorFeature>, StackTape), VnError> {
        let mut x: Vec<VectorFeature> = batch.to_vec();
        let mut tape = StackTape::default();
        for layer in &self.layers {
            let (y, cache) = match layer {
                VnLayer::Linear(l) => {
                    let y = x.iter().map(|v| l.forward(v)).collect::<Result<Vec<_>, _>>()?;
                    (y, LayerCache::Linear(x))
                }
                VnLayer::Relu(l) => {
                    let mut ys = Vec::with_capacity(x.len());
                    let mut cs = Vec::with_capacity(x.len());
                    for v in &x {
                        let (y, c) = l.forward(v)?;
                        ys.push(y);
                        cs.push(c);
                    }
                    (ys, LayerCache::Relu(cs))
                }
                VnLayer::BatchNorm(l) => {
                    let (y, c) = l.forward(&x, mode)?;
                    (y, LayerCache::BatchNorm(c))
                }
                VnLayer::MeanPool => {
                    let ns = x.iter().map(|v| v.n).collect();
                    let y = x.iter().map(vn_mean_pool).collect::<Result<Vec<_>, _>>()?;
                    (y, LayerCache::MeanPool(ns))
                }
                VnLayer::GlobalConcat => {
                    let c = x.first().map(|v| v.c).unwrap_or(0);
                    let y = x.iter().map(global_concat).collect::<Result<Vec<_>, _>>()?;
                    (y, LayerCache::GlobalConcat(c))
                }
            };
            tape.caches.push(cache);
            x = y;
        }
        Ok((x, tape))
    }

    pub fn forward_one(&self, v: &VectorFeature, mode: BnMode) -> Result<(VectorFeature, StackTape), VnError> {
        let (mut out, tape) = self.forward(std::slice::from_ref(v), mode)?;
        Ok((out.pop().expect("one sample"), tape))
    }

    pub fn backward(&mut self, tape: &StackTape, grads: Vec<VectorFeature>) -> Result<Vec<VectorFeature>, VnError> {
        if tape.caches.len() != self.layers.len() {
            return Err(VnError::NoForwardRecorded);
        }
        let mut g = grads;
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches).rev() {
            g = match (layer, cache) {
                (VnLayer::Linear(l), LayerCache::Linear(xs)) => {
                    xs.iter().zip(&g).map(|(x, dy)| l.backward(x, dy)).collect()
                }
                (VnLayer::Relu(l), LayerCache::Relu(cs)) => {
                    cs.iter().zip(&g).map(|(c, dy)| l.backward(c, dy)).collect()
                }
                (VnLayer::BatchNorm(l), LayerCache::BatchNorm(c)) => l.backward(c, &g),
                (VnLayer::MeanPool, LayerCache::MeanPool(ns)) => {
                    ns.iter().zip(&g).map(|(&n, dy)| vn_mean_pool_backward(n, dy)).collect()
                }
                (VnLayer::GlobalConcat, LayerCache::GlobalConcat(c)) => {
                    g.iter().map(|dy| global_concat_backward(*c, dy)).collect()
                }
                _ => return Err(VnError::NoForwardRecorded),
            };
        }
        Ok(g)
    }

    pub fn commit_running_stats(&mut self, tape: &StackTape) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            if let (VnLayer::BatchNorm(l), LayerCache::BatchNorm(c)) = (layer, cache) {
                l.commit_running_stats(c);
            }
        }
    }
}

impl Parameterized for VnStack {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for l in &self.layers {
            match l {
                VnLayer::Linear(x) => x.visit_params(f),
                VnLayer::Relu(x) => x.visit_params(f),
                VnLayer::BatchNorm(x) => x.visit_params(f),
                VnLayer::MeanPool | VnLayer::GlobalConcat => {}
            }
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.layers {
            match l {
                VnLayer::Linear(x) => x.visit_params_mut(f),
                VnLayer::Relu(x) => x.visit_params_mut(f),
                VnLayer::BatchNorm(x) => x.visit_params_mut(f),
                VnLayer::MeanPool | VnLayer::GlobalConcat => {}
            }
        }
    }
}

/// Equivariant-to-invariant layer.
///
/// Two VN-linear branches give `V̂ (C₁×3)` and `T̂ (C₂×3)` per point; their
/// Gram product `V̂·T̂ᵀ` is unchanged by `V ↦ V·R` because `R·Rᵀ = I`. The
/// `C₁·C₂` Gram entries then pass through two dense layers with a ReLU between.
#[derive(Debug, Clone)]
pub struct E2i {
    pub branch_v: VnLinear,
    pub branch_t: VnLinear,
    pub head: Mlp2,
}

#[derive(Debug, Clone)]
pub struct E2iCache {
    input: VectorFeature,
    v_hat: VectorFeature,
    t_hat: VectorFeature,
    head: Mlp2Cache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct E2iSpec {
    pub c_in: usize,
    /// Branch widths; default to `c_in` when absent.
    pub c1: Option<usize>,
    pub c2: Option<usize>,
    pub hidden: usize,
    pub out: usize,
}

impl E2i {
    pub fn init(name: &str, spec: &E2iSpec, rng: &mut impl Rng) -> Self {
        let c1 = spec.c1.unwrap_or(spec.c_in);
        let c2 = spec.c2.unwrap_or(spec.c_in);
        Self {
            branch_v: VnLinear::init(&format!("{name}.branch_v"), spec.c_in, c1, rng),
            branch_t: VnLinear::init(&format!("{name}.branch_t"), spec.c_in, c2, rng),
            head: Mlp2::init(&format!("{name}.head"), c1 * c2, spec.hidden, spec.out, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.head.fc2.outputs()
    }

    /// Per-point Gram entries `⟨V̂_a, T̂_b⟩`, row-major over `(a, b)`.
    pub fn gram(v_hat: &VectorFeature, t_hat: &VectorFeature) -> Mat {
        let (c1, c2) = (v_hat.c, t_hat.c);
        let mut g = Mat::zeros(v_hat.n, c1 * c2);
        for i in 0..v_hat.n {
            let vp = v_hat.point(i);
            let tp = t_hat.point(i);
            let row = g.row_mut(i);
            for a in 0..c1 {
                let va = &vp[a * 3..a * 3 + 3];
                for b in 0..c2 {
                    row[a * c2 + b] = dot3(va, &tp[b * 3..b * 3 + 3]);
                }
            }
        }
        g
    }

    pub fn forward(&self, x: &VectorFeature) -> Result<(ScalarFeature, E2iCache), VnError> {
        let v_hat = self.branch_v.forward(x)?;
        let t_hat = self.branch_t.forward(x)?;
        let gram = Self::gram(&v_hat, &t_hat);
        let (out, head) = self.head.forward(&gram)?;
        Ok((
            out,
            E2iCache {
                input: x.clone(),
                v_hat,
                t_hat,
                head,
            },
        ))
    }

    pub fn backward(&mut self, cache: &E2iCache, dy: &ScalarFeature) -> VectorFeature {
        let dgram = self.head.backward(&cache.head, dy);
        let (c1, c2) = (cache.v_hat.c, cache.t_hat.c);
        let mut dv = VectorFeature::zeros(cache.v_hat.n, c1);
        let mut dt = VectorFeature::zeros(cache.t_hat.n, c2);
        for i in 0..cache.v_hat.n {
            let vp = cache.v_hat.point(i);
            let tp = cache.t_hat.point(i);
            let dg = dgram.row(i);
            for a in 0..c1 {
                for b in 0..c2 {
                    let g = dg[a * c2 + b];
                    if g == 0.0 {
                        continue;
                    }
                    let ov = (i * c1 + a) * 3;
                    let ot = (i * c2 + b) * 3;
                    for j in 0..3 {
                        dv.data[ov + j] += g * tp[b * 3 + j];
                        dt.data[ot + j] += g * vp[a * 3 + j];
                    }
                }
            }
        }
        let mut dx = self.branch_v.backward(&cache.input, &dv);
        let dx_t = self.branch_t.backward(&cache.input, &dt);
        for (a, b) in dx.data.iter_mut().zip(&dx_t.data) {
            *a += b;
        }
        dx
    }
}

impl Parameterized for E2i {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.branch_v.visit_params(f);
        self.branch_t.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.branch_v.visit_params_mut(f);
        self.branch_t.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}

pub mod suite;
