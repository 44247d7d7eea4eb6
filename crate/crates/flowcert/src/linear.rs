//! Linear-in-parameters classifiers over frozen random ReLU features, the
//! three surrogate training objectives, and their closed-form flows.
//!
//! The model is `F_h(x) = h Phi(x)` with `Phi(x) = relu(W x)` for a frozen
//! random `W`. Binary tasks use a single output row and predict `sign(F)`
//! (ties to +1); multi-class tasks predict the argmax row (ties to the lowest
//! index). Because the model is linear in `h`, the parameter-space Laplacian
//! of any surrogate factorizes as `||Phi||^2` times the output-space
//! Laplacian: zero for the linear surrogate, the constant `Gamma` for the
//! quadratic one, and the shrinking softmax term for cross-entropy.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::LabeledDataset;
use crate::objective::Objective;
use crate::{Error, Result};

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Frozen random ReLU feature map `x -> relu(W x)`, `W` being `width x d_in`
/// with entries drawn once from `N(0, 1/d_in)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    weights: Vec<f64>, // width x d_in, row-major
    d_in: usize,
    width: usize,
}

impl FeatureMap {
    pub fn generate(d_in: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = (1.0 / d_in as f64).sqrt();
        let weights = (0..width * d_in)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigma * z
            })
            .collect();
        Self { weights, d_in, width }
    }

    /// Explicit weights, for tests. Row-major `width x d_in`.
    pub fn from_weights(weights: Vec<f64>, d_in: usize, width: usize) -> Self {
        assert_eq!(weights.len(), width * d_in);
        Self { weights, d_in, width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(Error::DimensionMismatch { expected: self.d_in, got: x.len() });
        }
        let mut out = vec![0.0; self.width];
        self.features_into(x, &mut out);
        Ok(out)
    }

    pub fn features_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.d_in);
        debug_assert_eq!(out.len(), self.width);
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.weights[j * self.d_in..(j + 1) * self.d_in];
            *o = dot(row, x).max(0.0);
        }
    }
}

/// Features of a whole dataset, computed once and shared between objectives.
#[derive(Debug)]
pub struct FeatureCache {
    feats: Vec<f64>, // len x width, row-major
    norms_sq: Vec<f64>,
    len: usize,
    width: usize,
}

impl FeatureCache {
    pub fn build(map: &FeatureMap, ds: &LabeledDataset) -> Result<Self> {
        if ds.d_in != map.d_in {
            return Err(Error::DimensionMismatch { expected: map.d_in, got: ds.d_in });
        }
        let len = ds.len();
        let width = map.width;
        let mut feats = vec![0.0; len * width];
        feats
            .par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| map.features_into(ds.input(i), row));
        let norms_sq = feats.chunks(width).map(|row| dot(row, row)).collect();
        Ok(Self { feats, norms_sq, len, width })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.feats[i * self.width..(i + 1) * self.width]
    }

    pub fn norm_sq(&self, i: usize) -> f64 {
        self.norms_sq[i]
    }
}

/// Encode dataset labels as prediction targets for a `k_out`-row hypothesis:
/// for `k_out == 1`, +1/-1 become 1/0 (sign targets); otherwise class ids,
/// with +1/-1 mapped onto classes 1/0.
pub fn encode_targets(labels: &[i32], k_out: usize) -> Result<Vec<u32>> {
    let binary = labels.iter().all(|&y| y == 1 || y == -1);
    labels
        .iter()
        .map(|&y| {
            let class = if binary {
                ((y + 1) / 2) as u32
            } else if y >= 0 {
                y as u32
            } else {
                return Err(Error::Domain(format!("label {y} is neither +-1 nor a class id")));
            };
            if k_out > 1 && class as usize >= k_out {
                return Err(Error::Domain(format!("class {class} out of range for {k_out} outputs")));
            }
            Ok(class)
        })
        .collect()
}

/// Number of output rows a surrogate needs for these labels.
pub fn class_count(labels: &[i32]) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::Domain("empty label set".into()));
    }
    if labels.iter().all(|&y| y == 1 || y == -1) {
        return Ok(2);
    }
    let max = labels.iter().copied().max().unwrap();
    if labels.iter().any(|&y| y < 0) {
        return Err(Error::Domain("mixed sign/class labels".into()));
    }
    Ok((max as usize + 1).max(2))
}

#[inline]
fn predict(logits: &[f64]) -> u32 {
    if logits.len() == 1 {
        return (logits[0] >= 0.0) as u32;
    }
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Empirical 01-loss of `h` over a batch of cached examples, with
/// per-example error flags. `h` has `k_out` rows of `cache.width()` entries.
pub fn zero_one_losses(h: &[f64], batch: &Batch, k_out: usize) -> Result<(f64, Vec<bool>)> {
    if batch.indices.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    let w = batch.cache.width();
    if h.len() != k_out * w {
        return Err(Error::DimensionMismatch { expected: k_out * w, got: h.len() });
    }
    let targets = encode_targets(&batch.labels, k_out)?;
    let mut logits = vec![0.0; k_out];
    let mut flags = Vec::with_capacity(batch.indices.len());
    let mut errors = 0usize;
    for &i in batch.indices.iter() {
        let phi = batch.cache.row(i as usize);
        for (k, l) in logits.iter_mut().enumerate() {
            *l = dot(&h[k * w..(k + 1) * w], phi);
        }
        let wrong = predict(&logits) != targets[i as usize];
        errors += wrong as usize;
        flags.push(wrong);
    }
    Ok((errors as f64 / batch.indices.len() as f64, flags))
}

/// 01-error of each hypothesis in `hypotheses` over a raw dataset, streaming
/// features so nothing of size `m x width` is materialized. Counts are
/// integers, so the parallel reduction is exact and order-independent.
pub fn evaluate_errors(
    map: &FeatureMap,
    k_out: usize,
    hypotheses: &[&[f64]],
    ds: &LabeledDataset,
) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    for h in hypotheses {
        if h.len() != k_out * map.width() {
            return Err(Error::DimensionMismatch { expected: k_out * map.width(), got: h.len() });
        }
    }
    let targets = encode_targets(&ds.labels, k_out)?;
    let w = map.width();
    let n_h = hypotheses.len();
    let chunk = 256usize;
    let counts = (0..ds.len())
        .into_par_iter()
        .chunks(chunk)
        .map(|idxs| {
            let mut phi = vec![0.0; w];
            let mut logits = vec![0.0; k_out];
            let mut local = vec![0u64; n_h];
            for i in idxs {
                map.features_into(ds.input(i), &mut phi);
                for (hi, h) in hypotheses.iter().enumerate() {
                    for (k, l) in logits.iter_mut().enumerate() {
                        *l = dot(&h[k * w..(k + 1) * w], &phi);
                    }
                    local[hi] += (predict(&logits) != targets[i]) as u64;
                }
            }
            local
        })
        .reduce(
            || vec![0u64; n_h],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    Ok(counts.iter().map(|&c| c as f64 / ds.len() as f64).collect())
}

/// Batch view shared by the surrogates: cached features, labels, and the
/// example indices in play.
#[derive(Clone)]
pub struct Batch {
    pub cache: Arc<FeatureCache>,
    pub labels: Arc<Vec<i32>>,
    pub indices: Arc<Vec<u32>>,
}

impl Batch {
    pub fn full(cache: Arc<FeatureCache>, labels: Arc<Vec<i32>>) -> Self {
        let indices = Arc::new((0..cache.len() as u32).collect());
        Self { cache, labels, indices }
    }

    pub fn subset(cache: Arc<FeatureCache>, labels: Arc<Vec<i32>>, indices: Arc<Vec<u32>>) -> Self {
        Self { cache, labels, indices }
    }

    fn len(&self) -> usize {
        self.indices.len()
    }

    /// +-1 labels as floats; errors on class labels.
    fn signs(&self) -> Result<Vec<f64>> {
        self.indices
            .iter()
            .map(|&i| match self.labels[i as usize] {
                1 => Ok(1.0),
                -1 => Ok(-1.0),
                other => Err(Error::Domain(format!("label {other} is not +-1"))),
            })
            .collect()
    }
}

/// Per-batch statistics of the quadratic surrogate:
/// `gamma = (1/m) sum y Phi(x)`, `Gamma = alpha + (1/m) sum ||Phi||^2`,
/// `Theta = (alpha/N) I + (1/m) sum Phi Phi^T`.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    pub gamma: Vec<f64>,
    pub big_gamma: f64,
    /// Row-major `width x width`.
    pub theta: Vec<f64>,
    pub alpha: f64,
}

impl SufficientStats {
    pub fn compute(batch: &Batch, alpha: f64) -> Result<Self> {
        if batch.len() == 0 {
            return Err(Error::Domain("empty batch".into()));
        }
        let w = batch.cache.width();
        let signs = batch.signs()?;
        let inv_m = 1.0 / batch.len() as f64;
        let mut gamma = vec![0.0; w];
        let mut norm_acc = 0.0;
        let mut theta = vec![0.0; w * w];
        for (&idx, &y) in batch.indices.iter().zip(&signs) {
            let phi = batch.cache.row(idx as usize);
            axpy(y * inv_m, phi, &mut gamma);
            norm_acc += batch.cache.norm_sq(idx as usize);
            for i in 0..w {
                let coeff = phi[i] * inv_m;
                let row = &mut theta[i * w..(i + 1) * w];
                for j in i..w {
                    row[j] += coeff * phi[j];
                }
            }
        }
        for i in 0..w {
            for j in 0..i {
                theta[i * w + j] = theta[j * w + i];
            }
            theta[i * w + i] += alpha / w as f64;
        }
        Ok(Self { gamma, big_gamma: alpha + norm_acc * inv_m, theta, alpha })
    }

    /// Gamma only, for the linear surrogate and its analytic flow.
    pub fn gamma_only(batch: &Batch) -> Result<Vec<f64>> {
        if batch.len() == 0 {
            return Err(Error::Domain("empty batch".into()));
        }
        let signs = batch.signs()?;
        let inv_m = 1.0 / batch.len() as f64;
        let mut gamma = vec![0.0; batch.cache.width()];
        for (&idx, &y) in batch.indices.iter().zip(&signs) {
            axpy(y * inv_m, batch.cache.row(idx as usize), &mut gamma);
        }
        Ok(gamma)
    }
}

/// Linear surrogate `-(1/m) sum F(x) y = -h . gamma`: constant gradient,
/// identically zero Laplacian.
pub struct LinearSurrogate {
    gamma: Vec<f64>,
}

impl LinearSurrogate {
    pub fn new(batch: &Batch) -> Result<Self> {
        Ok(Self { gamma: SufficientStats::gamma_only(batch)? })
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }
}

impl Objective for LinearSurrogate {
    fn dim(&self) -> usize {
        self.gamma.len()
    }

    fn value(&self, h: &[f64]) -> f64 {
        -dot(h, &self.gamma)
    }

    fn gradient(&self, _h: &[f64], out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(&self.gamma) {
            *o = -g;
        }
    }

    fn laplacian(&self, _h: &[f64]) -> f64 {
        0.0
    }
}

/// Quadratic surrogate with ridge:
/// `alpha ||h||^2 / (2N) + (1/2m) sum (F(x) - beta y)^2`. The gradient is
/// `Theta h - beta gamma`, the Laplacian the constant `Gamma`.
pub struct QuadraticSurrogate {
    batch: Batch,
    signs: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    big_gamma: f64,
}

impl QuadraticSurrogate {
    pub fn new(batch: Batch, alpha: f64, beta: f64) -> Result<Self> {
        if alpha < 0.0 {
            return Err(Error::Domain(format!("alpha {alpha} must be >= 0")));
        }
        if batch.len() == 0 {
            return Err(Error::Domain("empty batch".into()));
        }
        let signs = batch.signs()?;
        let inv_m = 1.0 / batch.len() as f64;
        let norm_acc: f64 =
            batch.indices.iter().map(|&i| batch.cache.norm_sq(i as usize)).sum();
        let big_gamma = alpha + norm_acc * inv_m;
        Ok(Self { batch, signs, alpha, beta, big_gamma })
    }

    pub fn big_gamma(&self) -> f64 {
        self.big_gamma
    }
}

impl Objective for QuadraticSurrogate {
    fn dim(&self) -> usize {
        self.batch.cache.width()
    }

    fn value(&self, h: &[f64]) -> f64 {
        let n = h.len() as f64;
        let inv_m = 1.0 / self.batch.len() as f64;
        let mut acc = 0.0;
        for (&idx, &y) in self.batch.indices.iter().zip(&self.signs) {
            let r = dot(self.batch.cache.row(idx as usize), h) - self.beta * y;
            acc += r * r;
        }
        self.alpha * dot(h, h) / (2.0 * n) + 0.5 * inv_m * acc
    }

    fn gradient(&self, h: &[f64], out: &mut [f64]) {
        let n = h.len() as f64;
        let ridge = self.alpha / n;
        for (o, hi) in out.iter_mut().zip(h) {
            *o = ridge * hi;
        }
        let inv_m = 1.0 / self.batch.len() as f64;
        for (&idx, &y) in self.batch.indices.iter().zip(&self.signs) {
            let phi = self.batch.cache.row(idx as usize);
            let coeff = (dot(phi, h) - self.beta * y) * inv_m;
            axpy(coeff, phi, out);
        }
    }

    fn laplacian(&self, _h: &[f64]) -> f64 {
        self.big_gamma
    }
}

/// Cross-entropy surrogate over `k_out >= 2` classes, `h` being `k_out` rows
/// of width entries. Log-sum-exp is max-shifted; gradient and Laplacian share
/// one softmax pass.
pub struct CrossEntropySurrogate {
    batch: Batch,
    targets: Vec<u32>,
    k_out: usize,
}

impl CrossEntropySurrogate {
    pub fn new(batch: Batch, k_out: usize) -> Result<Self> {
        if k_out < 2 {
            return Err(Error::Domain("cross-entropy needs k_out >= 2".into()));
        }
        if batch.len() == 0 {
            return Err(Error::Domain("empty batch".into()));
        }
        let all = encode_targets(&batch.labels, k_out)?;
        let targets = batch.indices.iter().map(|&i| all[i as usize]).collect();
        Ok(Self { batch, targets, k_out })
    }

    /// Per-example softmax concentration term `1 - sum_k p_k^2` at `h`,
    /// before the `||Phi||^2` factor.
    fn softmax_pass(
        &self,
        h: &[f64],
        mut per_example: impl FnMut(usize, u32, &[f64], &[f64], f64),
    ) {
        let w = self.batch.cache.width();
        let mut logits = vec![0.0; self.k_out];
        let mut probs = vec![0.0; self.k_out];
        for (pos, (&idx, &target)) in self.batch.indices.iter().zip(&self.targets).enumerate() {
            let phi = self.batch.cache.row(idx as usize);
            for (k, l) in logits.iter_mut().enumerate() {
                *l = dot(&h[k * w..(k + 1) * w], phi);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &l) in probs.iter_mut().zip(logits.iter()) {
                *p = (l - max).exp();
                z += *p;
            }
            let inv_z = 1.0 / z;
            for p in probs.iter_mut() {
                *p *= inv_z;
            }
            let lse = max + z.ln();
            per_example(pos, target, &logits, &probs, lse);
        }
    }
}

impl Objective for CrossEntropySurrogate {
    fn dim(&self) -> usize {
        self.k_out * self.batch.cache.width()
    }

    fn value(&self, h: &[f64]) -> f64 {
        let inv_m = 1.0 / self.batch.len() as f64;
        let mut acc = 0.0;
        self.softmax_pass(h, |_pos, target, logits, _probs, lse| {
            acc += lse - logits[target as usize];
        });
        acc * inv_m
    }

    fn gradient(&self, h: &[f64], out: &mut [f64]) {
        self.gradient_and_laplacian(h, out);
    }

    fn laplacian(&self, h: &[f64]) -> f64 {
        let inv_m = 1.0 / self.batch.len() as f64;
        let mut lap = 0.0;
        self.softmax_pass(h, |pos, _target, _logits, probs, _lse| {
            let idx = self.batch.indices[pos] as usize;
            let p_sq: f64 = probs.iter().map(|p| p * p).sum();
            lap += self.batch.cache.norm_sq(idx) * (1.0 - p_sq);
        });
        lap * inv_m
    }

    fn gradient_and_laplacian(&self, h: &[f64], out: &mut [f64]) -> f64 {
        let w = self.batch.cache.width();
        let inv_m = 1.0 / self.batch.len() as f64;
        out.fill(0.0);
        let mut lap = 0.0;
        // one softmax pass feeding both accumulators
        let mut logits = vec![0.0; self.k_out];
        let mut probs = vec![0.0; self.k_out];
        for (&idx, &target) in self.batch.indices.iter().zip(&self.targets) {
            let phi = self.batch.cache.row(idx as usize);
            for (k, l) in logits.iter_mut().enumerate() {
                *l = dot(&h[k * w..(k + 1) * w], phi);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &l) in probs.iter_mut().zip(logits.iter()) {
                *p = (l - max).exp();
                z += *p;
            }
            let inv_z = 1.0 / z;
            let mut p_sq = 0.0;
            for (k, p) in probs.iter_mut().enumerate() {
                *p *= inv_z;
                p_sq += *p * *p;
                let delta = (k as u32 == target) as u8 as f64;
                axpy((*p - delta) * inv_m, phi, &mut out[k * w..(k + 1) * w]);
            }
            lap += self.batch.cache.norm_sq(idx as usize) * (1.0 - p_sq);
        }
        lap * inv_m
    }
}

/// Closed-form flow of the linear surrogate: `h_T = h_0 + gamma T`.
pub fn linear_analytic_flow(h0: &[f64], gamma: &[f64], t: f64) -> Vec<f64> {
    h0.iter().zip(gamma).map(|(h, g)| h + g * t).collect()
}

/// Eigendecomposition of `Theta`, reused across horizons to evaluate the
/// closed-form quadratic flow
/// `h_T = h_0 + (I - e^{-T Theta})(Theta^{-1} beta gamma - h_0)`.
pub struct QuadraticFlowSolver {
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
    gamma: DVector<f64>,
}

const EIGENVALUE_FLOOR: f64 = 1e-12;

impl QuadraticFlowSolver {
    /// One symmetric eigendecomposition; errors when the smallest eigenvalue
    /// falls below `1e-12` times the largest (the instability the ridge term
    /// exists to prevent).
    pub fn new(stats: &SufficientStats) -> Result<Self> {
        let w = stats.gamma.len();
        let theta = DMatrix::from_row_slice(w, w, &stats.theta);
        let eig = theta.symmetric_eigen();
        let max_eig = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let floor = EIGENVALUE_FLOOR * max_eig.max(0.0);
        if !(min_eig > floor) {
            return Err(Error::NearSingular { min_eig, floor });
        }
        Ok(Self {
            eigvecs: eig.eigenvectors,
            eigvals: eig.eigenvalues,
            gamma: DVector::from_column_slice(&stats.gamma),
        })
    }

    pub fn solve(&self, h0: &[f64], beta: f64, t: f64) -> Vec<f64> {
        let h0 = DVector::from_column_slice(h0);
        let u = self.eigvecs.transpose() * &h0;
        let z = self.eigvecs.transpose() * (&self.gamma * beta);
        let coeffs = DVector::from_iterator(
            u.len(),
            u.iter().zip(z.iter()).zip(self.eigvals.iter()).map(|((&ui, &zi), &lam)| {
                ui + (1.0 - (-t * lam).exp()) * (zi / lam - ui)
            }),
        );
        (&self.eigvecs * coeffs).as_slice().to_vec()
    }
}

/// Convenience wrapper around [`QuadraticFlowSolver`] for one horizon.
pub fn quadratic_analytic_flow(
    h0: &[f64],
    stats: &SufficientStats,
    beta: f64,
    t: f64,
) -> Result<Vec<f64>> {
    Ok(QuadraticFlowSolver::new(stats)?.solve(h0, beta, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Manifest, SplitTag};

    fn toy_dataset(inputs: Vec<Vec<f64>>, labels: Vec<i32>) -> LabeledDataset {
        let d_in = inputs[0].len();
        let flat = inputs.into_iter().flatten().collect();
        LabeledDataset::new(flat, d_in, labels, SplitTag::Train, Manifest::new()).unwrap()
    }

    fn batch_from(inputs: Vec<Vec<f64>>, labels: Vec<i32>, map: &FeatureMap) -> Batch {
        let ds = toy_dataset(inputs, labels.clone());
        let cache = Arc::new(FeatureCache::build(map, &ds).unwrap());
        Batch::full(cache, Arc::new(labels))
    }

    #[test]
    fn relu_features() {
        // identity W zeroes the negative coordinates
        let map = FeatureMap::from_weights(
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            3,
            3,
        );
        assert_eq!(map.features(&[0.0, 0.0, 0.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(map.features(&[1.5, -2.0, 0.5]).unwrap(), vec![1.5, 0.0, 0.5]);
        assert!(map.features(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn feature_norm_matches_recomputation() {
        let map = FeatureMap::generate(4, 16, 11);
        let x = [0.3, -0.9, 0.4, 0.2];
        let phi = map.features(&x).unwrap();
        // independent recomputation of ||Phi||^2 straight from the definition
        let mut want = 0.0;
        for j in 0..16 {
            let mut s = 0.0;
            for (i, &xi) in x.iter().enumerate() {
                s += map.weights[j * 4 + i] * xi;
            }
            let r = if s > 0.0 { s } else { 0.0 };
            want += r * r;
        }
        let got: f64 = phi.iter().map(|v| v * v).sum();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn zero_hypothesis_errs_on_negative_labels() {
        // F = 0 everywhere predicts +1, so the error is the -1 fraction.
        let map = FeatureMap::generate(2, 8, 3);
        let inputs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.5, 0.5]];
        let labels = vec![1, -1, -1, -1];
        let batch = batch_from(inputs, labels, &map);
        let h = vec![0.0; 8];
        let (err, flags) = zero_one_losses(&h, &batch, 1).unwrap();
        assert_eq!(err, 0.75);
        assert_eq!(flags, vec![false, true, true, true]);
    }

    #[test]
    fn perfect_separator_has_zero_loss() {
        let map = FeatureMap::from_weights(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let batch = batch_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1, -1], &map);
        // h picks out the first feature positively, the second negatively
        let (err, flags) = zero_one_losses(&[1.0, -1.0], &batch, 1).unwrap();
        assert_eq!(err, 0.0);
        assert_eq!(flags, vec![false, false]);
    }

    #[test]
    fn zero_one_matches_brute_force_count() {
        let map = FeatureMap::generate(3, 12, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let inputs: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let labels: Vec<i32> = (0..100).map(|i| if i % 3 == 0 { 1 } else { -1 }).collect();
        let h: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ds = toy_dataset(inputs.clone(), labels.clone());
        let cache = Arc::new(FeatureCache::build(&map, &ds).unwrap());
        let batch = Batch::full(cache, Arc::new(labels.clone()));
        let (err, _) = zero_one_losses(&h, &batch, 1).unwrap();
        // independent loop
        let mut wrong = 0;
        for (x, &y) in inputs.iter().zip(&labels) {
            let phi = map.features(x).unwrap();
            let f = dot(&h, &phi);
            let pred = if f >= 0.0 { 1 } else { -1 };
            wrong += (pred != y) as usize;
        }
        assert_eq!(err, wrong as f64 / 100.0);
        // the streaming path agrees
        let streamed = evaluate_errors(&map, 1, &[&h], &ds).unwrap();
        assert_eq!(streamed[0], err);
    }

    #[test]
    fn linear_surrogate_basics() {
        let map = FeatureMap::generate(2, 6, 1);
        let batch = batch_from(
            vec![vec![1.0, 0.2], vec![-0.4, 1.0], vec![0.3, -0.8]],
            vec![1, -1, 1],
            &batch_map_holder(&map),
        );
        let s = LinearSurrogate::new(&batch).unwrap();
        let h = vec![0.0; 6];
        assert_eq!(s.value(&h), 0.0);
        let mut g = vec![0.0; 6];
        s.gradient(&h, &mut g);
        for (gi, gam) in g.iter().zip(s.gamma()) {
            assert_eq!(*gi, -gam);
        }
        assert_eq!(s.laplacian(&h), 0.0);
    }

    // FeatureMap isn't Copy; tests above want one map for dataset + batch.
    fn batch_map_holder(map: &FeatureMap) -> FeatureMap {
        map.clone()
    }

    #[test]
    fn quadratic_gamma_single_example() {
        // alpha = 0, one example with ||Phi||^2 = 2: Gamma = 2.
        let map = FeatureMap::from_weights(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let batch = batch_from(vec![vec![1.0, 1.0]], vec![1], &map);
        let q = QuadraticSurrogate::new(batch, 0.0, 1.0).unwrap();
        assert_eq!(q.big_gamma(), 2.0);
        assert_eq!(q.laplacian(&[0.1, 0.2]), 2.0);
    }

    #[test]
    fn linear_analytic_flow_edges() {
        let h0 = [0.5, -0.2];
        assert_eq!(linear_analytic_flow(&h0, &[1.0, 2.0], 0.0), h0.to_vec());
        assert_eq!(linear_analytic_flow(&h0, &[0.0, 0.0], 5.0), h0.to_vec());
    }

    #[test]
    fn quadratic_flow_scalar_and_fixed_point() {
        // 1-D Theta = 1, beta = gamma = 1, h0 = 0, T = 1: 1 - e^{-1}.
        let stats = SufficientStats {
            gamma: vec![1.0],
            big_gamma: 1.0,
            theta: vec![1.0],
            alpha: 0.0,
        };
        let h = quadratic_analytic_flow(&[0.0], &stats, 1.0, 1.0).unwrap();
        assert!((h[0] - 0.632_120_558_828_557_7).abs() < 1e-14);
        // T -> infinity reaches the fixed point Theta^{-1} beta gamma
        let h = quadratic_analytic_flow(&[3.0], &stats, 2.0, 1e6).unwrap();
        assert!((h[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_flow_rejects_singular_theta() {
        let stats = SufficientStats {
            gamma: vec![1.0, 0.0],
            big_gamma: 1.0,
            theta: vec![1.0, 0.0, 0.0, 0.0],
            alpha: 0.0,
        };
        assert!(matches!(
            QuadraticFlowSolver::new(&stats),
            Err(Error::NearSingular { .. })
        ));
    }

    #[test]
    fn cross_entropy_equal_logits_laplacian() {
        // all-zero h gives uniform softmax: per-example ||Phi||^2 (1 - 1/K).
        let map = FeatureMap::from_weights(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let batch = batch_from(vec![vec![1.0, 1.0]], vec![0], &map);
        for k_out in [2usize, 4] {
            let ce = CrossEntropySurrogate::new(batch.clone(), k_out).unwrap();
            let h = vec![0.0; 2 * k_out];
            let want = 2.0 * (1.0 - 1.0 / k_out as f64);
            assert!((ce.laplacian(&h) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_dominant_logit_kills_laplacian() {
        let map = FeatureMap::from_weights(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let batch = batch_from(vec![vec![1.0, 1.0]], vec![0], &map);
        let ce = CrossEntropySurrogate::new(batch, 2).unwrap();
        // class-0 row huge: softmax saturates, Laplacian -> 0; lse stays finite
        let h = vec![500.0, 500.0, 0.0, 0.0];
        assert!(ce.laplacian(&h) < 1e-10);
        assert!(ce.value(&h).is_finite());
    }

    #[test]
    fn cross_entropy_value_matches_direct_formula() {
        let map = FeatureMap::generate(3, 5, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs: Vec<Vec<f64>> =
            (0..6).map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let labels = vec![0, 1, 2, 0, 1, 2];
        let batch = batch_from(inputs.clone(), labels.clone(), &map);
        let ce = CrossEntropySurrogate::new(batch, 3).unwrap();
        let h: Vec<f64> = (0..15).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut want = 0.0;
        for (x, &y) in inputs.iter().zip(&labels) {
            let phi = map.features(x).unwrap();
            let logits: Vec<f64> = (0..3).map(|k| dot(&h[k * 5..(k + 1) * 5], &phi)).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            want += z.ln() - logits[y as usize];
        }
        want /= 6.0;
        assert!((ce.value(&h) - want).abs() < 1e-10);
    }

    #[test]
    fn stats_invariant_under_permutation() {
        let map = FeatureMap::generate(2, 4, 8);
        let inputs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.7, -0.7], vec![-0.2, 0.5]];
        let labels = vec![1, -1, 1, -1];
        let a = SufficientStats::compute(&batch_from(inputs.clone(), labels.clone(), &map), 0.5)
            .unwrap();
        let perm = [2usize, 0, 3, 1];
        let p_inputs: Vec<Vec<f64>> = perm.iter().map(|&i| inputs[i].clone()).collect();
        let p_labels: Vec<i32> = perm.iter().map(|&i| labels[i]).collect();
        let b = SufficientStats::compute(&batch_from(p_inputs, p_labels, &map), 0.5).unwrap();
        assert!((a.big_gamma - b.big_gamma).abs() < 1e-12);
        for (x, y) in a.gamma.iter().zip(&b.gamma) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.theta.iter().zip(&b.theta) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
