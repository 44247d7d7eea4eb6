//! Training objectives: value, gradient, and Laplacian at any hypothesis.
//!
//! The integrator needs all three at every stage point; the Laplacian is what
//! drives the tracked log-density. Objectives must be twice differentiable on
//! the region the flow visits.

/// A twice-differentiable objective over hypotheses in `R^N`.
pub trait Objective: Sync {
    /// Hypothesis dimension N.
    fn dim(&self) -> usize;

    /// Objective value at `h`.
    fn value(&self, h: &[f64]) -> f64;

    /// Gradient at `h`, written into `out` (length N).
    fn gradient(&self, h: &[f64], out: &mut [f64]);

    /// Trace of the Hessian at `h`.
    fn laplacian(&self, h: &[f64]) -> f64;

    /// Gradient and Laplacian at the same point. Override when the two share
    /// work (the cross-entropy surrogate computes both in one pass).
    fn gradient_and_laplacian(&self, h: &[f64], out: &mut [f64]) -> f64 {
        self.gradient(h, out);
        self.laplacian(h)
    }
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, h: &[f64]) -> f64 {
        (**self).value(h)
    }
    fn gradient(&self, h: &[f64], out: &mut [f64]) {
        (**self).gradient(h, out)
    }
    fn laplacian(&self, h: &[f64]) -> f64 {
        (**self).laplacian(h)
    }
    fn gradient_and_laplacian(&self, h: &[f64], out: &mut [f64]) -> f64 {
        (**self).gradient_and_laplacian(h, out)
    }
}

impl<T: Objective + ?Sized> Objective for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, h: &[f64]) -> f64 {
        (**self).value(h)
    }
    fn gradient(&self, h: &[f64], out: &mut [f64]) {
        (**self).gradient(h, out)
    }
    fn laplacian(&self, h: &[f64]) -> f64 {
        (**self).laplacian(h)
    }
    fn gradient_and_laplacian(&self, h: &[f64], out: &mut [f64]) -> f64 {
        (**self).gradient_and_laplacian(h, out)
    }
}

/// `C(h) = 1/2 h^T H h` for a symmetric matrix `H` (row-major, N x N).
///
/// The workhorse for verifying density tracking: the Laplacian is the
/// constant `tr H`, so the tracked integral must equal `T tr H`, and the
/// Gaussian pushforward has a closed form through `exp(-T H)`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    hessian: Vec<f64>,
    dim: usize,
}

impl QuadraticObjective {
    /// Build from a row-major symmetric matrix.
    ///
    /// Panics if the matrix is not square or not symmetric.
    pub fn new(hessian: Vec<f64>, dim: usize) -> Self {
        assert_eq!(hessian.len(), dim * dim, "hessian must be {dim} x {dim}");
        for i in 0..dim {
            for j in 0..i {
                assert!(
                    (hessian[i * dim + j] - hessian[j * dim + i]).abs() < 1e-12,
                    "hessian must be symmetric"
                );
            }
        }
        Self { hessian, dim }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = vec![0.0; n * n];
        for (i, &d) in diag.iter().enumerate() {
            m[i * n + i] = d;
        }
        Self { hessian: m, dim: n }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.hessian[i * self.dim + i]).sum()
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, h: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim {
            let row = &self.hessian[i * self.dim..(i + 1) * self.dim];
            let hi: f64 = row.iter().zip(h).map(|(a, b)| a * b).sum();
            acc += h[i] * hi;
        }
        0.5 * acc
    }

    fn gradient(&self, h: &[f64], out: &mut [f64]) {
        for i in 0..self.dim {
            let row = &self.hessian[i * self.dim..(i + 1) * self.dim];
            out[i] = row.iter().zip(h).map(|(a, b)| a * b).sum();
        }
    }

    fn laplacian(&self, _h: &[f64]) -> f64 {
        self.trace()
    }
}

/// The modified objective `C + eps ||grad C||^2` whose continuous flow tracks
/// the discrete gradient-descent iterates one order more closely.
///
/// The wrapped value uses the inner objective's exact gradient; the wrapper's
/// own gradient and Laplacian come from central finite differences of the
/// wrapped value (second differences for the trace, so the Laplacian costs
/// O(N) inner gradient calls). For `eps == 0` all calls delegate to the inner
/// objective unchanged.
pub struct BackwardErrorCorrected<O> {
    inner: O,
    epsilon: f64,
}

impl<O: Objective> BackwardErrorCorrected<O> {
    pub fn new(inner: O, epsilon: f64) -> Self {
        assert!(epsilon >= 0.0 && epsilon.is_finite());
        Self { inner, epsilon }
    }
}

impl<O: Objective> Objective for BackwardErrorCorrected<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, h: &[f64]) -> f64 {
        if self.epsilon == 0.0 {
            return self.inner.value(h);
        }
        let mut g = vec![0.0; h.len()];
        self.inner.gradient(h, &mut g);
        let grad_sq: f64 = g.iter().map(|x| x * x).sum();
        self.inner.value(h) + self.epsilon * grad_sq
    }

    fn gradient(&self, h: &[f64], out: &mut [f64]) {
        if self.epsilon == 0.0 {
            return self.inner.gradient(h, out);
        }
        let mut hp = h.to_vec();
        for i in 0..h.len() {
            let step = 1e-6 * (1.0 + h[i].abs());
            hp[i] = h[i] + step;
            let up = self.value(&hp);
            hp[i] = h[i] - step;
            let dn = self.value(&hp);
            hp[i] = h[i];
            out[i] = (up - dn) / (2.0 * step);
        }
    }

    fn laplacian(&self, h: &[f64]) -> f64 {
        if self.epsilon == 0.0 {
            return self.inner.laplacian(h);
        }
        let center = self.value(h);
        let mut hp = h.to_vec();
        let mut trace = 0.0;
        for i in 0..h.len() {
            let step = 1e-4 * (1.0 + h[i].abs());
            hp[i] = h[i] + step;
            let up = self.value(&hp);
            hp[i] = h[i] - step;
            let dn = self.value(&hp);
            hp[i] = h[i];
            trace += (up - 2.0 * center + dn) / (step * step);
        }
        trace
    }
}
