//! Shared oracles for the integration suites. Everything here recomputes
//! quantities from first principles, independent of the library's own
//! gradient/Laplacian code paths.

#![allow(dead_code)]

use flowcert::objective::Objective;

/// Central-difference gradient of `obj.value`, step `1e-6 (1 + |h_i|)`.
pub fn fd_gradient(obj: &dyn Objective, h: &[f64]) -> Vec<f64> {
    let mut hp = h.to_vec();
    let mut out = vec![0.0; h.len()];
    for i in 0..h.len() {
        let step = 1e-6 * (1.0 + h[i].abs());
        hp[i] = h[i] + step;
        let up = obj.value(&hp);
        hp[i] = h[i] - step;
        let dn = obj.value(&hp);
        hp[i] = h[i];
        out[i] = (up - dn) / (2.0 * step);
    }
    out
}

/// Hessian trace by second central differences of `obj.value`.
pub fn fd_hessian_trace(obj: &dyn Objective, h: &[f64]) -> f64 {
    let center = obj.value(h);
    let mut hp = h.to_vec();
    let mut trace = 0.0;
    for i in 0..h.len() {
        let step = 1e-4 * (1.0 + h[i].abs());
        hp[i] = h[i] + step;
        let up = obj.value(&hp);
        hp[i] = h[i] - step;
        let dn = obj.value(&hp);
        hp[i] = h[i];
        trace += (up - 2.0 * center + dn) / (step * step);
    }
    trace
}

pub fn max_rel_err(want: &[f64], got: &[f64]) -> f64 {
    let norm: f64 = want.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = want.iter().zip(got).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

/// Scalar objective `a h^4 / 4 + b h^2 / 2`: a strictly convex quartic with
/// its only critical point at the origin.
pub struct ScalarQuartic {
    pub quartic: f64,
    pub quadratic: f64,
}

impl Objective for ScalarQuartic {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, h: &[f64]) -> f64 {
        let x = h[0];
        self.quartic * x.powi(4) / 4.0 + self.quadratic * x * x / 2.0
    }
    fn gradient(&self, h: &[f64], out: &mut [f64]) {
        let x = h[0];
        out[0] = self.quartic * x.powi(3) + self.quadratic * x;
    }
    fn laplacian(&self, h: &[f64]) -> f64 {
        3.0 * self.quartic * h[0] * h[0] + self.quadratic
    }
}

/// `sum_i H_ii h_i^2 / 2 + lambda sum_i h_i^4`: a quadratic basin with a
/// quartic perturbation, Hessian `diag` at the minimum.
pub struct PerturbedBasin {
    pub diag: Vec<f64>,
    pub lambda: f64,
}

impl Objective for PerturbedBasin {
    fn dim(&self) -> usize {
        self.diag.len()
    }
    fn value(&self, h: &[f64]) -> f64 {
        h.iter()
            .zip(&self.diag)
            .map(|(x, d)| d * x * x / 2.0 + self.lambda * x.powi(4))
            .sum()
    }
    fn gradient(&self, h: &[f64], out: &mut [f64]) {
        for ((o, x), d) in out.iter_mut().zip(h).zip(&self.diag) {
            *o = d * x + 4.0 * self.lambda * x.powi(3);
        }
    }
    fn laplacian(&self, h: &[f64]) -> f64 {
        h.iter()
            .zip(&self.diag)
            .map(|(x, d)| d + 12.0 * self.lambda * x * x)
            .sum()
    }
}

/// `kappa (h - center)^2 / 2` in one dimension.
pub struct ShiftedScalarQuadratic {
    pub kappa: f64,
    pub center: f64,
}

impl Objective for ShiftedScalarQuadratic {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, h: &[f64]) -> f64 {
        let d = h[0] - self.center;
        self.kappa * d * d / 2.0
    }
    fn gradient(&self, h: &[f64], out: &mut [f64]) {
        out[0] = self.kappa * (h[0] - self.center);
    }
    fn laplacian(&self, _h: &[f64]) -> f64 {
        self.kappa
    }
}

/// Least-squares line fit returning (slope, intercept, r_squared).
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let pred = slope * a + intercept;
            (b - pred) * (b - pred)
        })
        .sum();
    let ss_tot: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    (slope, intercept, 1.0 - ss_res / ss_tot)
}
