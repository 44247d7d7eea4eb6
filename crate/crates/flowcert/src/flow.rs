//! Fixed-step integration of the gradient flow `dh/dt = -grad C(h)` jointly
//! with the Laplacian accumulator `dI/dt = lap C(h)`.
//!
//! The accumulator is the exact log-density gain of the pushforward
//! distribution along the trajectory, so it shares the integrator's stage
//! weights with the state: under Euler it reduces to left-endpoint rectangles
//! (the discretization used by plain gradient descent), under RK4 it matches
//! the trajectory's fourth-order accuracy.
//!
//! Divergence is fatal by design: a non-finite state invalidates the
//! certificate, so runs abort with a diagnostic instead of clamping.

use std::io::{self, Write};

use crate::objective::Objective;
use crate::prior::Prior;
use crate::{Error, Result};

/// Integration scheme. Euler is what discrete gradient descent performs;
/// RK4 is used for verification runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    Rk4,
}

impl Scheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Scheme::Euler),
            "rk4" => Ok(Scheme::Rk4),
            other => Err(Error::Config(format!("unknown scheme '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Rk4 => "rk4",
        }
    }
}

/// Augmented state of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub h: Vec<f64>,
    /// Tracked `int_0^t lap C(h_s) ds`.
    pub laplacian_integral: f64,
}

impl FlowState {
    pub fn initial(h0: Vec<f64>) -> Self {
        Self { t: 0.0, h: h0, laplacian_integral: 0.0 }
    }
}

/// Fixed-step integrator configuration. Every snapshot time must be a
/// positive integer multiple of `dt`, declared before the run.
#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub dt: f64,
    /// Ascending snapshot times `T_1 < ... < T_K`.
    pub horizon_grid: Vec<f64>,
}

impl IntegratorConfig {
    pub fn new(scheme: Scheme, dt: f64, horizon_grid: Vec<f64>) -> Result<Self> {
        let cfg = Self { scheme, dt, horizon_grid };
        cfg.grid_steps()?;
        Ok(cfg)
    }

    /// Snapshot times as step counts; errors if the grid is empty, unsorted,
    /// or not aligned to `dt`.
    pub fn grid_steps(&self) -> Result<Vec<usize>> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt = {} must be positive", self.dt)));
        }
        if self.horizon_grid.is_empty() {
            return Err(Error::Config("empty horizon grid".into()));
        }
        let mut steps = Vec::with_capacity(self.horizon_grid.len());
        let mut prev = 0usize;
        for &t in &self.horizon_grid {
            let ratio = t / self.dt;
            let s = ratio.round();
            if !(s >= 1.0) || (ratio - s).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "horizon {t} is not a positive integer multiple of dt = {}",
                    self.dt
                )));
            }
            let s = s as usize;
            if s <= prev && !steps.is_empty() {
                return Err(Error::Config(format!("horizon grid not strictly ascending at {t}")));
            }
            prev = s;
            steps.push(s);
        }
        Ok(steps)
    }
}

/// Marker left behind when a run hits a non-finite state.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowAbort {
    /// Time at the start of the failed step.
    pub t: f64,
    pub reason: String,
    /// Largest finite |h_i| observed in the offending state.
    pub max_norm: f64,
}

/// Outcome of an integration: snapshots at the horizon grid, the dense path
/// when requested, and an abort marker if the run diverged (snapshots then
/// cover only the horizons reached).
#[derive(Debug, Clone)]
pub struct FlowResult {
    pub snapshots: Vec<FlowState>,
    pub path: Option<Vec<FlowState>>,
    pub abort: Option<FlowAbort>,
}

impl FlowResult {
    pub fn diverged(&self) -> bool {
        self.abort.is_some()
    }
}

/// A contiguous partition of `[0, T]` into per-batch segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    /// Index into the caller's batch (objective) table.
    pub batch: usize,
}

/// Ordered, contiguous, non-overlapping segments covering `[0, T]`. The
/// tracked integral over a schedule is the sum of the per-segment integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSchedule {
    pub segments: Vec<Segment>,
}

impl BatchSchedule {
    /// A single segment `[0, t_end]` over batch 0.
    pub fn single(t_end: f64) -> Self {
        Self { segments: vec![Segment { t_start: 0.0, t_end, batch: 0 }] }
    }

    pub fn total_span(&self) -> f64 {
        self.segments.last().map(|s| s.t_end).unwrap_or(0.0)
    }

    /// Per-segment end-step indices; errors unless segments are contiguous
    /// from 0 and aligned to `dt`.
    pub fn segment_end_steps(&self, dt: f64) -> Result<Vec<usize>> {
        if self.segments.is_empty() {
            return Err(Error::Config("empty batch schedule".into()));
        }
        let mut ends = Vec::with_capacity(self.segments.len());
        let mut prev_end = 0.0;
        let mut prev_step = 0usize;
        for seg in &self.segments {
            if (seg.t_start - prev_end).abs() > 1e-9 * (1.0 + prev_end.abs()) {
                return Err(Error::Config(format!(
                    "segment starting at {} does not continue from {}",
                    seg.t_start, prev_end
                )));
            }
            let ratio = seg.t_end / dt;
            let s = ratio.round();
            if !(s >= 1.0) || (ratio - s).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "segment end {} is not aligned to dt = {dt}",
                    seg.t_end
                )));
            }
            let s = s as usize;
            if s <= prev_step {
                return Err(Error::Config("segment of zero length".into()));
            }
            prev_step = s;
            prev_end = seg.t_end;
            ends.push(s);
        }
        Ok(ends)
    }
}

/// A batch schedule bound to one objective per batch id. All objectives must
/// share the hypothesis dimension.
pub struct PiecewiseObjective<'a> {
    pub schedule: &'a BatchSchedule,
    pub objectives: Vec<&'a dyn Objective>,
}

impl<'a> PiecewiseObjective<'a> {
    pub fn new(schedule: &'a BatchSchedule, objectives: Vec<&'a dyn Objective>) -> Result<Self> {
        let dim = objectives.first().map(|o| o.dim()).unwrap_or(0);
        if objectives.iter().any(|o| o.dim() != dim) {
            return Err(Error::Config("objectives disagree on dimension".into()));
        }
        for seg in &schedule.segments {
            if seg.batch >= objectives.len() {
                return Err(Error::Config(format!("segment batch id {} out of range", seg.batch)));
            }
        }
        Ok(Self { schedule, objectives })
    }
}

struct Stepper {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    htmp: Vec<f64>,
}

impl Stepper {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            htmp: vec![0.0; n],
        }
    }

    /// One step in place; on a non-finite stage or state returns the reason.
    fn advance(
        &mut self,
        scheme: Scheme,
        dt: f64,
        obj: &dyn Objective,
        h: &mut [f64],
        acc: &mut f64,
    ) -> std::result::Result<(), String> {
        match scheme {
            Scheme::Euler => {
                let lap = obj.gradient_and_laplacian(h, &mut self.k1);
                if !lap.is_finite() {
                    return Err("non-finite Laplacian".into());
                }
                for (hi, k) in h.iter_mut().zip(&self.k1) {
                    *hi -= dt * k;
                }
                *acc += dt * lap;
            }
            Scheme::Rk4 => {
                let half = 0.5 * dt;
                let l1 = obj.gradient_and_laplacian(h, &mut self.k1);
                for i in 0..h.len() {
                    self.htmp[i] = h[i] - half * self.k1[i];
                }
                let l2 = obj.gradient_and_laplacian(&self.htmp, &mut self.k2);
                for i in 0..h.len() {
                    self.htmp[i] = h[i] - half * self.k2[i];
                }
                let l3 = obj.gradient_and_laplacian(&self.htmp, &mut self.k3);
                for i in 0..h.len() {
                    self.htmp[i] = h[i] - dt * self.k3[i];
                }
                let l4 = obj.gradient_and_laplacian(&self.htmp, &mut self.k4);
                let lap = (l1 + 2.0 * l2 + 2.0 * l3 + l4) / 6.0;
                if !lap.is_finite() {
                    return Err("non-finite Laplacian".into());
                }
                let w = dt / 6.0;
                for i in 0..h.len() {
                    h[i] -= w * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
                }
                *acc += dt * lap;
            }
        }
        if let Some(bad) = h.iter().position(|x| !x.is_finite()) {
            return Err(format!("non-finite hypothesis component {bad}"));
        }
        if !acc.is_finite() {
            return Err("non-finite Laplacian integral".into());
        }
        Ok(())
    }
}

fn max_finite_abs(h: &[f64]) -> f64 {
    h.iter().copied().filter(|x| x.is_finite()).fold(0.0, |a, x| a.max(x.abs()))
}

fn run_flow<'a>(
    h0: &[f64],
    mut obj_at: impl FnMut(usize) -> &'a dyn Objective,
    cfg: &IntegratorConfig,
    total_steps: usize,
    record_path: bool,
) -> Result<FlowResult> {
    if h0.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("non-finite initial hypothesis".into()));
    }
    let grid_steps = cfg.grid_steps()?;
    if *grid_steps.last().unwrap() > total_steps {
        return Err(Error::Config("horizon grid extends past the schedule span".into()));
    }

    let mut h = h0.to_vec();
    let mut acc = 0.0f64;
    let mut stepper = Stepper::new(h.len());
    let mut snapshots = Vec::with_capacity(grid_steps.len());
    let mut path = record_path.then(|| {
        let mut p = Vec::with_capacity(total_steps + 1);
        p.push(FlowState::initial(h.clone()));
        p
    });
    let mut next_snap = 0usize;
    let mut abort = None;
    let mut last_max = max_finite_abs(&h);

    for step_idx in 0..total_steps {
        let obj = obj_at(step_idx);
        debug_assert_eq!(obj.dim(), h.len());
        if let Err(reason) = stepper.advance(cfg.scheme, cfg.dt, obj, &mut h, &mut acc) {
            abort = Some(FlowAbort {
                t: step_idx as f64 * cfg.dt,
                reason,
                max_norm: last_max.max(max_finite_abs(&h)),
            });
            break;
        }
        last_max = max_finite_abs(&h);
        let done = step_idx + 1;
        if let Some(p) = path.as_mut() {
            p.push(FlowState { t: done as f64 * cfg.dt, h: h.clone(), laplacian_integral: acc });
        }
        if next_snap < grid_steps.len() && grid_steps[next_snap] == done {
            snapshots.push(FlowState {
                t: cfg.horizon_grid[next_snap],
                h: h.clone(),
                laplacian_integral: acc,
            });
            next_snap += 1;
        }
    }

    Ok(FlowResult { snapshots, path, abort })
}

/// Advance one state by a single step. The augmented accumulator uses the
/// same stage weights as the hypothesis.
pub fn step(state: &FlowState, objective: &dyn Objective, dt: f64, scheme: Scheme) -> Result<FlowState> {
    if objective.dim() != state.h.len() {
        return Err(Error::DimensionMismatch { expected: objective.dim(), got: state.h.len() });
    }
    let mut h = state.h.clone();
    let mut acc = state.laplacian_integral;
    let before = max_finite_abs(&h);
    let mut stepper = Stepper::new(h.len());
    stepper.advance(scheme, dt, objective, &mut h, &mut acc).map_err(|reason| {
        Error::Diverged { t: state.t, reason, max_norm: before.max(max_finite_abs(&h)) }
    })?;
    Ok(FlowState { t: state.t + dt, h, laplacian_integral: acc })
}

/// Integrate a fixed objective, snapshotting at each horizon-grid time.
pub fn integrate(h0: &[f64], objective: &dyn Objective, cfg: &IntegratorConfig) -> Result<FlowResult> {
    let total = *cfg.grid_steps()?.last().unwrap();
    run_flow(h0, |_| objective, cfg, total, false)
}

/// Like [`integrate`], also recording the state after every step.
pub fn integrate_dense(h0: &[f64], objective: &dyn Objective, cfg: &IntegratorConfig) -> Result<FlowResult> {
    let total = *cfg.grid_steps()?.last().unwrap();
    run_flow(h0, |_| objective, cfg, total, true)
}

/// Integrate under a batch schedule: the objective in force switches at
/// segment boundaries and the accumulator concatenates per-segment integrals.
pub fn integrate_piecewise(
    h0: &[f64],
    piecewise: &PiecewiseObjective<'_>,
    cfg: &IntegratorConfig,
) -> Result<FlowResult> {
    let end_steps = piecewise.schedule.segment_end_steps(cfg.dt)?;
    let total = *end_steps.last().unwrap();
    let grid_steps = cfg.grid_steps()?;
    if *grid_steps.last().unwrap() > total {
        return Err(Error::Config("horizon grid extends past the schedule span".into()));
    }
    let mut seg = 0usize;
    run_flow(
        h0,
        move |step_idx| {
            while step_idx >= end_steps[seg] {
                seg += 1;
            }
            piecewise.objectives[piecewise.schedule.segments[seg].batch]
        },
        cfg,
        total,
        false,
    )
}

/// The certificate's complexity term:
/// `log rho0(h0) - log rho0(hT) + int_0^T lap C`.
pub fn complexity_term(prior: &dyn Prior, h0: &[f64], h_end: &[f64], laplacian_integral: f64) -> f64 {
    prior.log_density_ratio(h0, h_end) + laplacian_integral
}

/// One-dimensional closed form: the Laplacian integral over a scalar flow
/// depends only on the endpoint slopes, `ln |C'(h0)| - ln |C'(hT)|`.
///
/// Errors if either slope vanishes or the endpoints straddle a critical point.
pub fn one_d_laplacian_closed_form(objective: &dyn Objective, h0: f64, h_end: f64) -> Result<f64> {
    if objective.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: objective.dim() });
    }
    let mut g = [0.0];
    objective.gradient(&[h0], &mut g);
    let g0 = g[0];
    objective.gradient(&[h_end], &mut g);
    let g1 = g[0];
    if g0 == 0.0 || g1 == 0.0 {
        return Err(Error::UndefinedResult("zero derivative at an endpoint".into()));
    }
    if (g0 > 0.0) != (g1 > 0.0) {
        return Err(Error::UndefinedResult("endpoints straddle a critical point".into()));
    }
    Ok((g0 / g1).abs().ln())
}

const GRAD_NORM_FLOOR: f64 = 1e-12;

/// Divergence of the unit tangent field `tau = -grad C / ||grad C||` at `h`,
/// by central differences with step `1e-4 (1 + ||h||)`.
fn unit_tangent_divergence(objective: &dyn Objective, h: &[f64]) -> Result<f64> {
    let n = h.len();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let eps = 1e-4 * (1.0 + norm(h));
    let mut hp = h.to_vec();
    let mut g = vec![0.0; n];
    let tangent_j = |point: &[f64], j: usize, g: &mut [f64]| -> Result<f64> {
        objective.gradient(point, g);
        let gn = norm(g);
        if gn < GRAD_NORM_FLOOR {
            return Err(Error::UndefinedResult("vanishing gradient norm on path".into()));
        }
        Ok(-g[j] / gn)
    };
    let mut div = 0.0;
    for j in 0..n {
        hp[j] = h[j] + eps;
        let tp = tangent_j(&hp, j, &mut g)?;
        hp[j] = h[j] - eps;
        let tm = tangent_j(&hp, j, &mut g)?;
        hp[j] = h[j];
        div += (tp - tm) / (2.0 * eps);
    }
    Ok(div)
}

/// Check the decomposition of the tracked integral into the endpoint
/// gradient-norm ratio minus the line integral of the tangent field's
/// divergence.
///
/// Returns `(lhs, rhs)` where `lhs` is the accumulated integral over the
/// stored path and `rhs = ln(||grad C(h0)|| / ||grad C(hT)||) - int div tau`.
/// Verification-only: the line integral uses midpoint quadrature over the
/// stored path and finite-difference divergences.
pub fn divergence_decomposition(path: &[FlowState], objective: &dyn Objective) -> Result<(f64, f64)> {
    if path.len() < 2 {
        return Err(Error::Domain("path needs at least two states".into()));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut g = vec![0.0; objective.dim()];
    objective.gradient(&path[0].h, &mut g);
    let g_start = norm(&g);
    objective.gradient(&path[path.len() - 1].h, &mut g);
    let g_end = norm(&g);
    if g_start < GRAD_NORM_FLOOR || g_end < GRAD_NORM_FLOOR {
        return Err(Error::UndefinedResult("vanishing gradient norm at an endpoint".into()));
    }

    let mut line = 0.0;
    let mut mid = vec![0.0; objective.dim()];
    for pair in path.windows(2) {
        let (a, b) = (&pair[0].h, &pair[1].h);
        let mut dl_sq = 0.0;
        for i in 0..a.len() {
            mid[i] = 0.5 * (a[i] + b[i]);
            let d = b[i] - a[i];
            dl_sq += d * d;
        }
        let dl = dl_sq.sqrt();
        if dl == 0.0 {
            continue;
        }
        line += unit_tangent_divergence(objective, &mid)? * dl;
    }

    let lhs = path[path.len() - 1].laplacian_integral - path[0].laplacian_integral;
    let rhs = (g_start / g_end).ln() - line;
    Ok((lhs, rhs))
}

/// Reverse-time trajectory from a flow endpoint.
#[derive(Debug, Clone)]
pub struct BackwardRun {
    /// States indexed by reverse time tau in [0, span]; `path[k].h` is the
    /// forward-time state at `T - tau_k`, and `laplacian_integral` holds
    /// `int_0^tau lap C(g(s)) ds` in forward orientation.
    pub path: Vec<FlowState>,
}

impl BackwardRun {
    /// `h_{T - span}` recovered by the reverse flow.
    pub fn endpoint(&self) -> &[f64] {
        &self.path.last().unwrap().h
    }

    /// `int_0^span lap C(g(tau)) dtau`, which equals the Laplacian integral
    /// of the forward flow over `[T - span, T]` against the same objective.
    pub fn laplacian_integral(&self) -> f64 {
        self.path.last().unwrap().laplacian_integral
    }
}

struct Reversed<'a>(&'a dyn Objective);

impl Objective for Reversed<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn value(&self, h: &[f64]) -> f64 {
        -self.0.value(h)
    }
    fn gradient(&self, h: &[f64], out: &mut [f64]) {
        self.0.gradient(h, out);
        for x in out.iter_mut() {
            *x = -*x;
        }
    }
    fn laplacian(&self, h: &[f64]) -> f64 {
        -self.0.laplacian(h)
    }
    fn gradient_and_laplacian(&self, h: &[f64], out: &mut [f64]) -> f64 {
        let lap = self.0.gradient_and_laplacian(h, out);
        for x in out.iter_mut() {
            *x = -*x;
        }
        -lap
    }
}

/// Integrate `dg/dtau = +grad C(g)` from `g(0) = h_end` for `span`, i.e. the
/// reverse-time trajectory with `g(tau) = h_{T - tau}`. Forward-integrating
/// the endpoint recovers `h_end`. The reverse flow is expansive; blow-up is
/// an error carrying the largest norm reached.
pub fn backward_integrate(
    h_end: &[f64],
    objective: &dyn Objective,
    span: f64,
    scheme: Scheme,
    dt: f64,
) -> Result<BackwardRun> {
    if span < 0.0 || !span.is_finite() {
        return Err(Error::Domain(format!("span {span} must be nonnegative")));
    }
    if span == 0.0 {
        return Ok(BackwardRun { path: vec![FlowState::initial(h_end.to_vec())] });
    }
    let cfg = IntegratorConfig::new(scheme, dt, vec![span])?;
    let reversed = Reversed(objective);
    let result = integrate_dense(h_end, &reversed, &cfg)?;
    if let Some(abort) = result.abort {
        return Err(Error::Diverged {
            t: abort.t,
            reason: format!("reverse flow blow-up: {}", abort.reason),
            max_norm: abort.max_norm,
        });
    }
    let mut path = result.path.unwrap();
    // The reversed objective accumulated -int lap; restore forward orientation.
    for state in path.iter_mut() {
        state.laplacian_integral = -state.laplacian_integral;
    }
    Ok(BackwardRun { path })
}

/// Complexity term under a prior learned by flowing on an auxiliary dataset.
#[derive(Debug, Clone)]
pub struct DataDependentComplexity {
    pub total: f64,
    /// `log rho0(h_{t0}) - log rho0(hhat_{T-t0})`.
    pub log_density_ratio: f64,
    /// `int_0^{t0} lap C_prior(h_t) dt` along the forward trajectory.
    pub forward_prior_integral: f64,
    /// `int_0^{t0} lap C_prior(hhat_{T-t0+t}) dt` along the reverse trajectory.
    pub backward_prior_integral: f64,
    /// `int_{t0}^{T} lap C_train(h_t) dt`.
    pub train_integral: f64,
    /// `hhat_{T-t0}`, the reverse-flow endpoint.
    pub prior_endpoint: Vec<f64>,
}

/// Evaluate the data-dependent complexity
///
/// ```text
/// log rho0(h_t0) - log rho0(hhat_{T-t0})
///   + int_0^{t0} (lap C'(h_t) - lap C'(hhat_{T-t0+t})) dt
///   + int_{t0}^{T} lap C(h_t) dt
/// ```
///
/// from two snapshots of a forward run whose first phase (up to `t0`,
/// contributing `state_t0.laplacian_integral`) was driven by `prior_phase`.
/// The reverse trajectory `hhat` is integrated here under `prior_phase`.
/// With `t0 = 0` this reduces exactly to [`complexity_term`].
pub fn data_dependent_complexity(
    prior: &dyn Prior,
    state_t0: &FlowState,
    state_end: &FlowState,
    prior_phase: &dyn Objective,
    scheme: Scheme,
    dt: f64,
) -> Result<DataDependentComplexity> {
    let t0 = state_t0.t;
    if t0 > state_end.t {
        return Err(Error::Domain(format!("t0 = {t0} beyond horizon {}", state_end.t)));
    }
    let backward = backward_integrate(&state_end.h, prior_phase, t0, scheme, dt)?;
    let log_density_ratio = prior.log_density_ratio(&state_t0.h, backward.endpoint());
    let forward_prior_integral = state_t0.laplacian_integral;
    let backward_prior_integral = backward.laplacian_integral();
    let train_integral = state_end.laplacian_integral - state_t0.laplacian_integral;
    let total =
        log_density_ratio + (forward_prior_integral - backward_prior_integral) + train_integral;
    Ok(DataDependentComplexity {
        total,
        log_density_ratio,
        forward_prior_integral,
        backward_prior_integral,
        train_integral,
        prior_endpoint: backward.endpoint().to_vec(),
    })
}

/// Export trajectory snapshots as CSV rows `(t, ||h||, laplacian_integral,
/// objective value)` for plotting.
pub fn write_trajectory_csv(
    out: &mut impl Write,
    states: &[FlowState],
    objective: &dyn Objective,
) -> io::Result<()> {
    writeln!(out, "t,h_norm,laplacian_integral,objective_value")?;
    for s in states {
        let norm = s.h.iter().map(|x| x * x).sum::<f64>().sqrt();
        writeln!(out, "{},{},{},{}", s.t, norm, s.laplacian_integral, objective.value(&s.h))?;
    }
    Ok(())
}
