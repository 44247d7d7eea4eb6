//! End-to-end certificate studies with CSV output.
//!
//! A run is fully determined by an [`ExperimentConfig`]: the horizon grid and
//! confidence level are fixed before any data or initialization is drawn, and
//! all randomness flows from one master seed through fixed role offsets, so
//! identical configs reproduce identical CSVs byte for byte.
//!
//! Studies:
//! - [`certify`]: train once, evaluate both bounds at every declared horizon.
//! - [`scaling_study`]: sweep model widths, report the best bound per width.
//! - [`discretization_study`]: the same run under a coarse and a fine step
//!   size, comparing the resulting bounds at matched physical times.
//! - [`data_dependent_run`]: spend part of the training set on learning the
//!   prior, evaluated through backward integration.

use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;

use crate::bounds::BoundCertificate;
use crate::data::{self, LabeledDataset, Manifest, SplitTag, ToyConfig};
use crate::flow::{
    self, BatchSchedule, FlowState, IntegratorConfig, PiecewiseObjective, Scheme, Segment,
};
use crate::linear::{
    self, Batch, CrossEntropySurrogate, FeatureCache, FeatureMap, LinearSurrogate,
    QuadraticFlowSolver, QuadraticSurrogate, SufficientStats,
};
use crate::objective::{BackwardErrorCorrected, Objective};
use crate::prior::{IsotropicGaussian, Prior};
use crate::{Error, Result};

/// Training datasets in desk-scale mode are capped at this many examples
/// unless `full_scale` is set.
pub const DESK_SCALE_TRAIN_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateKind {
    Linear,
    Quadratic,
    CrossEntropy,
}

impl SurrogateKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            "cross-entropy" | "crossentropy" => Ok(Self::CrossEntropy),
            other => Err(Error::Config(format!("unknown surrogate '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Quadratic => "quadratic",
            Self::CrossEntropy => "cross-entropy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    /// Seeded Gaussian-cluster data; sizes come from the `toy_*` config keys.
    Toy,
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv { train: PathBuf, test: PathBuf },
}

impl DatasetSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "toy" {
            return Ok(Self::Toy);
        }
        if let Some(rest) = s.strip_prefix("idx:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::Config(
                    "idx spec needs train_images,train_labels,test_images,test_labels".into(),
                ));
            }
            return Ok(Self::Idx {
                train_images: parts[0].into(),
                train_labels: parts[1].into(),
                test_images: parts[2].into(),
                test_labels: parts[3].into(),
            });
        }
        if let Some(rest) = s.strip_prefix("csv:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 2 {
                return Err(Error::Config("csv spec needs train,test paths".into()));
            }
            return Ok(Self::Csv { train: parts[0].into(), test: parts[1].into() });
        }
        Err(Error::Config(format!("unknown dataset spec '{s}'")))
    }

    pub fn to_spec_string(&self) -> String {
        match self {
            Self::Toy => "toy".into(),
            Self::Idx { train_images, train_labels, test_images, test_labels } => format!(
                "idx:{},{},{},{}",
                train_images.display(),
                train_labels.display(),
                test_images.display(),
                test_labels.display()
            ),
            Self::Csv { train, test } => format!("csv:{},{}", train.display(), test.display()),
        }
    }
}

/// The pre-declared stopping-time grid.
#[derive(Debug, Clone, PartialEq)]
pub enum HorizonSpec {
    Geometric { t_min: f64, t_max: f64, k: usize },
    Explicit(Vec<f64>),
}

impl HorizonSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("geometric:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Config("geometric spec needs t_min,t_max,k".into()));
            }
            let t_min = parse_f64(parts[0], "t_min")?;
            let t_max = parse_f64(parts[1], "t_max")?;
            let k = parts[2]
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("horizon count: {e}")))?;
            return Ok(Self::Geometric { t_min, t_max, k });
        }
        if let Some(rest) = s.strip_prefix("explicit:") {
            let grid = rest
                .split(',')
                .map(|p| parse_f64(p, "horizon"))
                .collect::<Result<Vec<f64>>>()?;
            return Ok(Self::Explicit(grid));
        }
        Err(Error::Config(format!("unknown horizon spec '{s}'")))
    }

    pub fn to_spec_string(&self) -> String {
        match self {
            Self::Geometric { t_min, t_max, k } => format!("geometric:{t_min},{t_max},{k}"),
            Self::Explicit(grid) => {
                let joined: Vec<String> = grid.iter().map(|t| t.to_string()).collect();
                format!("explicit:{}", joined.join(","))
            }
        }
    }

    /// Number of horizons the union-bound penalty must cover.
    pub fn count(&self) -> usize {
        match self {
            Self::Geometric { k, .. } => *k,
            Self::Explicit(grid) => grid.len(),
        }
    }

    /// Concrete grid values snapped onto the `dt` lattice, strictly ascending.
    pub fn resolve(&self, dt: f64) -> Result<Vec<f64>> {
        match self {
            Self::Geometric { t_min, t_max, k } => geometric_horizons(*t_min, *t_max, *k, dt),
            Self::Explicit(grid) => {
                let cfg = IntegratorConfig::new(Scheme::Euler, dt, grid.clone())?;
                Ok(cfg.horizon_grid)
            }
        }
    }

    /// The grid scaled by `factor` (used by width sweeps where the useful
    /// training times shrink with the model dimension).
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            Self::Geometric { t_min, t_max, k } => {
                Self::Geometric { t_min: t_min * factor, t_max: t_max * factor, k: *k }
            }
            Self::Explicit(grid) => Self::Explicit(grid.iter().map(|t| t * factor).collect()),
        }
    }
}

/// `k` geometrically spaced times in `[t_min, t_max]`, snapped to multiples
/// of `dt` and bumped to stay strictly ascending.
pub fn geometric_horizons(t_min: f64, t_max: f64, k: usize, dt: f64) -> Result<Vec<f64>> {
    if !(t_min > 0.0 && t_max >= t_min && t_min.is_finite() && t_max.is_finite()) {
        return Err(Error::Config(format!("bad horizon range [{t_min}, {t_max}]")));
    }
    if k == 0 {
        return Err(Error::Config("horizon count must be positive".into()));
    }
    if !(dt > 0.0) || ((t_max / dt).round() as usize) < k {
        return Err(Error::Config(format!(
            "dt = {dt} leaves fewer than {k} lattice points below {t_max}"
        )));
    }
    if k == 1 {
        let s = (t_max / dt).round().max(1.0);
        return Ok(vec![s * dt]);
    }
    let ratio = (t_max / t_min).powf(1.0 / (k - 1) as f64);
    let mut steps = Vec::with_capacity(k);
    let mut prev = 0usize;
    let mut raw = t_min;
    for _ in 0..k {
        let mut s = (raw / dt).round() as usize;
        if s <= prev {
            s = prev + 1;
        }
        steps.push(s);
        prev = s;
        raw *= ratio;
    }
    Ok(steps.into_iter().map(|s| s as f64 * dt).collect())
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::Config(format!("{what}: {e}")))
}

/// Complete description of one run. The horizon grid and `delta` are fixed
/// here, before any seed-derived draw happens.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub toy_per_cluster: usize,
    pub toy_train_size: usize,
    pub surrogate: SurrogateKind,
    pub alpha: f64,
    pub beta: f64,
    pub width: usize,
    /// `None` means the standard `1/N`.
    pub prior_variance: Option<f64>,
    pub scheme: Scheme,
    pub dt: f64,
    pub horizons: HorizonSpec,
    pub delta: f64,
    pub seed: u64,
    /// `None` trains full-batch; otherwise one integrator step per batch.
    pub batch_size: Option<usize>,
    /// Cap on held-out evaluation examples; `None` uses them all.
    pub test_subset: Option<usize>,
    pub full_scale: bool,
    /// Strength of the discrete-step correction term; `None` leaves the
    /// objective untouched.
    pub corrected_epsilon: Option<f64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Toy,
            toy_per_cluster: 5000,
            toy_train_size: 500,
            surrogate: SurrogateKind::Linear,
            alpha: 1.0,
            beta: 1.0,
            width: 1000,
            prior_variance: None,
            scheme: Scheme::Euler,
            dt: 0.01,
            horizons: HorizonSpec::Geometric { t_min: 0.05, t_max: 3.0, k: 50 },
            delta: 0.005,
            seed: 0,
            batch_size: None,
            test_subset: None,
            full_scale: false,
            corrected_epsilon: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

impl ExperimentConfig {
    /// Apply one `key=value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = DatasetSpec::parse(v)?,
            "toy_per_cluster" => self.toy_per_cluster = parse_usize(v, key)?,
            "toy_train_size" => self.toy_train_size = parse_usize(v, key)?,
            "surrogate" => self.surrogate = SurrogateKind::parse(v)?,
            "alpha" => self.alpha = parse_f64(v, key)?,
            "beta" => self.beta = parse_f64(v, key)?,
            "width" => self.width = parse_usize(v, key)?,
            "prior_variance" => {
                self.prior_variance = if v == "auto" { None } else { Some(parse_f64(v, key)?) }
            }
            "scheme" => self.scheme = Scheme::parse(v)?,
            "dt" => self.dt = parse_f64(v, key)?,
            "horizons" => self.horizons = HorizonSpec::parse(v)?,
            "delta" => self.delta = parse_f64(v, key)?,
            "seed" => {
                self.seed = v.parse().map_err(|e| Error::Config(format!("seed: {e}")))?
            }
            "batch_size" => {
                let n = parse_usize(v, key)?;
                self.batch_size = (n > 0).then_some(n);
            }
            "test_subset" => {
                let n = parse_usize(v, key)?;
                self.test_subset = (n > 0).then_some(n);
            }
            "full_scale" => {
                self.full_scale = v
                    .parse()
                    .map_err(|e| Error::Config(format!("full_scale: {e}")))?
            }
            "corrected_epsilon" => {
                self.corrected_epsilon =
                    if v == "none" { None } else { Some(parse_f64(v, key)?) }
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a line-oriented `key=value` config file body over the defaults.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_text(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: missing '='", lineno + 1)))?;
            self.apply(key, value)?;
        }
        Ok(())
    }

    /// Serialize back to `key=value` lines (the manifest echo).
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        put("dataset", self.dataset.to_spec_string());
        put("toy_per_cluster", self.toy_per_cluster.to_string());
        put("toy_train_size", self.toy_train_size.to_string());
        put("surrogate", self.surrogate.name().into());
        put("alpha", self.alpha.to_string());
        put("beta", self.beta.to_string());
        put("width", self.width.to_string());
        put(
            "prior_variance",
            self.prior_variance.map(|v| v.to_string()).unwrap_or_else(|| "auto".into()),
        );
        put("scheme", self.scheme.name().into());
        put("dt", self.dt.to_string());
        put("horizons", self.horizons.to_spec_string());
        put("delta", self.delta.to_string());
        put("seed", self.seed.to_string());
        put("batch_size", self.batch_size.unwrap_or(0).to_string());
        put("test_subset", self.test_subset.unwrap_or(0).to_string());
        put("full_scale", self.full_scale.to_string());
        put(
            "corrected_epsilon",
            self.corrected_epsilon.map(|v| v.to_string()).unwrap_or_else(|| "none".into()),
        );
        put("out_dir", self.out_dir.display().to_string());
        s
    }

    fn sub_seed(&self, role: u64) -> u64 {
        self.seed.wrapping_add(role.wrapping_mul(SEED_STRIDE))
    }

    pub fn data_seed(&self) -> u64 {
        self.sub_seed(1)
    }
    pub fn feature_seed(&self) -> u64 {
        self.sub_seed(2)
    }
    pub fn prior_seed(&self) -> u64 {
        self.sub_seed(3)
    }
    pub fn batch_seed(&self) -> u64 {
        self.sub_seed(4)
    }
    pub fn subset_seed(&self) -> u64 {
        self.sub_seed(5)
    }
    pub fn holdout_seed(&self) -> u64 {
        self.sub_seed(6)
    }
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim().parse::<usize>().map_err(|e| Error::Config(format!("{what}: {e}")))
}

/// Load (train, test) per the config, applying desk-scale caps.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let (mut train, mut test) = match &cfg.dataset {
        DatasetSpec::Toy => {
            let toy = ToyConfig {
                per_cluster: cfg.toy_per_cluster,
                train_size: cfg.toy_train_size,
                seed: cfg.data_seed(),
                ..ToyConfig::new(0)
            };
            data::gaussian_clusters(&toy)?
        }
        DatasetSpec::Idx { train_images, train_labels, test_images, test_labels } => {
            let train = data::load_idx(train_images, train_labels, SplitTag::Train)?;
            let test = data::load_idx(test_images, test_labels, SplitTag::Test)?;
            (train, test)
        }
        DatasetSpec::Csv { train, test } => {
            let tr = data::load_dataset_csv(train, SplitTag::Train)?;
            let te = data::load_dataset_csv(test, SplitTag::Test)?;
            (tr, te)
        }
    };
    if !cfg.full_scale && train.len() > DESK_SCALE_TRAIN_CAP {
        train = train.subsample(DESK_SCALE_TRAIN_CAP, cfg.subset_seed())?;
    }
    if let Some(n) = cfg.test_subset {
        if n < test.len() {
            test = test.subsample(n, cfg.subset_seed().wrapping_add(1))?;
        }
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    Aborted,
}

impl RowStatus {
    fn name(self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::Aborted => "aborted",
        }
    }
}

/// One horizon's worth of certificate data.
#[derive(Debug, Clone)]
pub struct HorizonRow {
    pub horizon: f64,
    pub train_error: f64,
    pub surrogate_value: f64,
    pub log_density_ratio: f64,
    pub laplacian_integral: f64,
    pub mcallester: f64,
    pub kl: f64,
    pub test_error: f64,
    /// Relative gap between the numeric and closed-form flows; NaN when no
    /// closed form applies (cross-entropy, batch schedules, corrected
    /// objectives).
    pub analytic_rel_err: f64,
    pub status: RowStatus,
}

pub const RUN_CSV_HEADER: &str = "horizon,train_error,surrogate_value,log_density_ratio,\
laplacian_integral,mcallester_bound,kl_bound,test_error,analytic_rel_err,status";

/// Full per-horizon record of one certificate run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub rows: Vec<HorizonRow>,
    pub m: usize,
    pub k: usize,
    pub delta: f64,
    pub n_dim: usize,
    /// Set when the flow diverged; the CLI exits nonzero on it.
    pub invalid: bool,
    pub manifest: Manifest,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(RUN_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.horizon,
                r.train_error,
                r.surrogate_value,
                r.log_density_ratio,
                r.laplacian_integral,
                r.mcallester,
                r.kl,
                r.test_error,
                r.analytic_rel_err,
                r.status.name()
            ));
        }
        s
    }

    /// Row minimizing the kl-inverse bound among intact rows; ties resolve to
    /// the smaller horizon.
    pub fn best_kl_row(&self) -> Option<&HorizonRow> {
        let mut best: Option<&HorizonRow> = None;
        for r in &self.rows {
            if r.status != RowStatus::Ok || !r.kl.is_finite() {
                continue;
            }
            if best.is_none_or(|b| r.kl < b.kl) {
                best = Some(r);
            }
        }
        best
    }
}

enum AnalyticRoute {
    Linear { gamma: Vec<f64> },
    Quadratic { solver: QuadraticFlowSolver, beta: f64 },
}

impl AnalyticRoute {
    fn solve(&self, h0: &[f64], t: f64) -> Vec<f64> {
        match self {
            AnalyticRoute::Linear { gamma } => linear::linear_analytic_flow(h0, gamma, t),
            AnalyticRoute::Quadratic { solver, beta } => solver.solve(h0, *beta, t),
        }
    }
}

fn relative_gap(reference: &[f64], value: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (a, b) in reference.iter().zip(value) {
        diff += (a - b) * (a - b);
        norm += a * a;
    }
    (diff.sqrt()) / norm.sqrt().max(f64::MIN_POSITIVE)
}

struct RunSetup {
    test: LabeledDataset,
    map: FeatureMap,
    cache: Arc<FeatureCache>,
    labels: Arc<Vec<i32>>,
    k_out: usize,
    n_dim: usize,
    prior: IsotropicGaussian,
    h0: Vec<f64>,
    m_train: usize,
    manifest: Manifest,
}

impl RunSetup {
    fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, test) = load_datasets(cfg)?;
        let k_out = match cfg.surrogate {
            SurrogateKind::Linear | SurrogateKind::Quadratic => {
                if train.labels.iter().any(|&y| y != 1 && y != -1) {
                    return Err(Error::Config(format!(
                        "{} surrogate needs binary +-1 labels",
                        cfg.surrogate.name()
                    )));
                }
                1
            }
            SurrogateKind::CrossEntropy => linear::class_count(&train.labels)?,
        };
        let n_dim = k_out * cfg.width;
        let map = FeatureMap::generate(train.d_in, cfg.width, cfg.feature_seed());
        let cache = Arc::new(FeatureCache::build(&map, &train)?);
        let labels = Arc::new(train.labels.clone());
        let variance = cfg.prior_variance.unwrap_or(1.0 / n_dim as f64);
        let prior = IsotropicGaussian::new(n_dim, variance)?;
        let h0 = prior.sample(cfg.prior_seed());

        let mut manifest = Manifest::new();
        for line in cfg.to_kv_text().lines() {
            if let Some((k, v)) = line.split_once('=') {
                manifest.push(&format!("config.{k}"), v);
            }
        }
        manifest.push("k_out", k_out);
        manifest.push("n_dim", n_dim);
        manifest.push("prior_variance_value", variance);
        manifest.push("data_seed", cfg.data_seed());
        manifest.push("feature_seed", cfg.feature_seed());
        manifest.push("prior_seed", cfg.prior_seed());
        manifest.push("batch_seed", cfg.batch_seed());
        manifest.push("m_train", train.len());
        manifest.push("m_test", test.len());
        manifest.extend_prefixed("train_data.", &train.manifest);
        manifest.extend_prefixed("test_data.", &test.manifest);

        let m_train = train.len();
        Ok(Self { test, map, cache, labels, k_out, n_dim, prior, h0, m_train, manifest })
    }

    fn full_batch(&self) -> Batch {
        Batch::full(self.cache.clone(), self.labels.clone())
    }
}

fn make_objective(
    cfg: &ExperimentConfig,
    batch: Batch,
    k_out: usize,
) -> Result<Box<dyn Objective + Send + Sync>> {
    let inner: Box<dyn Objective + Send + Sync> = match cfg.surrogate {
        SurrogateKind::Linear => Box::new(LinearSurrogate::new(&batch)?),
        SurrogateKind::Quadratic => Box::new(QuadraticSurrogate::new(batch, cfg.alpha, cfg.beta)?),
        SurrogateKind::CrossEntropy => Box::new(CrossEntropySurrogate::new(batch, k_out)?),
    };
    Ok(match cfg.corrected_epsilon {
        Some(eps) if eps > 0.0 => Box::new(BackwardErrorCorrected::new(inner, eps)),
        _ => inner,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TestEval {
    AllHorizons,
    BestOnly,
}

/// What a single integration pass produced: a snapshot (or abort) per horizon.
struct SnapshotRun {
    snapshots: Vec<Option<FlowState>>,
    diverged: bool,
}

fn integrate_for_horizons(
    cfg: &ExperimentConfig,
    setup: &RunSetup,
    horizons: &[f64],
    dt: f64,
) -> Result<SnapshotRun> {
    let integ = IntegratorConfig::new(cfg.scheme, dt, horizons.to_vec())?;
    let result = match cfg.batch_size {
        Some(bs) if bs < setup.m_train => {
            let total_steps = *integ.grid_steps()?.last().unwrap();
            let plan = data::batch_schedule(setup.m_train, bs, dt, total_steps, cfg.batch_seed())?;
            let objectives: Vec<Box<dyn Objective + Send + Sync>> = plan
                .batches
                .iter()
                .map(|idxs| {
                    let batch = Batch::subset(
                        setup.cache.clone(),
                        setup.labels.clone(),
                        Arc::new(idxs.clone()),
                    );
                    make_objective(cfg, batch, setup.k_out)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&dyn Objective> = objectives.iter().map(|o| o.as_ref() as _).collect();
            let piecewise = PiecewiseObjective::new(&plan.schedule, refs)?;
            flow::integrate_piecewise(&setup.h0, &piecewise, &integ)?
        }
        _ => {
            let obj = make_objective(cfg, setup.full_batch(), setup.k_out)?;
            flow::integrate(&setup.h0, &obj, &integ)?
        }
    };
    let diverged = result.diverged();
    let mut snapshots: Vec<Option<FlowState>> = result.snapshots.into_iter().map(Some).collect();
    snapshots.resize(horizons.len(), None);
    Ok(SnapshotRun { snapshots, diverged })
}

fn analytic_route(cfg: &ExperimentConfig, setup: &RunSetup) -> Result<Option<AnalyticRoute>> {
    let full_batch_run = cfg.batch_size.is_none_or(|bs| bs >= setup.m_train);
    if !full_batch_run || cfg.corrected_epsilon.is_some() {
        return Ok(None);
    }
    match cfg.surrogate {
        SurrogateKind::Linear => {
            let gamma = SufficientStats::gamma_only(&setup.full_batch())?;
            Ok(Some(AnalyticRoute::Linear { gamma }))
        }
        SurrogateKind::Quadratic => {
            let stats = SufficientStats::compute(&setup.full_batch(), cfg.alpha)?;
            Ok(Some(AnalyticRoute::Quadratic {
                solver: QuadraticFlowSolver::new(&stats)?,
                beta: cfg.beta,
            }))
        }
        SurrogateKind::CrossEntropy => Ok(None),
    }
}

fn aborted_row(horizon: f64) -> HorizonRow {
    HorizonRow {
        horizon,
        train_error: f64::NAN,
        surrogate_value: f64::NAN,
        log_density_ratio: f64::NAN,
        laplacian_integral: f64::NAN,
        mcallester: f64::NAN,
        kl: f64::NAN,
        test_error: f64::NAN,
        analytic_rel_err: f64::NAN,
        status: RowStatus::Aborted,
    }
}

fn fill_test_errors(
    rows: &mut [HorizonRow],
    snapshots: &[Option<FlowState>],
    setup: &RunSetup,
    mode: TestEval,
) -> Result<()> {
    let selected: Vec<usize> = match mode {
        TestEval::AllHorizons => (0..rows.len())
            .filter(|&i| snapshots[i].is_some() && rows[i].status == RowStatus::Ok)
            .collect(),
        TestEval::BestOnly => {
            let mut best: Option<usize> = None;
            for (i, r) in rows.iter().enumerate() {
                if snapshots[i].is_none() || !r.kl.is_finite() {
                    continue;
                }
                if best.is_none_or(|b| r.kl < rows[b].kl) {
                    best = Some(i);
                }
            }
            best.into_iter().collect()
        }
    };
    if selected.is_empty() {
        return Ok(());
    }
    let hs: Vec<&[f64]> =
        selected.iter().map(|&i| snapshots[i].as_ref().unwrap().h.as_slice()).collect();
    let errs = linear::evaluate_errors(&setup.map, setup.k_out, &hs, &setup.test)?;
    for (&i, err) in selected.iter().zip(errs) {
        rows[i].test_error = err;
    }
    Ok(())
}

fn certify_impl(cfg: &ExperimentConfig, mode: TestEval) -> Result<RunRecord> {
    let setup = RunSetup::build(cfg)?;
    let horizons = cfg.horizons.resolve(cfg.dt)?;
    let k_declared = horizons.len();
    let run = integrate_for_horizons(cfg, &setup, &horizons, cfg.dt)?;
    let route = analytic_route(cfg, &setup)?;
    let train_batch = setup.full_batch();
    let value_obj = make_objective(cfg, train_batch.clone(), setup.k_out)?;

    let mut rows = Vec::with_capacity(horizons.len());
    let mut overflowed = false;
    for (i, &t) in horizons.iter().enumerate() {
        let Some(snap) = &run.snapshots[i] else {
            rows.push(aborted_row(t));
            continue;
        };
        let (train_error, _) = linear::zero_one_losses(&snap.h, &train_batch, setup.k_out)?;
        let log_density_ratio = setup.prior.log_density_ratio(&setup.h0, &snap.h);
        // a finite state can still overflow the complexity arithmetic; such a
        // row is as invalid as a diverged one
        if !log_density_ratio.is_finite() || !snap.laplacian_integral.is_finite() {
            overflowed = true;
            rows.push(aborted_row(t));
            continue;
        }
        let cert = BoundCertificate::evaluate(
            train_error,
            log_density_ratio,
            snap.laplacian_integral,
            setup.m_train,
            cfg.delta,
            k_declared,
        )?;
        let analytic_rel_err = match &route {
            Some(r) => relative_gap(&r.solve(&setup.h0, t), &snap.h),
            None => f64::NAN,
        };
        rows.push(HorizonRow {
            horizon: t,
            train_error,
            surrogate_value: value_obj.value(&snap.h),
            log_density_ratio,
            laplacian_integral: snap.laplacian_integral,
            mcallester: cert.mcallester,
            kl: cert.kl_inv,
            test_error: f64::NAN,
            analytic_rel_err,
            status: RowStatus::Ok,
        });
    }
    fill_test_errors(&mut rows, &run.snapshots, &setup, mode)?;

    let mut manifest = setup.manifest.clone();
    manifest.push("study", "certify");
    manifest.push(
        "resolved_horizons",
        horizons.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","),
    );
    Ok(RunRecord {
        rows,
        m: setup.m_train,
        k: k_declared,
        delta: cfg.delta,
        n_dim: setup.n_dim,
        invalid: run.diverged || overflowed,
        manifest,
    })
}

/// Sample the initialization, integrate the flow, and evaluate both bounds at
/// every horizon on the declared grid. For the linear and quadratic
/// surrogates trained full-batch, the closed-form flow is cross-checked
/// against the numeric one and the gap recorded per row.
pub fn certify(cfg: &ExperimentConfig) -> Result<RunRecord> {
    certify_impl(cfg, TestEval::AllHorizons)
}

/// One width's summary line in a scaling study.
#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub width: usize,
    pub n_dim: usize,
    pub best_horizon: f64,
    pub kl_bound: f64,
    pub mcallester_bound: f64,
    pub train_error: f64,
    pub test_error: f64,
    pub invalid: bool,
}

#[derive(Debug, Clone)]
pub struct ScalingRecord {
    pub rows: Vec<ScalingRow>,
    pub manifest: Manifest,
}

pub const SCALING_CSV_HEADER: &str =
    "width,n,best_horizon,kl_bound,mcallester_bound,train_error,test_error";

impl ScalingRecord {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(SCALING_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.width,
                r.n_dim,
                r.best_horizon,
                r.kl_bound,
                r.mcallester_bound,
                r.train_error,
                r.test_error
            ));
        }
        s
    }
}

/// Run [`certify`] per width (horizon grid and step size scaled by
/// `base_width / width`, recorded in the manifest), select the best horizon
/// by the kl bound (ties to the smaller time), and report one row per width.
pub fn scaling_study(cfg: &ExperimentConfig, widths: &[usize]) -> Result<ScalingRecord> {
    if widths.is_empty() {
        return Err(Error::Config("empty width list".into()));
    }
    let base = cfg.width as f64;
    let rows: Vec<ScalingRow> = widths
        .par_iter()
        .map(|&w| -> Result<ScalingRow> {
            if w == 0 {
                return Err(Error::Config("width must be positive".into()));
            }
            let factor = base / w as f64;
            let mut per = cfg.clone();
            per.width = w;
            per.dt = cfg.dt * factor;
            per.horizons = cfg.horizons.scaled(factor);
            let rec = certify_impl(&per, TestEval::BestOnly)?;
            let best = rec
                .best_kl_row()
                .ok_or_else(|| Error::Config(format!("width {w}: no intact horizon row")))?;
            Ok(ScalingRow {
                width: w,
                n_dim: rec.n_dim,
                best_horizon: best.horizon,
                kl_bound: best.kl,
                mcallester_bound: best.mcallester,
                train_error: best.train_error,
                test_error: best.test_error,
                invalid: rec.invalid,
            })
        })
        .collect::<Result<_>>()?;

    let mut manifest = Manifest::new();
    manifest.push("study", "scaling");
    for line in cfg.to_kv_text().lines() {
        if let Some((k, v)) = line.split_once('=') {
            manifest.push(&format!("config.{k}"), v);
        }
    }
    manifest.push("widths", widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","));
    manifest.push("horizon_scaling", "base_width_over_width");
    Ok(ScalingRecord { rows, manifest })
}

#[derive(Debug, Clone)]
pub struct DiscretizationRow {
    pub t: f64,
    pub bound_coarse: f64,
    pub bound_fine: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct DiscretizationRecord {
    pub rows: Vec<DiscretizationRow>,
    pub manifest: Manifest,
}

pub const DISCRETIZATION_CSV_HEADER: &str = "t,bound_coarse,bound_fine,rel_err";

impl DiscretizationRecord {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(DISCRETIZATION_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.t, r.bound_coarse, r.bound_fine, r.rel_err));
        }
        s
    }

    pub fn max_abs_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.rel_err.abs()).fold(0.0, f64::max)
    }
}

/// Run the same training twice, with `dt_coarse` and `dt_fine`, against the
/// identical batch sequence per unit time (each batch segment spans
/// `dt_coarse / dt_fine` consecutive fine steps), and compare the kl bounds
/// at matched physical times.
pub fn discretization_study(
    cfg: &ExperimentConfig,
    dt_coarse: f64,
    dt_fine: f64,
) -> Result<DiscretizationRecord> {
    if !(dt_coarse > 0.0 && dt_fine > 0.0 && dt_fine <= dt_coarse) {
        return Err(Error::Config("need 0 < dt_fine <= dt_coarse".into()));
    }
    let ratio = dt_coarse / dt_fine;
    if (ratio - ratio.round()).abs() > 1e-9 * ratio.round() {
        return Err(Error::Config(format!(
            "dt_coarse/dt_fine = {ratio} is not an integer; horizons would mismatch"
        )));
    }

    let setup = RunSetup::build(cfg)?;
    let horizons = cfg.horizons.resolve(dt_coarse)?;
    let k_declared = horizons.len();
    let train_batch = setup.full_batch();

    // One schedule on the coarse lattice drives both runs; under the fine
    // step each segment simply spans more steps.
    let schedule: BatchSchedule;
    let objectives: Vec<Box<dyn Objective + Send + Sync>>;
    match cfg.batch_size {
        Some(bs) if bs < setup.m_train => {
            let total_steps = (horizons.last().unwrap() / dt_coarse).round() as usize;
            let plan =
                data::batch_schedule(setup.m_train, bs, dt_coarse, total_steps, cfg.batch_seed())?;
            objectives = plan
                .batches
                .iter()
                .map(|idxs| {
                    let batch = Batch::subset(
                        setup.cache.clone(),
                        setup.labels.clone(),
                        Arc::new(idxs.clone()),
                    );
                    make_objective(cfg, batch, setup.k_out)
                })
                .collect::<Result<_>>()?;
            schedule = plan.schedule;
        }
        _ => {
            objectives = vec![make_objective(cfg, train_batch.clone(), setup.k_out)?];
            schedule = BatchSchedule {
                segments: vec![Segment { t_start: 0.0, t_end: *horizons.last().unwrap(), batch: 0 }],
            };
        }
    }
    let refs: Vec<&dyn Objective> = objectives.iter().map(|o| o.as_ref() as _).collect();
    let piecewise = PiecewiseObjective::new(&schedule, refs)?;

    let run_bounds = |dt: f64| -> Result<Vec<f64>> {
        let integ = IntegratorConfig::new(cfg.scheme, dt, horizons.clone())?;
        let result = flow::integrate_piecewise(&setup.h0, &piecewise, &integ)?;
        if let Some(abort) = result.abort {
            return Err(Error::Diverged {
                t: abort.t,
                reason: abort.reason,
                max_norm: abort.max_norm,
            });
        }
        result
            .snapshots
            .iter()
            .map(|snap| {
                let (loss, _) = linear::zero_one_losses(&snap.h, &train_batch, setup.k_out)?;
                let cert = BoundCertificate::evaluate(
                    loss,
                    setup.prior.log_density_ratio(&setup.h0, &snap.h),
                    snap.laplacian_integral,
                    setup.m_train,
                    cfg.delta,
                    k_declared,
                )?;
                Ok(cert.kl_inv)
            })
            .collect()
    };

    let coarse = run_bounds(dt_coarse)?;
    let fine = run_bounds(dt_fine)?;
    let rows = horizons
        .iter()
        .zip(coarse.iter().zip(&fine))
        .map(|(&t, (&b1, &b2))| DiscretizationRow {
            t,
            bound_coarse: b1,
            bound_fine: b2,
            rel_err: if b1 == b2 { 0.0 } else { (b1 - b2) / b2 },
        })
        .collect();

    let mut manifest = setup.manifest.clone();
    manifest.push("study", "discretization");
    manifest.push("dt_coarse", dt_coarse);
    manifest.push("dt_fine", dt_fine);
    Ok(DiscretizationRecord { rows, manifest })
}

/// Certificate with a data-dependent prior: flow on a held-out slice `s'` of
/// the training data until `t0`, then on the remainder `s` until each
/// horizon. The complexity is evaluated through backward integration and the
/// bound uses `m = |s|` only. With `t0 = 0` and no holdout this is exactly
/// [`certify`].
pub fn data_dependent_run(
    cfg: &ExperimentConfig,
    t0: f64,
    holdout_fraction: f64,
) -> Result<RunRecord> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::Config(format!("holdout fraction {holdout_fraction} outside [0, 1)")));
    }
    if t0 < 0.0 || !t0.is_finite() {
        return Err(Error::Config(format!("t0 = {t0} must be nonnegative")));
    }
    if t0 == 0.0 && holdout_fraction == 0.0 {
        return certify(cfg);
    }
    if t0 > 0.0 && holdout_fraction == 0.0 {
        return Err(Error::Config("prior phase needs a holdout fraction > 0".into()));
    }
    let steps_t0 = (t0 / cfg.dt).round();
    if t0 > 0.0 && ((t0 / cfg.dt) - steps_t0).abs() > 1e-6 {
        return Err(Error::Config(format!("t0 = {t0} is not aligned to dt = {}", cfg.dt)));
    }

    let setup = RunSetup::build(cfg)?;
    let horizons = cfg.horizons.resolve(cfg.dt)?;
    let k_declared = horizons.len();
    if t0 >= horizons[0] {
        return Err(Error::Config(format!(
            "t0 = {t0} must precede the first horizon {}",
            horizons[0]
        )));
    }

    // Disjoint split of the training indices: s' learns the prior, s trains.
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<u32> = (0..setup.m_train as u32).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.holdout_seed());
    order.shuffle(&mut rng);
    let n_holdout = ((setup.m_train as f64 * holdout_fraction).round() as usize)
        .clamp(1, setup.m_train - 1);
    let holdout_idx: Vec<u32> = order[..n_holdout].to_vec();
    let train_idx: Vec<u32> = order[n_holdout..].to_vec();
    let m_bound = train_idx.len();

    let prior_batch =
        Batch::subset(setup.cache.clone(), setup.labels.clone(), Arc::new(holdout_idx));
    let train_batch =
        Batch::subset(setup.cache.clone(), setup.labels.clone(), Arc::new(train_idx));
    let obj_prior = make_objective(cfg, prior_batch, setup.k_out)?;
    let obj_train = make_objective(cfg, train_batch.clone(), setup.k_out)?;

    let t_max = *horizons.last().unwrap();
    let (schedule, grid) = if t0 > 0.0 {
        let mut grid = Vec::with_capacity(horizons.len() + 1);
        grid.push(t0);
        grid.extend_from_slice(&horizons);
        (
            BatchSchedule {
                segments: vec![
                    Segment { t_start: 0.0, t_end: t0, batch: 0 },
                    Segment { t_start: t0, t_end: t_max, batch: 1 },
                ],
            },
            grid,
        )
    } else {
        (BatchSchedule { segments: vec![Segment { t_start: 0.0, t_end: t_max, batch: 1 }] },
         horizons.clone())
    };
    let refs: Vec<&dyn Objective> = vec![obj_prior.as_ref() as _, obj_train.as_ref() as _];
    let piecewise = PiecewiseObjective::new(&schedule, refs)?;
    let integ = IntegratorConfig::new(cfg.scheme, cfg.dt, grid)?;
    let result = flow::integrate_piecewise(&setup.h0, &piecewise, &integ)?;
    let diverged = result.diverged();

    let mut snaps: Vec<Option<FlowState>> = result.snapshots.into_iter().map(Some).collect();
    let state_t0 = if t0 > 0.0 {
        if snaps.is_empty() {
            None
        } else {
            snaps.remove(0)
        }
    } else {
        Some(FlowState::initial(setup.h0.clone()))
    };
    snaps.resize(horizons.len(), None);

    let mut rows = Vec::with_capacity(horizons.len());
    let mut overflowed = false;
    for (i, &t) in horizons.iter().enumerate() {
        let (Some(snap), Some(at_t0)) = (&snaps[i], &state_t0) else {
            rows.push(aborted_row(t));
            continue;
        };
        let dd = flow::data_dependent_complexity(
            &setup.prior,
            at_t0,
            snap,
            &obj_prior,
            cfg.scheme,
            cfg.dt,
        )?;
        let integral_part = (dd.forward_prior_integral - dd.backward_prior_integral)
            + dd.train_integral;
        if !dd.log_density_ratio.is_finite() || !integral_part.is_finite() {
            overflowed = true;
            rows.push(aborted_row(t));
            continue;
        }
        let (train_error, _) = linear::zero_one_losses(&snap.h, &train_batch, setup.k_out)?;
        let cert = BoundCertificate::evaluate(
            train_error,
            dd.log_density_ratio,
            integral_part,
            m_bound,
            cfg.delta,
            k_declared,
        )?;
        rows.push(HorizonRow {
            horizon: t,
            train_error,
            surrogate_value: obj_train.value(&snap.h),
            log_density_ratio: dd.log_density_ratio,
            laplacian_integral: integral_part,
            mcallester: cert.mcallester,
            kl: cert.kl_inv,
            test_error: f64::NAN,
            analytic_rel_err: f64::NAN,
            status: RowStatus::Ok,
        });
    }
    fill_test_errors(&mut rows, &snaps, &setup, TestEval::AllHorizons)?;

    let mut manifest = setup.manifest.clone();
    manifest.push("study", "data_dependent");
    manifest.push("t0", t0);
    manifest.push("holdout_fraction", holdout_fraction);
    manifest.push("m_prior_phase", n_holdout);
    manifest.push("m_bound", m_bound);
    Ok(RunRecord {
        rows,
        m: m_bound,
        k: k_declared,
        delta: cfg.delta,
        n_dim: setup.n_dim,
        invalid: diverged || overflowed,
        manifest,
    })
}
