//! Datasets: Gaussian-cluster toy data, IDX image ingestion, batch plans.
//!
//! Every dataset carries a provenance manifest (line-oriented `key=value`
//! text with seeds or content hashes) so runs can be replayed exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::flow::{BatchSchedule, Segment};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }
    }
}

/// Ordered `key=value` provenance record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    /// Copy all entries of `other` under a key prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Manifest) {
        for (k, v) in &other.entries {
            self.entries.push((format!("{prefix}{k}"), v.clone()));
        }
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Labeled inputs, row-major `m x d_in`, with +-1 binary labels or class ids.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub inputs: Vec<f64>,
    pub d_in: usize,
    pub labels: Vec<i32>,
    pub split: SplitTag,
    pub manifest: Manifest,
}

impl LabeledDataset {
    pub fn new(
        inputs: Vec<f64>,
        d_in: usize,
        labels: Vec<i32>,
        split: SplitTag,
        manifest: Manifest,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Domain("dataset must have at least one example".into()));
        }
        if d_in == 0 || inputs.len() != labels.len() * d_in {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * d_in,
                got: inputs.len(),
            });
        }
        Ok(Self { inputs, d_in, labels, split, manifest })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.d_in..(i + 1) * self.d_in]
    }

    /// Seeded subset without replacement, preserving draw order.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<LabeledDataset> {
        if n == 0 || n > self.len() {
            return Err(Error::Domain(format!("subset size {n} out of range 1..={}", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(n);
        let mut inputs = Vec::with_capacity(n * self.d_in);
        let mut labels = Vec::with_capacity(n);
        for &i in &idx {
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        let mut manifest = self.manifest.clone();
        manifest.push("subset_of", self.len());
        manifest.push("subset_size", n);
        manifest.push("subset_seed", seed);
        LabeledDataset::new(inputs, self.d_in, labels, self.split, manifest)
    }
}

/// Knobs for the toy generator; defaults are the standard full-size setup
/// (eight clusters of 5000 points in R^5, variance 0.1, 500 train points).
#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub dim: usize,
    pub clusters: usize,
    pub per_cluster: usize,
    pub variance: f64,
    pub train_size: usize,
    pub seed: u64,
}

impl ToyConfig {
    pub fn new(seed: u64) -> Self {
        Self { dim: 5, clusters: 8, per_cluster: 5000, variance: 0.1, train_size: 500, seed }
    }

    /// A small variant for quick runs and tests.
    pub fn desk(seed: u64) -> Self {
        Self { per_cluster: 250, ..Self::new(seed) }
    }
}

/// Binary Gaussian-cluster data: cluster means drawn from a standard normal,
/// isotropic clusters around them, the first half of the clusters labeled -1
/// and the rest +1, every point projected to the unit sphere, and a uniformly
/// random train/test split.
pub fn gaussian_clusters(cfg: &ToyConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    if cfg.clusters == 0 || cfg.clusters % 2 != 0 {
        return Err(Error::Config(format!("cluster count {} must be even", cfg.clusters)));
    }
    if cfg.dim == 0 || cfg.per_cluster == 0 || !(cfg.variance > 0.0) {
        return Err(Error::Config("invalid toy-data parameters".into()));
    }
    let total = cfg.clusters * cfg.per_cluster;
    if cfg.train_size == 0 || cfg.train_size >= total {
        return Err(Error::Config(format!("train size {} out of range", cfg.train_size)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let means: Vec<f64> = (0..cfg.clusters * cfg.dim).map(|_| normal()).collect();
    let sigma = cfg.variance.sqrt();
    let mut inputs = Vec::with_capacity(total * cfg.dim);
    let mut labels = Vec::with_capacity(total);
    for c in 0..cfg.clusters {
        let mean = &means[c * cfg.dim..(c + 1) * cfg.dim];
        let label = if c < cfg.clusters / 2 { -1 } else { 1 };
        for _ in 0..cfg.per_cluster {
            let start = inputs.len();
            for &mu in mean {
                inputs.push(mu + sigma * normal());
            }
            let point = &mut inputs[start..];
            let norm = point.iter().map(|x| x * x).sum::<f64>().sqrt();
            debug_assert!(norm > 0.0);
            for x in point.iter_mut() {
                *x /= norm;
            }
            labels.push(label);
        }
    }

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);

    let mut manifest = Manifest::new();
    manifest.push("kind", "gaussian_clusters");
    manifest.push("seed", cfg.seed);
    manifest.push("dim", cfg.dim);
    manifest.push("clusters", cfg.clusters);
    manifest.push("per_cluster", cfg.per_cluster);
    manifest.push("variance", cfg.variance);
    manifest.push("train_size", cfg.train_size);
    manifest.push("label_rule", "first_half_clusters_negative");
    manifest.push("split", "uniform");

    let gather = |idxs: &[usize], split: SplitTag| -> Result<LabeledDataset> {
        let mut xs = Vec::with_capacity(idxs.len() * cfg.dim);
        let mut ys = Vec::with_capacity(idxs.len());
        for &i in idxs {
            xs.extend_from_slice(&inputs[i * cfg.dim..(i + 1) * cfg.dim]);
            ys.push(labels[i]);
        }
        let mut m = manifest.clone();
        m.push("split_tag", split.name());
        m.push("size", idxs.len());
        LabeledDataset::new(xs, cfg.dim, ys, split, m)
    };

    let train = gather(&order[..cfg.train_size], SplitTag::Train)?;
    let test = gather(&order[cfg.train_size..], SplitTag::Test)?;
    Ok((train, test))
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::IdxFormat {
            path: path.display().to_string(),
            reason: "truncated header".into(),
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Parse a big-endian IDX image/label file pair into a dataset with pixels
/// scaled to [0, 1] and images flattened.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: SplitTag) -> Result<LabeledDataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;

    let magic = read_u32_be(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::IdxFormat {
            path: images_path.display().to_string(),
            reason: format!("magic {magic:#010x}, want {IDX_IMAGE_MAGIC:#010x}"),
        });
    }
    let n = read_u32_be(&img_bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&img_bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&img_bytes, 12, images_path)? as usize;
    let payload = &img_bytes[16..];
    if payload.len() != n * rows * cols {
        return Err(Error::IdxFormat {
            path: images_path.display().to_string(),
            reason: format!("payload {} bytes, want {}", payload.len(), n * rows * cols),
        });
    }

    let lbl_magic = read_u32_be(&lbl_bytes, 0, labels_path)?;
    if lbl_magic != IDX_LABEL_MAGIC {
        return Err(Error::IdxFormat {
            path: labels_path.display().to_string(),
            reason: format!("magic {lbl_magic:#010x}, want {IDX_LABEL_MAGIC:#010x}"),
        });
    }
    let n_labels = read_u32_be(&lbl_bytes, 4, labels_path)? as usize;
    let lbl_payload = &lbl_bytes[8..];
    if lbl_payload.len() != n_labels {
        return Err(Error::IdxFormat {
            path: labels_path.display().to_string(),
            reason: format!("payload {} bytes, want {n_labels}", lbl_payload.len()),
        });
    }
    if n != n_labels {
        return Err(Error::IdxFormat {
            path: images_path.display().to_string(),
            reason: format!("{n} images but {n_labels} labels"),
        });
    }

    let inputs: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<i32> = lbl_payload.iter().map(|&b| b as i32).collect();

    let mut manifest = Manifest::new();
    manifest.push("kind", "idx");
    manifest.push("images_path", images_path.display());
    manifest.push("labels_path", labels_path.display());
    manifest.push("images_sha256", sha256_hex(&img_bytes));
    manifest.push("labels_sha256", sha256_hex(&lbl_bytes));
    manifest.push("count", n);
    manifest.push("rows", rows);
    manifest.push("cols", cols);

    LabeledDataset::new(inputs, rows * cols, labels, split, manifest)
}

/// Write raw pixels and labels in IDX format (inverse of [`load_idx`] up to
/// the [0, 1] scaling).
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    pixels: &[u8],
    n: usize,
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> Result<()> {
    if pixels.len() != n * rows * cols || labels.len() != n {
        return Err(Error::Domain("pixel/label sizes inconsistent with counts".into()));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend_from_slice(pixels);
    fs::write(images_path, img)?;

    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    fs::write(labels_path, lbl)?;
    Ok(())
}

/// Write a dataset as CSV with header `x0,...,x{d-1},label`.
pub fn write_dataset_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for j in 0..ds.d_in {
        if j > 0 {
            out.push(b',');
        }
        write!(out, "x{j}")?;
    }
    writeln!(out, ",label")?;
    for i in 0..ds.len() {
        for (j, v) in ds.input(i).iter().enumerate() {
            if j > 0 {
                out.push(b',');
            }
            write!(out, "{v}")?;
        }
        writeln!(out, ",{}", ds.labels[i])?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a dataset written by [`write_dataset_csv`].
pub fn load_dataset_csv(path: &Path, split: SplitTag) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty csv", path.display())))?;
    let d_in = header.split(',').count() - 1;
    if d_in == 0 || !header.ends_with("label") {
        return Err(Error::Config(format!("{}: unrecognized csv header", path.display())));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d_in + 1 {
            return Err(Error::Config(format!(
                "{}:{}: expected {} fields",
                path.display(),
                lineno + 2,
                d_in + 1
            )));
        }
        for f in &fields[..d_in] {
            inputs.push(f.parse::<f64>().map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 2))
            })?);
        }
        labels.push(fields[d_in].parse::<i32>().map_err(|e| {
            Error::Config(format!("{}:{}: {e}", path.display(), lineno + 2))
        })?);
    }
    let mut manifest = Manifest::new();
    manifest.push("kind", "csv");
    manifest.push("path", path.display());
    manifest.push("sha256", sha256_hex(text.as_bytes()));
    LabeledDataset::new(inputs, d_in, labels, split, manifest)
}

/// A batch schedule together with the index lists it refers to.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub schedule: BatchSchedule,
    /// `batches[segment.batch]` holds the example indices of that segment.
    pub batches: Vec<Vec<u32>>,
}

/// One integrator step per batch: shuffle the dataset, carve it into batches
/// of `batch_size` (last one ragged), and cycle epochs with a fresh shuffle
/// until `total_steps` segments exist. Segment k covers `[k dt, (k+1) dt]`.
pub fn batch_schedule(
    m: usize,
    batch_size: usize,
    dt: f64,
    total_steps: usize,
    seed: u64,
) -> Result<BatchPlan> {
    if batch_size == 0 || batch_size > m {
        return Err(Error::Config(format!("batch size {batch_size} out of range 1..={m}")));
    }
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("dt = {dt} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<u32> = (0..m as u32).collect();
    let mut batches: Vec<Vec<u32>> = Vec::new();
    let mut segments = Vec::with_capacity(total_steps);
    while segments.len() < total_steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            if segments.len() == total_steps {
                break;
            }
            let k = segments.len();
            segments.push(Segment {
                t_start: k as f64 * dt,
                t_end: (k + 1) as f64 * dt,
                batch: batches.len(),
            });
            batches.push(chunk.to_vec());
        }
    }
    Ok(BatchPlan { schedule: BatchSchedule { segments }, batches })
}
