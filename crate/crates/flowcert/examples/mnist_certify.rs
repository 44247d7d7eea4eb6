//! Desk-scale MNIST certificate: cross-entropy training of a 1000-wide
//! random-feature classifier on a 10000-image subset, batches of 500, one
//! step per batch. Needs the four decompressed IDX files; point MNIST_DIR at
//! them (default ./data).
//!
//! Run with: MNIST_DIR=... cargo run --release --example mnist_certify

use std::path::PathBuf;

use flowcert::experiment::{self, DatasetSpec, ExperimentConfig, HorizonSpec, SurrogateKind};

fn main() -> anyhow::Result<()> {
    let dir = std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"));
    let files = [
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    ];
    if let Some(missing) = files.iter().find(|f| !f.exists()) {
        eprintln!("missing {}; place the decompressed MNIST IDX files there or set MNIST_DIR", missing.display());
        return Ok(());
    }

    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetSpec::Idx {
        train_images: files[0].clone(),
        train_labels: files[1].clone(),
        test_images: files[2].clone(),
        test_labels: files[3].clone(),
    };
    cfg.surrogate = SurrogateKind::CrossEntropy;
    cfg.width = 1000;
    cfg.batch_size = Some(500);
    cfg.dt = 2e-3;
    cfg.horizons = HorizonSpec::Geometric { t_min: 0.06, t_max: 6.0, k: 25 };
    cfg.delta = 5e-3;
    // desk scale: the training set is subsampled to 10000 images; pass
    // full_scale = true (and more memory patience) for the whole 60000.

    let record = experiment::certify(&cfg)?;
    println!("m = {}, N = {}, K = {}", record.m, record.n_dim, record.k);
    println!("{:>8} {:>9} {:>9} {:>9} {:>9}", "T", "train", "sqrt", "kl", "test");
    for row in &record.rows {
        println!(
            "{:>8} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            row.horizon, row.train_error, row.mcallester, row.kl, row.test_error
        );
    }
    let best = record.best_kl_row().unwrap();
    println!("\nbest horizon T = {}: kl bound {:.4}, test error {:.4}", best.horizon, best.kl, best.test_error);
    Ok(())
}
