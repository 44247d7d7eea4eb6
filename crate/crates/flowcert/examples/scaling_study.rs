//! Width scaling: as the random-feature model grows, the best stopping time
//! shrinks roughly like 1/N, keeping the certificates non-vacuous even far
//! into over-parameterization.
//!
//! Run with: cargo run --release --example scaling_study

use flowcert::experiment::{self, ExperimentConfig, HorizonSpec, SurrogateKind};

fn main() -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.surrogate = SurrogateKind::CrossEntropy;
    cfg.width = 1000; // base width: grids and step sizes scale relative to it
    cfg.toy_per_cluster = 500;
    cfg.dt = 0.002;
    cfg.horizons = HorizonSpec::Geometric { t_min: 0.01, t_max: 10.0, k: 15 };
    cfg.seed = 3;

    let widths = [100usize, 316, 1000];
    let record = experiment::scaling_study(&cfg, &widths)?;
    println!("{:>7} {:>8} {:>12} {:>9} {:>9}", "width", "N", "best T", "kl bound", "test err");
    for row in &record.rows {
        println!(
            "{:>7} {:>8} {:>12.5} {:>9.4} {:>9.4}",
            row.width, row.n_dim, row.best_horizon, row.kl_bound, row.test_error
        );
        assert!(!row.invalid);
    }
    println!("\nbest T times N: {:?}", record
        .rows
        .iter()
        .map(|r| (r.best_horizon * r.n_dim as f64 * 10.0).round() / 10.0)
        .collect::<Vec<_>>());
    println!("(roughly constant, i.e. the optimal horizon scales like 1/N)");
    Ok(())
}
