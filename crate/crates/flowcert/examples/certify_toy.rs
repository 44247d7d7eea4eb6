//! End-to-end certificate run on the Gaussian-cluster toy task: train a
//! 1000-wide random-feature classifier with the linear surrogate and print
//! the evolution of both bounds against the held-out error.
//!
//! Run with: cargo run --release --example certify_toy

use flowcert::experiment::{self, ExperimentConfig, HorizonSpec, SurrogateKind};

fn main() -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.surrogate = SurrogateKind::Linear;
    cfg.width = 1000;
    cfg.toy_per_cluster = 1000; // 8000 points, 500 train / 7500 test
    cfg.toy_train_size = 500;
    cfg.dt = 1e-3;
    cfg.horizons = HorizonSpec::Geometric { t_min: 0.01, t_max: 3.0, k: 20 };
    cfg.delta = 5e-3;
    cfg.seed = 7;

    let record = experiment::certify(&cfg)?;
    println!("m = {}, K = {}, delta = {}, N = {}", record.m, record.k, record.delta, record.n_dim);
    println!("{:>8} {:>9} {:>10} {:>9} {:>9} {:>9}", "T", "train", "complexity", "sqrt", "kl", "test");
    for row in &record.rows {
        println!(
            "{:>8} {:>9.4} {:>10.2} {:>9.4} {:>9.4} {:>9.4}",
            row.horizon,
            row.train_error,
            row.log_density_ratio + row.laplacian_integral,
            row.mcallester,
            row.kl,
            row.test_error
        );
    }
    let best = record.best_kl_row().expect("intact rows");
    println!(
        "\nbest horizon T = {}: kl bound {:.4} (held-out error {:.4})",
        best.horizon, best.kl, best.test_error
    );
    println!("the flow stops mattering once the complexity term outgrows the loss improvement");
    Ok(())
}
