use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use flowcert::data::{self, ToyConfig};
use flowcert::experiment::{
    self, DiscretizationRecord, ExperimentConfig, RunRecord, ScalingRecord,
};

/// Generalization certificates for linear classifiers trained by discretized
/// gradient flow.
#[derive(Parser)]
#[command(name = "flowcert", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and evaluate both bounds at every declared horizon.
    Certify(RunArgs),
    /// Sweep model widths; report the best certificate per width.
    ScalingStudy {
        #[command(flatten)]
        args: RunArgs,
        /// Comma-separated widths, e.g. 100,316,1000.
        #[arg(long, value_delimiter = ',', required = true)]
        widths: Vec<usize>,
    },
    /// Rerun one training under a coarse and a fine step size and compare
    /// the bounds at matched times.
    DiscretizationStudy {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long)]
        dt_coarse: f64,
        #[arg(long)]
        dt_fine: f64,
    },
    /// Certificate with a data-dependent prior learned on a holdout slice of
    /// the training set.
    DataDependent {
        #[command(flatten)]
        args: RunArgs,
        /// Time spent flowing on the holdout slice before training starts.
        #[arg(long)]
        t0: f64,
        /// Fraction of the training set reserved for the prior phase.
        #[arg(long, default_value_t = 0.2)]
        holdout_fraction: f64,
    },
    /// Generate the Gaussian-cluster toy dataset as CSV files.
    GenToyData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "toy-data")]
        out: PathBuf,
        #[arg(long)]
        per_cluster: Option<usize>,
        #[arg(long)]
        train_size: Option<usize>,
    },
}

/// Flags mirror the config-file keys; anything set here overrides the file.
#[derive(Args)]
struct RunArgs {
    /// Config file of line-oriented key=value pairs.
    #[arg(long)]
    config: Option<PathBuf>,
    /// toy | idx:tr_img,tr_lbl,te_img,te_lbl | csv:train,test
    #[arg(long)]
    dataset: Option<String>,
    /// linear | quadratic | cross-entropy
    #[arg(long)]
    surrogate: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    /// auto | <value>
    #[arg(long)]
    prior_variance: Option<String>,
    /// euler | rk4
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    dt: Option<f64>,
    /// geometric:t_min,t_max,k | explicit:t1,t2,...
    #[arg(long)]
    horizons: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// 0 trains full-batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// 0 evaluates on the full held-out set.
    #[arg(long)]
    test_subset: Option<usize>,
    /// Lift the desk-scale cap on training examples.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    corrected_epsilon: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    toy_per_cluster: Option<usize>,
    #[arg(long)]
    toy_train_size: Option<usize>,
}

impl RunArgs {
    fn build_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::from_kv_text(&text)?
            }
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($key:literal, $opt:expr) => {
                if let Some(v) = &$opt {
                    cfg.apply($key, &v.to_string())?;
                }
            };
        }
        set!("dataset", self.dataset);
        set!("surrogate", self.surrogate);
        set!("alpha", self.alpha);
        set!("beta", self.beta);
        set!("width", self.width);
        set!("prior_variance", self.prior_variance);
        set!("scheme", self.scheme);
        set!("dt", self.dt);
        set!("horizons", self.horizons);
        set!("delta", self.delta);
        set!("seed", self.seed);
        set!("batch_size", self.batch_size);
        set!("test_subset", self.test_subset);
        set!("corrected_epsilon", self.corrected_epsilon);
        set!("toy_per_cluster", self.toy_per_cluster);
        set!("toy_train_size", self.toy_train_size);
        if self.full_scale {
            cfg.apply("full_scale", "true")?;
        }
        if let Some(dir) = &self.out_dir {
            cfg.apply("out_dir", &dir.display().to_string())?;
        }
        Ok(cfg)
    }
}

fn write_outputs(cfg: &ExperimentConfig, name: &str, csv: &str, manifest: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let csv_path = cfg.out_dir.join(format!("{name}.csv"));
    fs::write(&csv_path, csv)?;
    fs::write(cfg.out_dir.join(format!("{name}_manifest.txt")), manifest)?;
    Ok(csv_path)
}

fn report_run(record: &RunRecord, csv_path: &std::path::Path) -> ExitCode {
    match record.best_kl_row() {
        Some(best) => println!(
            "best horizon T={}: kl bound {:.4}, sqrt bound {:.4}, train error {:.4}, test error {:.4}",
            best.horizon, best.kl, best.mcallester, best.train_error, best.test_error
        ),
        None => println!("no intact horizon rows"),
    }
    println!("wrote {}", csv_path.display());
    if record.invalid {
        eprintln!("certificate INVALID: the flow diverged before the last horizon");
        return ExitCode::from(2);
    }
    ExitCode::SUCCESS
}

fn run() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Certify(args) => {
            let cfg = args.build_config()?;
            let record = experiment::certify(&cfg)?;
            let path = write_outputs(&cfg, "certify", &record.to_csv(), &record.manifest.to_text())?;
            Ok(report_run(&record, &path))
        }
        Command::ScalingStudy { args, widths } => {
            let cfg = args.build_config()?;
            let record: ScalingRecord = experiment::scaling_study(&cfg, &widths)?;
            let path = write_outputs(&cfg, "scaling", &record.to_csv(), &record.manifest.to_text())?;
            for row in &record.rows {
                println!(
                    "width {:>6} (N = {:>7}): best T = {}, kl bound {:.4}, test error {:.4}",
                    row.width, row.n_dim, row.best_horizon, row.kl_bound, row.test_error
                );
            }
            println!("wrote {}", path.display());
            let invalid = record.rows.iter().any(|r| r.invalid);
            if invalid {
                eprintln!("certificate INVALID: at least one width diverged");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::DiscretizationStudy { args, dt_coarse, dt_fine } => {
            let cfg = args.build_config()?;
            let record: DiscretizationRecord =
                experiment::discretization_study(&cfg, dt_coarse, dt_fine)?;
            let path = write_outputs(
                &cfg,
                "discretization",
                &record.to_csv(),
                &record.manifest.to_text(),
            )?;
            println!("max |B1-B2|/B2 = {:.6}", record.max_abs_rel_err());
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::DataDependent { args, t0, holdout_fraction } => {
            let cfg = args.build_config()?;
            let record = experiment::data_dependent_run(&cfg, t0, holdout_fraction)?;
            let path =
                write_outputs(&cfg, "data_dependent", &record.to_csv(), &record.manifest.to_text())?;
            Ok(report_run(&record, &path))
        }
        Command::GenToyData { seed, out, per_cluster, train_size } => {
            let mut toy = ToyConfig::new(seed);
            if let Some(p) = per_cluster {
                toy.per_cluster = p;
            }
            if let Some(t) = train_size {
                toy.train_size = t;
            }
            let (train, test) = data::gaussian_clusters(&toy)?;
            fs::create_dir_all(&out)?;
            data::write_dataset_csv(&train, &out.join("train.csv"))?;
            data::write_dataset_csv(&test, &out.join("test.csv"))?;
            train.manifest.write_to(&out.join("manifest.txt"))?;
            println!(
                "wrote {} train and {} test examples under {}",
                train.len(),
                test.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
