use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use earlycrop_cli::harness;
use earlycrop_cli::ExperimentConfig;
use earlycrop_core::error::CoreError;

#[derive(Parser)]
#[command(
    name = "earlycrop",
    about = "Gradient-flow-preserving pruning experiments: train, sweep, prune-point studies, reports, diagnostics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the run-producing subcommands; every flag overrides the
/// matching config-file key.
#[derive(Args, Clone)]
struct RunFlags {
    /// Flat key=value config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Lifecycle mode: crop-u|crop-s|cropit-u|cropit-s|earlycrop-u|earlycrop-s.
    #[arg(long)]
    mode: Option<String>,
    /// Scoring criterion: crop|grasp|snip|magnitude|random.
    #[arg(long)]
    criterion: Option<String>,
    /// Target ratio (weights for -u modes, nodes for -s modes).
    #[arg(long)]
    rho: Option<f64>,
    /// Pruning iterations (> 1 turns any mode iterative).
    #[arg(long)]
    it: Option<usize>,
    /// Detector threshold override (default 1 - rho).
    #[arg(long)]
    th: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// sgd|adam
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory root.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Parallel worker slots for sweeps.
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
    /// Detector normalization: delta1|theta0.
    #[arg(long = "detector-norm")]
    detector_norm: Option<String>,
    /// Dataset name: two_moons|spirals|sine_regression|idx|csv.
    #[arg(long)]
    dataset: Option<String>,
    /// Synthetic dataset size.
    #[arg(long = "dataset-n")]
    dataset_n: Option<usize>,
    /// Synthetic dataset noise.
    #[arg(long = "dataset-noise")]
    dataset_noise: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Comma list of hidden widths, e.g. 64,64.
    #[arg(long)]
    hidden: Option<String>,
}

impl RunFlags {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut o = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        put("mode", self.mode.clone());
        put("criterion", self.criterion.clone());
        put("rho", self.rho.map(|v| v.to_string()));
        put("it", self.it.map(|v| v.to_string()));
        put("th", self.th.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("optimizer", self.optimizer.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        put("jobs", self.jobs.map(|v| v.to_string()));
        put("detector.normalization", self.detector_norm.clone());
        put("dataset", self.dataset.clone());
        put("dataset.n", self.dataset_n.map(|v| v.to_string()));
        put("dataset.noise", self.dataset_noise.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("model.hidden", self.hidden.clone());
        o
    }

    fn resolve(&self) -> Result<ExperimentConfig, CoreError> {
        ExperimentConfig::resolve(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one train/prune/train pipeline and record metrics.
    Train(RunFlags),
    /// Cross-product of (mode, rho, seed) runs with median summaries.
    Sweep {
        #[command(flatten)]
        flags: RunFlags,
        /// Comma list of pruning ratios.
        #[arg(long = "rho-list")]
        rho_list: Option<String>,
        /// Comma list of seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Comma list of modes (defaults to --mode).
        #[arg(long)]
        modes: Option<String>,
    },
    /// Prune at forced epochs with a fixed post-prune budget.
    Prunepoint {
        #[command(flatten)]
        flags: RunFlags,
        /// Comma list of prune epochs.
        #[arg(long = "prune-epochs")]
        prune_epochs: Option<String>,
        /// Sparse training epochs after the prune point.
        #[arg(long = "post-epochs")]
        post_epochs: Option<usize>,
        /// Comma list of seeds.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Aggregate run.json files into a comparison table.
    Report {
        /// Directory containing runs (searched recursively).
        results_dir: PathBuf,
    },
    /// Run gradient-flow/NTK/Taylor diagnostics on a checkpoint.
    Diagnose {
        /// Checkpoint produced by a training run.
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Config(_)
        | CoreError::InfeasibleRatio { .. }
        | CoreError::Schedule(_) => 2,
        CoreError::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn run() -> Result<u8, CoreError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(flags) => {
            let config = flags.resolve()?;
            let out = harness::cmd_train(&config)?;
            let r = &out.record;
            println!(
                "run {} | {} {} rho={} seed={} | {}={:.4} weight_sparsity={:.4}{} trigger={} time={:.2}s",
                out.dir.display(),
                config.pipeline.mode,
                config.pipeline.criterion,
                config.pipeline.rho,
                config.pipeline.seed,
                r.metric_kind.as_str(),
                r.test_metric,
                r.weight_sparsity,
                r.node_sparsity
                    .map(|n| format!(" node_sparsity={n:.4}"))
                    .unwrap_or_default(),
                r.trigger_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
                r.total_time_s,
            );
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(d) = &r.diverged {
                eprintln!("numeric failure: {d} (partial record flushed)");
                return Ok(3);
            }
            Ok(0)
        }
        Command::Sweep { flags, rho_list, seeds, modes } => {
            let mut overrides = flags.overrides();
            if let Some(v) = rho_list {
                overrides.push(("rho_list".into(), v));
            }
            if let Some(v) = seeds {
                overrides.push(("seeds".into(), v));
            }
            if let Some(v) = modes {
                overrides.push(("modes".into(), v));
            }
            let config = ExperimentConfig::resolve(flags.config.as_deref(), &overrides)?;
            let out = harness::cmd_sweep(&config)?;
            println!("sweep {} | {} runs", out.dir.display(), out.rows);
            Ok(0)
        }
        Command::Prunepoint { flags, prune_epochs, post_epochs, seeds } => {
            let mut overrides = flags.overrides();
            if let Some(v) = prune_epochs {
                overrides.push(("prune_epochs".into(), v));
            }
            if let Some(v) = post_epochs {
                overrides.push(("post_epochs".into(), v.to_string()));
            }
            if let Some(v) = seeds {
                overrides.push(("seeds".into(), v));
            }
            let config = ExperimentConfig::resolve(flags.config.as_deref(), &overrides)?;
            let out = harness::cmd_prunepoint(&config)?;
            println!(
                "prunepoint {} | spearman(-score, metric) = {:.4}",
                out.dir.display(),
                out.spearman_neg_score_vs_metric
            );
            Ok(0)
        }
        Command::Report { results_dir } => {
            let out = harness::cmd_report(&results_dir)?;
            print!("{}", out.table);
            println!("summary written to {}", out.summary_path.display());
            Ok(0)
        }
        Command::Diagnose { checkpoint, flags } => {
            let config = flags.resolve()?;
            let out = harness::cmd_diagnose(&checkpoint, &config)?;
            let r = &out.report;
            let rel = (r.gf_direct - r.gf_via_ntk).abs()
                / r.gf_direct.abs().max(r.gf_via_ntk.abs()).max(1e-300);
            println!(
                "diagnose {} | gf_direct={:.6e} gf_via_ntk={:.6e} rel_diff={:.2e} probe={}",
                out.dir.display(),
                r.gf_direct,
                r.gf_via_ntk,
                rel,
                r.probe_samples
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
