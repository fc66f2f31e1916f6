//! `swapout` experiment runner.

mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use swapout::experiment::{
    evaluate_both, run_experiment, run_sweep, write_sweep_file, ExperimentConfig,
};
use swapout::network::{load_checkpoint, Network, NetworkConfig, Variant};
use swapout::rules::RuleSpec;

#[derive(Parser)]
#[command(
    name = "swapout",
    version,
    about = "Stochastic residual-block rules: training, inference and oracle checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the configured one, then `runs/<hash>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Draws per stochastic prediction (largest K for `sweep`).
    #[arg(long)]
    samples: Option<usize>,
    /// Number of training examples to use.
    #[arg(long)]
    subset: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate both inference modes, sweep, write all artifacts.
    Train(RunArgs),
    /// Evaluate a trained checkpoint with both inference modes.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to load; defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the sample-count sweep of a trained checkpoint.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the parameter count of a CIFAR-style network.
    Params {
        /// Layer count, of the form 6n + 2.
        #[arg(long, default_value_t = 20)]
        depth: usize,
        /// Width multiplier k: group widths (16, 32, 64)·k.
        #[arg(long, default_value_t = 1)]
        width: usize,
        #[arg(long, value_enum, default_value_t = VariantArg::V2)]
        variant: VariantArg,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum VariantArg {
    V1,
    V2,
}

fn resolve(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)
        .with_context(|| format!("stage config: reading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(k) = args.samples {
        cfg.inference.samples = k;
    }
    if let Some(n) = args.subset {
        cfg.dataset.set_train_size(n);
    }
    cfg.validate().context("stage config")?;
    let out = match (&args.out, &cfg.output_dir) {
        (Some(o), _) | (None, Some(o)) => o.clone(),
        (None, None) => Path::new("runs").join(&cfg.hash()?[..12]),
    };
    Ok((cfg, out))
}

fn load_net(checkpoint: &Option<PathBuf>, out: &Path) -> Result<Network> {
    let path = checkpoint
        .clone()
        .unwrap_or_else(|| out.join("checkpoint.bin"));
    load_checkpoint(&path).with_context(|| format!("stage checkpoint: loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let (cfg, out) = resolve(&args)?;
            eprintln!("writing to {}", out.display());
            let summary = run_experiment(&cfg, &out, &mut |line| eprintln!("{line}"))?;
            println!(
                "det_error {}  stoch_error {} (K = {})  config_hash {}",
                summary.det_error,
                summary.stoch_error,
                cfg.inference.samples,
                summary.manifest.config_hash
            );
        }
        Command::Eval { run, checkpoint } => {
            let (cfg, out) = resolve(&run)?;
            let net = load_net(&checkpoint, &out)?;
            let (_, test) = cfg
                .dataset
                .load(net.config().num_classes)
                .context("stage dataset")?;
            let (det, stoch) = evaluate_both(&net, &test, &cfg).context("stage evaluate")?;
            println!("det_error {det}");
            println!("stoch_error {stoch} (K = {})", cfg.inference.samples);
        }
        Command::Sweep { run, checkpoint } => {
            let (mut cfg, out) = resolve(&run)?;
            if let Some(k) = run.samples {
                cfg.inference.sweep_k_max = k;
            }
            if cfg.inference.sweep_k_max == 0 {
                bail!("stage config: sweep_k_max is 0");
            }
            let net = load_net(&checkpoint, &out)?;
            let (_, test) = cfg
                .dataset
                .load(net.config().num_classes)
                .context("stage dataset")?;
            let rows = run_sweep(&net, &test, &cfg).context("stage sweep")?;
            std::fs::create_dir_all(&out).context("stage output")?;
            let path = out.join("sweep.csv");
            write_sweep_file(&path, &cfg.hash()?, cfg.seed, &rows).context("stage output")?;
            println!("wrote {}", path.display());
        }
        Command::Verify { seed } => {
            let results = verify::run_all(seed);
            let mut failed = 0;
            for r in &results {
                println!(
                    "{} {}: {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                bail!("stage verify: {failed} of {} checks failed", results.len());
            }
        }
        Command::Params {
            depth,
            width,
            variant,
            classes,
        } => {
            let variant = match variant {
                VariantArg::V1 => Variant::V1,
                VariantArg::V2 => Variant::V2,
            };
            let cfg = NetworkConfig::from_depth(depth, width, classes, RuleSpec::none())
                .context("stage config")?
                .with_variant(variant);
            let count = Network::new(cfg, 0)?.parameter_count();
            println!(
                "depth {depth} width x{width}: {count} parameters ({:.2}M)",
                count as f64 / 1e6
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
