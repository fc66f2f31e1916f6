//! Experiment configuration and the train → evaluate → sweep pipeline.
//!
//! A run writes into its output directory:
//!
//! * `metrics.csv`: `# config_hash=<hex> seed=<n>`, then
//!   `epoch,lr,train_loss,train_error,det_error,stoch_error` with the
//!   evaluation columns filled on evaluated epochs (always the last one);
//! * `sweep.csv`: the same comment line, then `K,mean_error,std_error,repetitions`;
//! * `checkpoint.bin`: the trained network;
//! * `config.toml`: the resolved configuration the run used;
//! * `manifest.json`: config hash, seed, wall time and file names.
//!
//! Only the manifest records wall time, so two runs of one configuration
//! produce byte-identical CSV files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_cifar_binary, synth_dataset, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::inference::{
    evaluate, sample_sweep, write_sweep_csv, InferenceMode, Reduction, SweepRow,
};
use crate::network::{save_checkpoint, GroupConfig, Network, NetworkConfig, Variant, BASE_WIDTHS};
use crate::rules::{Granularity, MaskSharing, RuleKind, RuleSpec, Schedule};
use crate::train::{
    train_epoch, AugmentConfig, EpochMetrics, LrSchedule, OptimizerState, TrainConfig,
};

fn default_depth() -> usize {
    20
}
fn one() -> usize {
    1
}
fn ten() -> usize {
    10
}
fn base_widths() -> [usize; 3] {
    BASE_WIDTHS
}
fn bn_eps() -> f64 {
    1e-5
}
fn bn_momentum() -> f64 {
    0.9
}

/// Network shape and stochastic rule as written in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default)]
    pub variant: Variant,
    /// `6n + 2`; `n` blocks in each of the three groups.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "one")]
    pub width_multiplier: usize,
    #[serde(default = "base_widths")]
    pub base_widths: [usize; 3],
    #[serde(default = "ten")]
    pub num_classes: usize,
    pub rule: RuleKind,
    /// Schedule for every mask stream of the rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Schedule>,
    /// Swapout only: schedule of the mask on the shortcut.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_skip: Option<Schedule>,
    /// Swapout only: schedule of the mask on the residual branch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_branch: Option<Schedule>,
    #[serde(default)]
    pub granularity: Option<Granularity>,
    #[serde(default)]
    pub mask_sharing: MaskSharing,
    #[serde(default = "bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "bn_momentum")]
    pub bn_momentum: f64,
}

impl NetworkSection {
    pub fn rule_spec(&self) -> Result<RuleSpec> {
        let schedules = match (self.rule, self.theta, self.theta_skip, self.theta_branch) {
            (RuleKind::None, None, None, None) => vec![],
            (RuleKind::None, ..) => return Err(Error::Config("rule none takes no theta".into())),
            (_, Some(t), None, None) => vec![t],
            (RuleKind::SwapoutPair | RuleKind::SwapoutGeneral, None, Some(s), Some(b)) => {
                vec![s, b]
            }
            _ => {
                return Err(Error::Config(
                    "give either theta, or theta_skip and theta_branch (swapout only)".into(),
                ))
            }
        };
        let granularity = self
            .granularity
            .unwrap_or(if self.rule == RuleKind::LayerDropout {
                Granularity::PerBlock
            } else {
                Granularity::PerUnit
            });
        Ok(RuleSpec {
            kind: self.rule,
            schedules,
            granularity,
        })
    }

    pub fn to_network_config(&self) -> Result<NetworkConfig> {
        let mut cfg = NetworkConfig::from_depth(
            self.depth,
            self.width_multiplier,
            self.num_classes,
            self.rule_spec()?,
        )?;
        cfg.variant = self.variant;
        cfg.groups = cfg
            .groups
            .iter()
            .zip(self.base_widths)
            .map(|(g, w)| GroupConfig {
                blocks: g.blocks,
                width: w * self.width_multiplier,
            })
            .collect();
        cfg.mask_sharing = self.mask_sharing;
        cfg.bn_eps = self.bn_eps;
        cfg.bn_momentum = self.bn_momentum;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn batch_size() -> usize {
    128
}
fn momentum() -> f64 {
    0.9
}
fn weight_decay() -> f64 {
    1e-4
}
fn initial_lr() -> f64 {
    0.1
}
fn yes() -> bool {
    true
}
fn pad() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default = "batch_size")]
    pub batch_size: usize,
    #[serde(default = "momentum")]
    pub momentum: f64,
    #[serde(default = "weight_decay")]
    pub weight_decay: f64,
    /// Initial rate of the scaled schedule (drops ×10 at 75% and 87.5%).
    #[serde(default = "initial_lr")]
    pub lr: f64,
    /// Explicit `[epoch, lr]` breakpoints; overrides `lr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_schedule: Option<Vec<(usize, f64)>>,
    #[serde(default = "yes")]
    pub crop: bool,
    #[serde(default = "yes")]
    pub flip: bool,
    #[serde(default = "pad")]
    pub pad: usize,
    /// Evaluate every this many epochs besides the last; 0 means last only.
    #[serde(default)]
    pub eval_every: usize,
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> Result<TrainConfig> {
        let lr_schedule = match &self.lr_schedule {
            Some(b) => LrSchedule::new(b.clone())?,
            None => LrSchedule::scaled(self.epochs, self.lr),
        };
        let cfg = TrainConfig {
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            lr_schedule,
            seed,
            augment: AugmentConfig {
                crop: self.crop,
                flip: self.flip,
                pad: self.pad,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn samples() -> usize {
    30
}
fn sweep_reps() -> usize {
    10
}
fn chunk() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    /// Draws per stochastic prediction.
    #[serde(default = "samples")]
    pub samples: usize,
    #[serde(default)]
    pub reduction: Reduction,
    /// Largest K of the sample sweep; 0 skips the sweep.
    #[serde(default = "samples")]
    pub sweep_k_max: usize,
    #[serde(default = "sweep_reps")]
    pub sweep_repetitions: usize,
    /// Sweep over the first this many test examples; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_subset: Option<usize>,
    /// Examples per evaluation batch.
    #[serde(default = "chunk")]
    pub chunk: usize,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            samples: samples(),
            reduction: Reduction::MeanSoftmax,
            sweep_k_max: samples(),
            sweep_repetitions: sweep_reps(),
            sweep_subset: None,
            chunk: chunk(),
        }
    }
}

fn synth_size() -> usize {
    16
}
fn synth_noise() -> f64 {
    2.0
}
fn synth_jitter() -> f64 {
    0.35
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        train: usize,
        test: usize,
        #[serde(default = "synth_size")]
        image_size: usize,
        #[serde(default = "synth_noise")]
        noise: f64,
        #[serde(default = "synth_jitter")]
        orientation_jitter: f64,
        /// Seed of the generator, independent of the training seed.
        #[serde(default)]
        data_seed: u64,
    },
    /// CIFAR-10 binary batches. Without `test_path`, the test split is the
    /// `test` records after the first `train` of `path`.
    CifarBinary {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_path: Option<PathBuf>,
        train: usize,
        test: usize,
    },
}

impl DatasetSpec {
    pub fn set_train_size(&mut self, n: usize) {
        match self {
            DatasetSpec::Synthetic { train, .. } | DatasetSpec::CifarBinary { train, .. } => {
                *train = n
            }
        }
    }

    /// `(train, test)` splits.
    pub fn load(&self, num_classes: usize) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Synthetic {
                train,
                test,
                image_size,
                noise,
                orientation_jitter,
                data_seed,
            } => {
                let cfg = SynthConfig {
                    count: train + test,
                    num_classes,
                    image_size: *image_size,
                    noise: *noise,
                    orientation_jitter: *orientation_jitter,
                };
                let all = synth_dataset(&cfg, *data_seed)?;
                Ok((all.slice(0, *train)?, all.slice(*train, train + test)?))
            }
            DatasetSpec::CifarBinary {
                path,
                test_path: Some(test_path),
                train,
                test,
            } => Ok((
                load_cifar_binary(path, *train, num_classes)?,
                load_cifar_binary(test_path, *test, num_classes)?,
            )),
            DatasetSpec::CifarBinary {
                path,
                test_path: None,
                train,
                test,
            } => {
                let all = load_cifar_binary(path, train + test, num_classes)?;
                Ok((all.slice(0, *train)?, all.slice(*train, train + test)?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub network: NetworkSection,
    pub train: TrainSection,
    #[serde(default)]
    pub inference: InferenceSection,
    pub dataset: DatasetSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Checks every sub-configuration.
    pub fn validate(&self) -> Result<()> {
        self.network.to_network_config()?;
        self.train.to_train_config(self.seed)?;
        if self.inference.samples == 0 || self.inference.chunk == 0 {
            return Err(Error::Config(
                "inference samples and chunk must be positive".into(),
            ));
        }
        if self.inference.sweep_k_max > 0 && self.inference.sweep_repetitions < 2 {
            return Err(Error::Config("sweep_repetitions must be at least 2".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, hex encoded. The output directory
    /// does not take part.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let digest = Sha256::digest(canonical.to_toml()?.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            write!(hex, "{b:02x}").unwrap();
        }
        Ok(hex)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_secs: f64,
    pub parameters: usize,
    pub det_error: f64,
    pub stoch_error: f64,
    pub files: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub network: Network,
    pub epochs: Vec<EpochMetrics>,
    pub det_error: f64,
    pub stoch_error: f64,
    pub sweep: Vec<SweepRow>,
    pub manifest: Manifest,
}

pub const METRICS_CSV_HEADER: &str = "epoch,lr,train_loss,train_error,det_error,stoch_error";

fn provenance_line(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} seed={seed}")
}

/// Deterministic and stochastic test error of `net` under `cfg`.
pub fn evaluate_both(net: &Network, test: &Dataset, cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    let inf = &cfg.inference;
    let det = evaluate(
        net,
        test,
        InferenceMode::Deterministic,
        inf.reduction,
        inf.chunk,
    )?;
    let stoch_mode = InferenceMode::Stochastic {
        samples: inf.samples,
        seed: cfg.seed,
    };
    let stoch = evaluate(net, test, stoch_mode, inf.reduction, inf.chunk)?;
    Ok((det, stoch))
}

/// The sample sweep of `cfg` over the test split.
pub fn run_sweep(net: &Network, test: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let inf = &cfg.inference;
    let subset = match inf.sweep_subset {
        Some(n) if n < test.len() => test.slice(0, n)?,
        _ => test.clone(),
    };
    sample_sweep(
        net,
        &subset,
        inf.sweep_k_max,
        inf.sweep_repetitions,
        cfg.seed,
        inf.reduction,
        inf.chunk,
    )
}

pub fn write_sweep_file(path: &Path, hash: &str, seed: u64, rows: &[SweepRow]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{}", provenance_line(hash, seed))?;
    write_sweep_csv(&mut buf, rows)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Trains, evaluates and sweeps per `cfg`, writing every artifact to `out`.
/// `progress` receives one human-readable line per epoch and stage.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<RunSummary> {
    let start = Instant::now();
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let hash = cfg.hash().map_err(|e| e.in_stage("config"))?;
    let net_cfg = cfg
        .network
        .to_network_config()
        .map_err(|e| e.in_stage("config"))?;
    let train_cfg = cfg
        .train
        .to_train_config(cfg.seed)
        .map_err(|e| e.in_stage("config"))?;
    fs::create_dir_all(out).map_err(|e| Error::from(e).in_stage("output"))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)
        .map_err(|e| Error::from(e).in_stage("output"))?;

    let (train, test) = cfg
        .dataset
        .load(net_cfg.num_classes)
        .map_err(|e| e.in_stage("dataset"))?;
    progress(&format!(
        "dataset: {} train, {} test examples",
        train.len(),
        test.len()
    ));

    let mut net = Network::new(net_cfg, cfg.seed).map_err(|e| e.in_stage("train"))?;
    let mut opt = OptimizerState::new(net.params());
    let mut metrics = String::new();
    writeln!(metrics, "{}", provenance_line(&hash, cfg.seed)).unwrap();
    writeln!(metrics, "{METRICS_CSV_HEADER}").unwrap();
    let mut epochs = Vec::with_capacity(train_cfg.epochs);
    let (mut det_error, mut stoch_error) = (f64::NAN, f64::NAN);
    for epoch in 0..train_cfg.epochs {
        let m = train_epoch(&mut net, &mut opt, &train, &train_cfg, epoch)
            .map_err(|e| e.in_stage("train"))?;
        let last = epoch + 1 == train_cfg.epochs;
        let eval = last || (cfg.train.eval_every > 0 && (epoch + 1) % cfg.train.eval_every == 0);
        let (det, stoch) = if eval {
            let (d, s) = evaluate_both(&net, &test, cfg).map_err(|e| e.in_stage("evaluate"))?;
            det_error = d;
            stoch_error = s;
            (d.to_string(), s.to_string())
        } else {
            (String::new(), String::new())
        };
        writeln!(
            metrics,
            "{},{},{},{},{det},{stoch}",
            m.epoch, m.lr, m.loss, m.error
        )
        .unwrap();
        progress(&format!(
            "epoch {:>3}  lr {:<6}  loss {:.4}  train error {:.4}{}",
            m.epoch,
            m.lr,
            m.loss,
            m.error,
            if eval {
                format!("  det {det}  stoch {stoch}")
            } else {
                String::new()
            }
        ));
        epochs.push(m);
    }
    if train_cfg.epochs == 0 {
        let (d, s) = evaluate_both(&net, &test, cfg).map_err(|e| e.in_stage("evaluate"))?;
        det_error = d;
        stoch_error = s;
    }
    fs::write(out.join("metrics.csv"), &metrics).map_err(|e| Error::from(e).in_stage("output"))?;
    save_checkpoint(&net, &out.join("checkpoint.bin")).map_err(|e| e.in_stage("checkpoint"))?;

    let mut files = vec![
        "config.toml".to_string(),
        "metrics.csv".to_string(),
        "checkpoint.bin".to_string(),
    ];
    let sweep = if cfg.inference.sweep_k_max > 0 {
        let rows = run_sweep(&net, &test, cfg).map_err(|e| e.in_stage("sweep"))?;
        write_sweep_file(&out.join("sweep.csv"), &hash, cfg.seed, &rows)
            .map_err(|e| e.in_stage("output"))?;
        files.push("sweep.csv".to_string());
        progress(&format!(
            "sweep: K = 1..{} written",
            cfg.inference.sweep_k_max
        ));
        rows
    } else {
        vec![]
    };
    files.push("manifest.json".to_string());
    let manifest = Manifest {
        config_hash: hash,
        seed: cfg.seed,
        wall_time_secs: start.elapsed().as_secs_f64(),
        parameters: net.parameter_count(),
        det_error,
        stoch_error,
        files,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(e.to_string()).in_stage("output"))?;
    fs::write(out.join("manifest.json"), json).map_err(|e| Error::from(e).in_stage("output"))?;
    Ok(RunSummary {
        network: net,
        epochs,
        det_error,
        stoch_error,
        sweep,
        manifest,
    })
}
