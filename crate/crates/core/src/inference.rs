//! Deterministic and Monte Carlo inference, and sample-count sweeps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::ChannelStats;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{ForwardMode, Network};
use crate::rules::StreamKey;
use crate::tensor::Tensor;
use crate::train::count_errors;

/// What the stochastic forwards average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Mean of the per-draw softmax probabilities.
    #[default]
    MeanSoftmax,
    /// Softmax of the mean logits.
    MeanLogits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InferenceMode {
    /// One forward with every mask replaced by its θ.
    Deterministic,
    /// Average over `samples` independent mask draws.
    Stochastic { samples: usize, seed: u64 },
}

impl InferenceMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            InferenceMode::Stochastic { samples: 0, .. } => Err(Error::Config(
                "stochastic inference needs at least one sample".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Class probabilities for the batch `x`.
///
/// Stochastic draws use `StreamKey::inference(seed, batch, d)` for
/// `d = 0..samples` and BN running statistics; the average is accumulated
/// in draw order.
pub fn predict_batch(
    net: &Network,
    x: &Tensor,
    mode: InferenceMode,
    reduction: Reduction,
    batch: u64,
) -> Result<Tensor> {
    mode.validate()?;
    match mode {
        InferenceMode::Deterministic => net.logits(x, ForwardMode::DetEval, &[])?.0.softmax_rows(),
        InferenceMode::Stochastic { samples, seed } => {
            let mut acc: Option<Tensor> = None;
            for d in 0..samples as u64 {
                let out = stochastic_forward(net, x, StreamKey::inference(seed, batch, d))?;
                let term = match reduction {
                    Reduction::MeanSoftmax => out.softmax_rows()?,
                    Reduction::MeanLogits => out,
                };
                match acc.as_mut() {
                    None => acc = Some(term),
                    Some(a) => a.add_assign(&term)?,
                }
            }
            let mean = acc.expect("samples >= 1").scale(1.0 / samples as f64);
            match reduction {
                Reduction::MeanSoftmax => Ok(mean),
                Reduction::MeanLogits => mean.softmax_rows(),
            }
        }
    }
}

pub fn predict(
    net: &Network,
    x: &Tensor,
    mode: InferenceMode,
    reduction: Reduction,
) -> Result<Tensor> {
    predict_batch(net, x, mode, reduction, 0)
}

/// Logits of one eval-mode forward under the masks keyed by `key`.
pub fn stochastic_forward(net: &Network, x: &Tensor, key: StreamKey) -> Result<Tensor> {
    let plan = net.sample_plan(x.shape(), key)?;
    Ok(net.logits(x, ForwardMode::StochEval, &plan)?.0)
}

fn chunks(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    let size = size.max(1);
    (0..n)
        .step_by(size)
        .map(move |s| (s..(s + size).min(n)).collect())
}

/// Error rate over `data`, evaluated in chunks of `chunk` examples; chunk
/// `b` is batch `b` of the inference streams.
pub fn evaluate(
    net: &Network,
    data: &Dataset,
    mode: InferenceMode,
    reduction: Reduction,
    chunk: usize,
) -> Result<f64> {
    let mut errors = 0;
    for (b, idx) in chunks(data.len(), chunk).enumerate() {
        let (x, y) = data.gather(&idx)?;
        let probs = predict_batch(net, &x, mode, reduction, b as u64)?;
        errors += count_errors(&probs, &y)?;
    }
    Ok(errors as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub samples: usize,
    pub mean_error: f64,
    /// Standard error of the mean over repetitions.
    pub std_error: f64,
    pub repetitions: usize,
}

/// Error rate of stochastic inference for every `K` in `1..=k_max`
/// (inner index `K - 1`) in each of `repetitions` independent sets of draws.
///
/// Repetition `r` uses draws `r·k_max .. (r+1)·k_max` of the inference
/// streams under `seed`, and its estimate for `K` averages the first `K`
/// of them. Repetition 0 therefore matches [`evaluate`] with
/// `Stochastic { samples: K, seed }` for every `K`.
pub fn sweep_error_table(
    net: &Network,
    data: &Dataset,
    k_max: usize,
    repetitions: usize,
    seed: u64,
    reduction: Reduction,
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut errors = vec![vec![0usize; k_max]; repetitions];
    for (b, idx) in chunks(data.len(), chunk).enumerate() {
        let (x, y) = data.gather(&idx)?;
        for (r, errs) in errors.iter_mut().enumerate() {
            let mut acc: Option<Tensor> = None;
            for (k, err) in errs.iter_mut().enumerate() {
                let draw = (r * k_max + k) as u64;
                let out = stochastic_forward(net, &x, StreamKey::inference(seed, b as u64, draw))?;
                let term = match reduction {
                    Reduction::MeanSoftmax => out.softmax_rows()?,
                    Reduction::MeanLogits => out,
                };
                match acc.as_mut() {
                    None => acc = Some(term),
                    Some(a) => a.add_assign(&term)?,
                }
                *err += count_errors(acc.as_ref().unwrap(), &y)?;
            }
        }
    }
    let n = data.len() as f64;
    Ok(errors
        .into_iter()
        .map(|e| e.into_iter().map(|c| c as f64 / n).collect())
        .collect())
}

/// Mean and standard error over repetitions of [`sweep_error_table`].
pub fn sample_sweep(
    net: &Network,
    data: &Dataset,
    k_max: usize,
    repetitions: usize,
    seed: u64,
    reduction: Reduction,
    chunk: usize,
) -> Result<Vec<SweepRow>> {
    if k_max == 0 || repetitions < 2 {
        return Err(Error::Config(
            "sweep needs k_max >= 1 and repetitions >= 2".into(),
        ));
    }
    let table = sweep_error_table(net, data, k_max, repetitions, seed, reduction, chunk)?;
    let reps = repetitions as f64;
    Ok((0..k_max)
        .map(|k| {
            let rates: Vec<f64> = table.iter().map(|e| e[k]).collect();
            let mean = rates.iter().sum::<f64>() / reps;
            let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (reps - 1.0);
            SweepRow {
                samples: k + 1,
                mean_error: mean,
                std_error: (var / reps).sqrt(),
                repetitions,
            }
        })
        .collect())
}

pub const SWEEP_CSV_HEADER: &str = "K,mean_error,std_error,repetitions";

pub fn write_sweep_csv(w: &mut impl Write, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.samples, r.mean_error, r.std_error, r.repetitions
        )?;
    }
    Ok(())
}

/// Per-channel moments of every BN input under `mode` (`DetEval`, or
/// `StochEval` with draw 0), computed within each chunk of `chunk` examples
/// and averaged over chunks weighted by size. With `chunk` equal to the
/// training batch size this is the quantity the running estimates track.
pub fn observed_bn_statistics(
    net: &Network,
    data: &Dataset,
    mode: ForwardMode,
    seed: u64,
    chunk: usize,
) -> Result<Vec<ChannelStats>> {
    let mut sums: Vec<ChannelStats> = Vec::new();
    let mut total = 0.0;
    for (b, idx) in chunks(data.len(), chunk).enumerate() {
        let (x, _) = data.gather(&idx)?;
        let plan = match mode {
            ForwardMode::DetEval => vec![],
            _ => net.sample_plan(x.shape(), StreamKey::inference(seed, b as u64, 0))?,
        };
        let (_, stats) = net.logits(&x, mode, &plan)?;
        let w = idx.len() as f64;
        if sums.is_empty() {
            sums = stats
                .iter()
                .map(|s| ChannelStats {
                    mean: vec![0.0; s.mean.len()],
                    var: vec![0.0; s.var.len()],
                })
                .collect();
        }
        for (acc, s) in sums.iter_mut().zip(&stats) {
            for c in 0..s.mean.len() {
                acc.mean[c] += w * s.mean[c];
                acc.var[c] += w * s.var[c];
            }
        }
        total += w;
    }
    for acc in &mut sums {
        acc.mean
            .iter_mut()
            .chain(acc.var.iter_mut())
            .for_each(|v| *v /= total);
    }
    Ok(sums)
}
