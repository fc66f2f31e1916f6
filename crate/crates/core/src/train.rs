//! SGD with momentum and weight decay, learning-rate schedules, the
//! pad-and-crop augmentation and the mini-batch training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, ParamId, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{ForwardMode, Network, Param};
use crate::rules::StreamKey;
use crate::tensor::Tensor;

/// Piecewise-constant learning rate: `(epoch, lr)` breakpoints, each rate
/// holding from its epoch until the next breakpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LrSchedule {
    pub breakpoints: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(breakpoints: Vec<(usize, f64)>) -> Result<Self> {
        let s = Self { breakpoints };
        s.validate()?;
        Ok(s)
    }

    /// 0.1, divided by 10 at epochs 196 and 224 (256 epochs in total).
    pub fn paper() -> Self {
        Self {
            breakpoints: vec![(0, 0.1), (196, 0.01), (224, 0.001)],
        }
    }

    /// The paper's shape scaled to `epochs`: drops at 75% and 87.5%.
    pub fn scaled(epochs: usize, initial: f64) -> Self {
        let at = |f: f64| (f * epochs as f64).round() as usize;
        let mut breakpoints = vec![(0, initial)];
        for (e, lr) in [(at(0.75), initial / 10.0), (at(0.875), initial / 100.0)] {
            if e > breakpoints.last().unwrap().0 {
                breakpoints.push((e, lr));
            }
        }
        Self { breakpoints }
    }

    pub fn validate(&self) -> Result<()> {
        match self.breakpoints.first() {
            Some((0, _)) => {}
            _ => {
                return Err(Error::Config(
                    "learning-rate schedule must start at epoch 0".into(),
                ))
            }
        }
        if self.breakpoints.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config(
                "learning-rate breakpoints must be strictly increasing".into(),
            ));
        }
        if self.breakpoints.iter().any(|&(_, lr)| !(lr >= 0.0)) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.breakpoints
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map_or(0.0, |&(_, lr)| lr)
    }
}

fn default_pad() -> usize {
    4
}

/// Zero-pad-and-crop translation (one offset per mini-batch) and
/// per-example horizontal flips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop: bool,
    pub flip: bool,
    #[serde(default = "default_pad")]
    pub pad: usize,
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            crop: false,
            flip: false,
            pad: 4,
        }
    }

    pub fn standard() -> Self {
        Self {
            crop: true,
            flip: true,
            pad: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    /// Batch 128, momentum 0.9, weight decay 1e-4 and the scaled schedule.
    pub fn desk_scale(epochs: usize, seed: u64) -> Self {
        Self {
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs,
            lr_schedule: LrSchedule::scaled(epochs, 0.1),
            seed,
            augment: AugmentConfig::standard(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "momentum must be in [0, 1) and weight_decay >= 0".into(),
            ));
        }
        self.lr_schedule.validate()
    }
}

/// Velocity per parameter, indexed like the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[Param]) -> Self {
        Self {
            velocity: params
                .iter()
                .map(|p| Tensor::zeros_like(&p.value))
                .collect(),
        }
    }
}

/// `v ← m·v + g + wd·p` (decay only where `Param::decay`), `p ← p − lr·v`.
/// Parameters without a gradient see `g = 0`.
pub fn sgd_step(
    params: &mut [Param],
    grads: &GradientMap,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::Config(
            "optimizer state does not match parameters".into(),
        ));
    }
    for (i, (p, v)) in params.iter_mut().zip(&mut state.velocity).enumerate() {
        let wd = if p.decay { weight_decay } else { 0.0 };
        let g = grads.get(ParamId(i));
        if let Some(g) = g {
            p.value.expect_same_shape(g, "sgd_step")?;
        }
        let vd = v.data_mut();
        let pd = p.value.data_mut();
        for j in 0..pd.len() {
            let gj = g.map_or(0.0, |g| g.data()[j]);
            vd[j] = momentum * vd[j] + gj + wd * pd[j];
            pd[j] -= lr * vd[j];
        }
    }
    Ok(())
}

/// Crops the zero-padded batch at offset `(dy, dx)` in `0..=2·pad`.
pub fn pad_crop(batch: &Tensor, pad: usize, dy: usize, dx: usize) -> Result<Tensor> {
    let (n, c, h, w) = batch.dims4()?;
    if dy > 2 * pad || dx > 2 * pad {
        return Err(Error::Config(format!(
            "crop offset ({dy}, {dx}) outside padding {pad}"
        )));
    }
    let mut out = Tensor::zeros(batch.shape());
    let src = batch.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..h {
            // row y of the crop is row y + dy - pad of the original
            let sy = y + dy;
            if sy < pad || sy - pad >= h {
                continue;
            }
            for x in 0..w {
                let sx = x + dx;
                if sx < pad || sx - pad >= w {
                    continue;
                }
                dst[(p * h + y) * w + x] = src[(p * h + sy - pad) * w + sx - pad];
            }
        }
    }
    Ok(out)
}

/// Mirrors example `i` of the batch left-right in place.
pub fn flip_example(batch: &mut Tensor, i: usize) -> Result<()> {
    let (_, c, h, w) = batch.dims4()?;
    let per = c * h * w;
    for row in batch.data_mut()[i * per..(i + 1) * per].chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(())
}

/// One shared crop offset for the batch, an independent flip per example.
pub fn augment(batch: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let (n, _, h, w) = batch.dims4()?;
    let mut out = if cfg.crop {
        if h != 32 || w != 32 {
            return Err(Error::Config(format!(
                "crop augmentation expects 32x32 images, got {h}x{w}"
            )));
        }
        let dy = rng.gen_range(0..=2 * cfg.pad);
        let dx = rng.gen_range(0..=2 * cfg.pad);
        pad_crop(batch, cfg.pad, dy, dx)?
    } else {
        batch.clone()
    };
    if cfg.flip {
        for i in 0..n {
            if rng.gen::<bool>() {
                flip_example(&mut out, i)?;
            }
        }
    }
    Ok(out)
}

/// Number of rows whose argmax differs from the label (first maximum wins).
pub fn count_errors(scores: &Tensor, labels: &[usize]) -> Result<usize> {
    let (rows, cols) = scores.dims2()?;
    if rows != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "count_errors",
            left: scores.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    Ok(scores
        .data()
        .chunks_exact(cols)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) != l)
        .count())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss, gradients and BN moments of one training forward under the masks
/// keyed by `key`; the network is not modified.
pub fn loss_and_gradients(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    key: StreamKey,
) -> Result<(f64, usize, GradientMap, Vec<crate::autodiff::ChannelStats>)> {
    let plan = net.sample_plan(x.shape(), key)?;
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, x, ForwardMode::Train, &plan, true)?;
    let errors = count_errors(tape.value(out.logits)?, labels)?;
    let loss = tape.softmax_cross_entropy(out.logits, labels)?;
    let value = tape.value(loss)?.data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, errors, grads, out.bn_stats))
}

/// One SGD step on a mini-batch. Returns `(mean loss, errors)`.
pub fn train_step(
    net: &mut Network,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    x: &Tensor,
    labels: &[usize],
    lr: f64,
    key: StreamKey,
) -> Result<(f64, usize)> {
    let (loss, errors, grads, stats) = loss_and_gradients(net, x, labels, key)?;
    net.update_running_stats(&stats)?;
    sgd_step(
        net.params_mut(),
        &grads,
        opt,
        lr,
        cfg.momentum,
        cfg.weight_decay,
    )?;
    Ok((loss, errors))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Example-weighted mean cross-entropy.
    pub loss: f64,
    pub error: f64,
}

/// Generator for shuffling and augmentation in `epoch`, independent of the
/// mask streams.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Shuffle, then for every mini-batch: augment, sample masks, forward in
/// train mode, backward, SGD step. Masks of batch `b` use
/// `StreamKey::training(seed, epoch, b)`.
pub fn train_epoch(
    net: &mut Network,
    opt: &mut OptimizerState,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let lr = cfg.lr_schedule.lr_at(epoch);
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let (mut loss_sum, mut errors) = (0.0, 0);
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        let (x, y) = data.gather(idx)?;
        let x = augment(&x, &cfg.augment, &mut rng)?;
        let key = StreamKey::training(cfg.seed, epoch as u64, b as u64);
        let (loss, err) = train_step(net, opt, cfg, &x, &y, lr, key)?;
        loss_sum += loss * idx.len() as f64;
        errors += err;
    }
    Ok(EpochMetrics {
        epoch,
        lr,
        loss: loss_sum / data.len() as f64,
        error: errors as f64 / data.len() as f64,
    })
}
