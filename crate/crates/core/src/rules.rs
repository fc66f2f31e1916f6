//! Per-unit stochastic combination rules for a residual block.
//!
//! A block with input `x` and residual branch `fx = F(x)` combines them as
//!
//! | rule            | output                          |
//! |-----------------|---------------------------------|
//! | `None`          | `x + fx`                        |
//! | `Dropout`       | `Θ ⊙ fx`                        |
//! | `LayerDropout`  | `x + Θ · fx`, one Θ per block   |
//! | `SkipForward`   | `Θ ⊙ x + (1 − Θ) ⊙ fx`          |
//! | `SwapoutPair`   | `Θ1 ⊙ x + Θ2 ⊙ fx`              |
//! | `SwapoutGeneral`| `Σ Θi ⊙ Fi`                     |
//!
//! where every Θ is a tensor of Bernoulli draws with retain probability θ.
//! Training uses raw masked sums (no inverted rescaling); deterministic
//! inference replaces each Θ by θ.
//!
//! Masks come from counter-based ChaCha streams keyed by
//! `(seed, epoch, batch, block, draw, stream)`, so any forward pass can be
//! replayed exactly. Each Θ of a rule has a fixed stream role: the mask on
//! `x` always reads stream [`SKIP_STREAM`] and the mask on `fx` always
//! reads [`BRANCH_STREAM`]. That is what makes `SwapoutPair(0, θ)` and
//! `Dropout(θ)` draw identical branch masks from identical keys.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gated_sum, Gate, Tensor};

pub const SKIP_STREAM: u64 = 0;
pub const BRANCH_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    None,
    Dropout,
    LayerDropout,
    SkipForward,
    #[serde(alias = "swapout")]
    SwapoutPair,
    SwapoutGeneral,
}

impl RuleKind {
    pub fn name(self) -> &'static str {
        match self {
            RuleKind::None => "none",
            RuleKind::Dropout => "dropout",
            RuleKind::LayerDropout => "layer-dropout",
            RuleKind::SkipForward => "skip-forward",
            RuleKind::SwapoutPair => "swapout-pair",
            RuleKind::SwapoutGeneral => "swapout-general",
        }
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => RuleKind::None,
            "dropout" => RuleKind::Dropout,
            "layer-dropout" => RuleKind::LayerDropout,
            "skip-forward" => RuleKind::SkipForward,
            "swapout-pair" | "swapout" => RuleKind::SwapoutPair,
            "swapout-general" => RuleKind::SwapoutGeneral,
            other => return Err(Error::InvalidRule(format!("unknown rule kind {other:?}"))),
        })
    }
}

/// How many independent Bernoulli draws a mask uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One draw per activation entry.
    #[default]
    PerUnit,
    /// One draw per channel, broadcast over the spatial plane.
    PerChannel,
    /// One draw for the whole block output.
    PerBlock,
}

/// Whether examples in a mini-batch share their masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSharing {
    #[default]
    PerExample,
    PerBatch,
}

/// A combination rule with its retain probabilities resolved for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticRule {
    kind: RuleKind,
    thetas: Vec<f64>,
    granularity: Granularity,
}

impl StochasticRule {
    pub fn new(kind: RuleKind, thetas: Vec<f64>, granularity: Granularity) -> Result<Self> {
        let expected = match kind {
            RuleKind::None => Some(0),
            RuleKind::Dropout | RuleKind::LayerDropout | RuleKind::SkipForward => Some(1),
            RuleKind::SwapoutPair => Some(2),
            RuleKind::SwapoutGeneral => None,
        };
        match expected {
            Some(n) if thetas.len() != n => {
                return Err(Error::InvalidRule(format!(
                    "{kind} takes {n} theta values, got {}",
                    thetas.len()
                )))
            }
            None if thetas.len() < 2 => {
                return Err(Error::InvalidRule(format!(
                    "{kind} needs at least 2 theta values, got {}",
                    thetas.len()
                )))
            }
            _ => {}
        }
        if let Some(t) = thetas.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidRule(format!("theta {t} outside [0, 1]")));
        }
        if kind == RuleKind::LayerDropout && granularity != Granularity::PerBlock {
            return Err(Error::InvalidRule(
                "layer-dropout is per-block by definition".into(),
            ));
        }
        Ok(Self {
            kind,
            thetas,
            granularity,
        })
    }

    pub fn none() -> Self {
        Self {
            kind: RuleKind::None,
            thetas: vec![],
            granularity: Granularity::PerUnit,
        }
    }

    pub fn dropout(theta: f64) -> Result<Self> {
        Self::new(RuleKind::Dropout, vec![theta], Granularity::PerUnit)
    }

    pub fn layer_dropout(theta: f64) -> Result<Self> {
        Self::new(RuleKind::LayerDropout, vec![theta], Granularity::PerBlock)
    }

    pub fn skip_forward(theta: f64) -> Result<Self> {
        Self::new(RuleKind::SkipForward, vec![theta], Granularity::PerUnit)
    }

    pub fn swapout(theta_skip: f64, theta_branch: f64) -> Result<Self> {
        Self::new(
            RuleKind::SwapoutPair,
            vec![theta_skip, theta_branch],
            Granularity::PerUnit,
        )
    }

    pub fn swapout_general(thetas: Vec<f64>) -> Result<Self> {
        Self::new(RuleKind::SwapoutGeneral, thetas, Granularity::PerUnit)
    }

    pub fn with_granularity(self, granularity: Granularity) -> Result<Self> {
        Self::new(self.kind, self.thetas, granularity)
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn num_masks(&self) -> usize {
        self.thetas.len()
    }

    /// Stream role of each mask, in `thetas` order.
    pub fn streams(&self) -> Vec<u64> {
        match self.kind {
            RuleKind::None => vec![],
            RuleKind::Dropout | RuleKind::LayerDropout => vec![BRANCH_STREAM],
            RuleKind::SkipForward => vec![SKIP_STREAM],
            RuleKind::SwapoutPair | RuleKind::SwapoutGeneral => {
                (0..self.thetas.len() as u64).collect()
            }
        }
    }

    /// True when no mask can vary: every θ is 0 or 1.
    pub fn is_deterministic(&self) -> bool {
        self.thetas.iter().all(|&t| t == 0.0 || t == 1.0)
    }

    /// Gates for the terms `[x, fx]` under sampled masks.
    pub fn gates(&self, masks: &MaskSet) -> Result<Vec<Gate>> {
        if masks.masks.len() != self.num_masks() {
            return Err(Error::MaskCount {
                rule: self.kind.name(),
                expected: self.num_masks(),
                got: masks.masks.len(),
            });
        }
        let m = |i: usize| Gate::Mask(masks.masks[i].clone());
        Ok(match self.kind {
            RuleKind::None => vec![Gate::Scalar(1.0), Gate::Scalar(1.0)],
            RuleKind::Dropout => vec![Gate::Scalar(0.0), m(0)],
            RuleKind::LayerDropout => vec![Gate::Scalar(1.0), m(0)],
            RuleKind::SkipForward => vec![m(0), Gate::Mask(masks.masks[0].map(|v| 1.0 - v))],
            RuleKind::SwapoutPair => vec![m(0), m(1)],
            RuleKind::SwapoutGeneral => {
                if self.thetas.len() != 2 {
                    return Err(Error::InvalidRule(
                        "a residual block has two terms; use apply_rule_general for more".into(),
                    ));
                }
                vec![m(0), m(1)]
            }
        })
    }

    /// The inference-time rule: every Θ replaced by its expectation θ.
    pub fn deterministic_transform(&self) -> DeterministicRule {
        let t = &self.thetas;
        let coefficients = match self.kind {
            RuleKind::None => vec![1.0, 1.0],
            RuleKind::Dropout => vec![0.0, t[0]],
            RuleKind::LayerDropout => vec![1.0, t[0]],
            RuleKind::SkipForward => vec![t[0], 1.0 - t[0]],
            RuleKind::SwapoutPair | RuleKind::SwapoutGeneral => t.clone(),
        };
        DeterministicRule { coefficients }
    }
}

/// `y = Σ c_i F_i` with fixed scalar coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicRule {
    pub coefficients: Vec<f64>,
}

impl DeterministicRule {
    pub fn gates(&self) -> Vec<Gate> {
        self.coefficients.iter().map(|&c| Gate::Scalar(c)).collect()
    }

    pub fn apply(&self, terms: &[&Tensor]) -> Result<Tensor> {
        if terms.len() != self.coefficients.len() {
            return Err(Error::MaskCount {
                rule: "deterministic",
                expected: self.coefficients.len(),
                got: terms.len(),
            });
        }
        let gates = self.gates();
        let pairs: Vec<_> = terms.iter().copied().zip(&gates).collect();
        gated_sum(&pairs)
    }
}

/// Coordinates of one mask stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
    pub block: u64,
    pub draw: u64,
}

impl StreamKey {
    /// Epoch value reserved for inference-time draws.
    pub const INFERENCE_EPOCH: u64 = u64::MAX;

    pub fn training(seed: u64, epoch: u64, batch: u64) -> Self {
        Self {
            seed,
            epoch,
            batch,
            block: 0,
            draw: 0,
        }
    }

    pub fn inference(seed: u64, batch: u64, draw: u64) -> Self {
        Self {
            seed,
            epoch: Self::INFERENCE_EPOCH,
            batch,
            block: 0,
            draw,
        }
    }

    pub fn for_block(self, block: usize) -> Self {
        Self {
            block: block as u64,
            ..self
        }
    }

    /// Independent generator for stream `role` under this key.
    pub fn rng(&self, role: u64) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        for (chunk, v) in seed
            .chunks_exact_mut(8)
            .zip([self.seed, self.epoch, self.batch, self.block])
        {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.draw.wrapping_mul(1 << 16) ^ role);
        rng
    }
}

/// Sampled masks for one block, one per θ of the rule.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<Tensor>,
    pub thetas: Vec<f64>,
    pub key: Option<StreamKey>,
}

impl MaskSet {
    /// Masks supplied directly, e.g. by an enumeration oracle.
    pub fn fixed(masks: Vec<Tensor>, thetas: Vec<f64>) -> Self {
        Self {
            masks,
            thetas,
            key: None,
        }
    }

    pub fn empty() -> Self {
        Self::fixed(vec![], vec![])
    }
}

/// Draws one {0, 1} tensor of `shape` per θ of `rule`.
pub fn sample_masks(
    rule: &StochasticRule,
    shape: &[usize],
    key: StreamKey,
    sharing: MaskSharing,
) -> Result<MaskSet> {
    let mut masks = Vec::with_capacity(rule.num_masks());
    for (&theta, role) in rule.thetas.iter().zip(rule.streams()) {
        let mut rng = key.rng(role);
        masks.push(bernoulli_mask(
            theta,
            shape,
            rule.granularity,
            sharing,
            &mut rng,
        )?);
    }
    Ok(MaskSet {
        masks,
        thetas: rule.thetas.clone(),
        key: Some(key),
    })
}

fn bernoulli_mask(
    theta: f64,
    shape: &[usize],
    granularity: Granularity,
    sharing: MaskSharing,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mut out = Tensor::new(shape, vec![0.0; shape.iter().product()])?;
    let batch = shape[0];
    let channels = shape.get(1).copied().unwrap_or(1);
    let per_example = out.len() / batch;
    let plane = per_example / channels;
    // number of independent draws within one example
    let draws = match granularity {
        Granularity::PerUnit => per_example,
        Granularity::PerChannel => channels,
        Granularity::PerBlock => 1,
    };
    let span = per_example / draws;
    debug_assert!(granularity != Granularity::PerChannel || span == plane);
    let draw = |rng: &mut dyn rand::RngCore| -> f64 {
        if rng.gen::<f64>() < theta {
            1.0
        } else {
            0.0
        }
    };
    let data = out.data_mut();
    let mut shared: Vec<f64> = Vec::new();
    if sharing == MaskSharing::PerBatch {
        shared = (0..draws).map(|_| draw(rng)).collect();
    }
    for b in 0..batch {
        let example = &mut data[b * per_example..(b + 1) * per_example];
        for d in 0..draws {
            let v = match sharing {
                MaskSharing::PerBatch => shared[d],
                MaskSharing::PerExample => draw(rng),
            };
            example[d * span..(d + 1) * span].fill(v);
        }
    }
    Ok(out)
}

/// Combines `x` and `fx` under `rule` with already-sampled masks.
pub fn apply_rule(
    rule: &StochasticRule,
    x: &Tensor,
    fx: &Tensor,
    masks: &MaskSet,
) -> Result<Tensor> {
    x.expect_same_shape(fx, "apply_rule")?;
    for m in &masks.masks {
        m.expect_same_shape(x, "apply_rule")?;
    }
    let gates = rule.gates(masks)?;
    gated_sum(&[(x, &gates[0]), (fx, &gates[1])])
}

/// `Σ Θi ⊙ Fi` over any number of terms.
pub fn apply_rule_general(fis: &[&Tensor], masks: &MaskSet) -> Result<Tensor> {
    if fis.len() != masks.masks.len() {
        return Err(Error::MaskCount {
            rule: "swapout-general",
            expected: fis.len(),
            got: masks.masks.len(),
        });
    }
    let gates: Vec<Gate> = masks.masks.iter().cloned().map(Gate::Mask).collect();
    let pairs: Vec<_> = fis.iter().copied().zip(&gates).collect();
    gated_sum(&pairs)
}

/// Per-block assignment of a retain probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant(f64),
    /// Interpolates from `start` at the first block to `end` at the last.
    Linear {
        start: f64,
        end: f64,
    },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let vals: &[f64] = match self {
            Schedule::Constant(t) => &[*t],
            Schedule::Linear { start, end } => &[*start, *end],
        };
        if let Some(v) = vals.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidSchedule(format!("{v} outside [0, 1]")));
        }
        Ok(())
    }

    /// θ for block `index` of `num_blocks`, blocks in network order.
    pub fn resolve(&self, index: usize, num_blocks: usize) -> Result<f64> {
        if num_blocks == 0 || index >= num_blocks {
            return Err(Error::BlockIndex { index, num_blocks });
        }
        Ok(match *self {
            Schedule::Constant(t) => t,
            Schedule::Linear { start, .. } if num_blocks == 1 => start,
            Schedule::Linear { start, end } => {
                start + (end - start) * index as f64 / (num_blocks - 1) as f64
            }
        })
    }
}

pub fn resolve_schedule(s: &Schedule, block_index: usize, num_blocks: usize) -> Result<f64> {
    s.resolve(block_index, num_blocks)
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant(t) => write!(f, "constant:{t}"),
            Schedule::Linear { start, end } => write!(f, "linear:{start}:{end}"),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidSchedule(format!("bad number {p:?} in {s:?}")))
        };
        let sched = match parts[..] {
            ["constant", t] => Schedule::Constant(num(t)?),
            ["linear", a, b] => Schedule::Linear {
                start: num(a)?,
                end: num(b)?,
            },
            _ => {
                return Err(Error::InvalidSchedule(format!(
                    "expected constant:T or linear:A:B, got {s:?}"
                )))
            }
        };
        sched.validate()?;
        Ok(sched)
    }
}

impl Serialize for Schedule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Schedule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Network-wide rule description: a kind plus one schedule per mask stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub kind: RuleKind,
    /// One schedule per θ; a single schedule is shared by every stream.
    pub schedules: Vec<Schedule>,
    #[serde(default)]
    pub granularity: Granularity,
}

impl RuleSpec {
    pub fn none() -> Self {
        Self {
            kind: RuleKind::None,
            schedules: vec![],
            granularity: Granularity::PerUnit,
        }
    }

    /// Swapout with both streams following `schedule`.
    pub fn swapout(schedule: Schedule) -> Self {
        Self {
            kind: RuleKind::SwapoutPair,
            schedules: vec![schedule],
            granularity: Granularity::PerUnit,
        }
    }

    pub fn single(kind: RuleKind, schedule: Schedule) -> Self {
        let granularity = if kind == RuleKind::LayerDropout {
            Granularity::PerBlock
        } else {
            Granularity::PerUnit
        };
        Self {
            kind,
            schedules: vec![schedule],
            granularity,
        }
    }

    fn num_thetas(&self) -> usize {
        match self.kind {
            RuleKind::None => 0,
            RuleKind::Dropout | RuleKind::LayerDropout | RuleKind::SkipForward => 1,
            RuleKind::SwapoutPair | RuleKind::SwapoutGeneral => 2,
        }
    }

    pub fn resolve(&self, block: usize, num_blocks: usize) -> Result<StochasticRule> {
        let n = self.num_thetas();
        let thetas = match (n, self.schedules.len()) {
            (0, _) => vec![],
            (_, 1) => vec![self.schedules[0].resolve(block, num_blocks)?; n],
            (n, m) if n == m => self
                .schedules
                .iter()
                .map(|s| s.resolve(block, num_blocks))
                .collect::<Result<_>>()?,
            (n, m) => {
                return Err(Error::InvalidRule(format!(
                    "{} needs 1 or {n} schedules, got {m}",
                    self.kind
                )))
            }
        };
        StochasticRule::new(self.kind, thetas, self.granularity)
    }
}
