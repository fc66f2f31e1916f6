//! Residual networks whose blocks combine `x` and `F(x)` through a
//! [`StochasticRule`].
//!
//! Layout: a 3×3 stem convolution, groups of residual blocks, and a head
//! made of a 1×1 convolution to `num_classes` channels followed by global
//! average pooling. The first block of every group after the first
//! halves the resolution with 2×2 average pooling; its shortcut is the
//! pooled input passed through a learned 1×1 projection.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ChannelStats, Normalization, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::rules::{sample_masks, MaskSet, MaskSharing, RuleSpec, StochasticRule, StreamKey};
use crate::tensor::{Gate, Tensor};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};

/// Residual block ordering.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// conv-BN-ReLU-conv-BN, combine, ReLU.
    V1,
    /// BN-ReLU-conv-BN-ReLU-conv, combine.
    #[default]
    V2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupConfig {
    pub blocks: usize,
    pub width: usize,
}

pub const BASE_WIDTHS: [usize; 3] = [16, 32, 64];

fn default_in_channels() -> usize {
    3
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(default)]
    pub variant: Variant,
    pub groups: Vec<GroupConfig>,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub rule: RuleSpec,
    #[serde(default)]
    pub mask_sharing: MaskSharing,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    /// Weight kept by the running statistics at each update.
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

impl NetworkConfig {
    /// Standard CIFAR depth accounting: `depth = 6n + 2` gives `n` blocks per
    /// group, widths `(16, 32, 64)·k`.
    pub fn from_depth(
        depth: usize,
        width_multiplier: usize,
        num_classes: usize,
        rule: RuleSpec,
    ) -> Result<Self> {
        if depth < 8 || !(depth - 2).is_multiple_of(6) {
            return Err(Error::Config(format!(
                "depth {depth} is not of the form 6n+2 with n >= 1"
            )));
        }
        if width_multiplier == 0 {
            return Err(Error::Config("width multiplier must be positive".into()));
        }
        let n = (depth - 2) / 6;
        Ok(Self {
            variant: Variant::V2,
            groups: BASE_WIDTHS
                .iter()
                .map(|w| GroupConfig {
                    blocks: n,
                    width: w * width_multiplier,
                })
                .collect(),
            num_classes,
            in_channels: 3,
            rule,
            mask_sharing: MaskSharing::PerExample,
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
        })
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn num_blocks(&self) -> usize {
        self.groups.iter().map(|g| g.blocks).sum()
    }

    /// Convolution layers counted the usual way: stem, two per block, head.
    pub fn depth(&self) -> usize {
        2 * self.num_blocks() + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Config("network needs at least one group".into()));
        }
        if let Some(g) = self.groups.iter().find(|g| g.blocks == 0 || g.width == 0) {
            return Err(Error::Config(format!(
                "group {g:?} must have blocks >= 1 and width >= 1"
            )));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "num_classes and in_channels must be positive".into(),
            ));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(
                "bn_eps must be > 0 and bn_momentum in [0, 1)".into(),
            ));
        }
        for s in &self.rule.schedules {
            s.validate()?;
        }
        self.block_rules().map(|_| ())
    }

    /// The rule of every block, in network order.
    pub fn block_rules(&self) -> Result<Vec<StochasticRule>> {
        let n = self.num_blocks();
        (0..n).map(|i| self.rule.resolve(i, n)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics in BN, sampled masks.
    Train,
    /// Running statistics in BN, every mask replaced by its θ.
    DetEval,
    /// Running statistics in BN, sampled masks.
    StochEval,
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies (convolution and projection weights).
    pub decay: bool,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    /// `running ← m·running + (1 − m)·batch`.
    pub fn update(&mut self, batch: &ChannelStats, momentum: f64) {
        for (r, b) in self.running_mean.iter_mut().zip(&batch.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&batch.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

#[derive(Clone, Debug)]
struct BlockLayout {
    in_channels: usize,
    out_channels: usize,
    downsample: bool,
    conv1: ParamId,
    conv2: ParamId,
    bn1: usize,
    bn2: usize,
    proj: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ParamId,
    stem_bn: Option<usize>,
    blocks: Vec<BlockLayout>,
    final_bn: Option<usize>,
    head_weight: ParamId,
    head_bias: ParamId,
}

/// Result of one forward pass recorded on a tape.
pub struct ForwardOutput {
    pub logits: Var,
    /// Moments of every BN input as observed in this pass, in layer order.
    pub bn_stats: Vec<ChannelStats>,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    rules: Vec<StochasticRule>,
    params: Vec<Param>,
    bn: Vec<BatchNormState>,
    layout: Layout,
}

struct Builder<'a> {
    params: Vec<Param>,
    bn: Vec<BatchNormState>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, value: Tensor, decay: bool) -> ParamId {
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    fn conv(&mut self, name: String, cout: usize, cin: usize, k: usize) -> ParamId {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = Tensor::randn(&[cout, cin, k, k], std, self.rng);
        self.push(name, w, true)
    }

    fn bn(&mut self, name: String, channels: usize) -> usize {
        let gamma = self.push(format!("{name}.gamma"), Tensor::ones(&[channels]), false);
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[channels]), false);
        self.bn.push(BatchNormState {
            name,
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        });
        self.bn.len() - 1
    }
}

impl Network {
    /// Builds a network with He-initialized convolutions from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rules = config.block_rules()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            bn: Vec::new(),
            rng: &mut rng,
        };
        let v1 = config.variant == Variant::V1;
        let stem_width = config.groups[0].width;
        let stem = b.conv("stem.conv".into(), stem_width, config.in_channels, 3);
        let stem_bn = v1.then(|| b.bn("stem.bn".into(), stem_width));
        let mut blocks = Vec::new();
        let mut channels = stem_width;
        for (g, group) in config.groups.iter().enumerate() {
            for i in 0..group.blocks {
                let name = format!("group{g}.block{i}");
                let out = group.width;
                let downsample = i == 0 && (g > 0 || channels != out);
                let bn_first_channels = if v1 { out } else { channels };
                let conv1 = b.conv(format!("{name}.conv1"), out, channels, 3);
                let bn1 = b.bn(format!("{name}.bn1"), bn_first_channels);
                let conv2 = b.conv(format!("{name}.conv2"), out, out, 3);
                let bn2 = b.bn(format!("{name}.bn2"), out);
                let proj = downsample.then(|| b.conv(format!("{name}.proj"), out, channels, 1));
                blocks.push(BlockLayout {
                    in_channels: channels,
                    out_channels: out,
                    downsample,
                    conv1,
                    conv2,
                    bn1,
                    bn2,
                    proj,
                });
                channels = out;
            }
        }
        let final_bn = (!v1).then(|| b.bn("final.bn".into(), channels));
        let head_weight = b.conv("head.weight".into(), config.num_classes, channels, 1);
        let head_bias = b.push(
            "head.bias".into(),
            Tensor::zeros(&[config.num_classes]),
            false,
        );
        let (params, bn) = (b.params, b.bn);
        Ok(Self {
            config,
            rules,
            params,
            bn,
            layout: Layout {
                stem,
                stem_bn,
                blocks,
                final_bn,
                head_weight,
                head_bias,
            },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn rules(&self) -> &[StochasticRule] {
        &self.rules
    }

    pub fn num_blocks(&self) -> usize {
        self.layout.blocks.len()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_by_name(&self, name: &str) -> Option<(ParamId, &Param)> {
        self.params
            .iter()
            .enumerate()
            .find(|(_, p)| p.name == name)
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Shape of every block's combined output for a `(batch, _, h, w)` input.
    pub fn block_output_shapes(&self, batch: usize, h: usize, w: usize) -> Result<Vec<Vec<usize>>> {
        let (mut h, mut w) = (h, w);
        let mut shapes = Vec::with_capacity(self.num_blocks());
        for blk in &self.layout.blocks {
            if blk.downsample {
                if h < 2 || w < 2 {
                    return Err(Error::WindowExceedsInput {
                        op: "downsample",
                        window: 2,
                        extent: h.min(w),
                    });
                }
                h /= 2;
                w /= 2;
            }
            shapes.push(vec![batch, blk.out_channels, h, w]);
        }
        Ok(shapes)
    }

    /// Draws the masks of every block for an input of `input_shape`.
    ///
    /// Block `i` reads the streams of `key.for_block(i)`.
    pub fn sample_plan(&self, input_shape: &[usize], key: StreamKey) -> Result<Vec<MaskSet>> {
        let [b, _, h, w] = input_shape[..] else {
            return Err(Error::InvalidShape {
                shape: input_shape.to_vec(),
                reason: "network input must be (B, C, H, W)".into(),
            });
        };
        let shapes = self.block_output_shapes(b, h, w)?;
        self.rules
            .iter()
            .zip(shapes)
            .enumerate()
            .map(|(i, (rule, shape))| {
                sample_masks(rule, &shape, key.for_block(i), self.config.mask_sharing)
            })
            .collect()
    }

    /// Empty plan for rules without masks or deterministic evaluation.
    pub fn empty_plan(&self) -> Vec<MaskSet> {
        vec![MaskSet::empty(); self.num_blocks()]
    }

    fn leaf(&self, tape: &mut Tape, id: ParamId, track: bool) -> Var {
        let value = self.params[id.0].value.clone();
        if track {
            tape.param(id, value)
        } else {
            tape.constant(value)
        }
    }

    fn batch_norm(
        &self,
        tape: &mut Tape,
        input: Var,
        bn: usize,
        mode: ForwardMode,
        track: bool,
        stats: &mut Vec<ChannelStats>,
    ) -> Result<Var> {
        let state = &self.bn[bn];
        let gamma = self.leaf(tape, state.gamma, track);
        let beta = self.leaf(tape, state.beta, track);
        let eps = self.config.bn_eps;
        let norm = match mode {
            ForwardMode::Train => Normalization::Batch { eps },
            ForwardMode::DetEval | ForwardMode::StochEval => Normalization::Fixed {
                mean: state.running_mean.clone(),
                var: state.running_var.clone(),
                eps,
            },
        };
        let (out, observed) = tape.batch_norm(input, gamma, beta, norm)?;
        stats.push(observed);
        Ok(out)
    }

    /// Records a full forward pass on `tape`.
    ///
    /// `plan` holds one [`MaskSet`] per block and is ignored in
    /// [`ForwardMode::DetEval`]. With `track_params` the parameters become
    /// differentiable leaves so [`Tape::backward`] reports their gradients.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: ForwardMode,
        plan: &[MaskSet],
        track_params: bool,
    ) -> Result<ForwardOutput> {
        let input = tape.constant(x.clone());
        self.forward_var(tape, input, mode, plan, track_params)
    }

    /// Like [`Network::forward`] for an input already on the tape.
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: ForwardMode,
        plan: &[MaskSet],
        track: bool,
    ) -> Result<ForwardOutput> {
        let (_, c, _, _) = tape.value(input)?.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::ChannelMismatch {
                op: "network_forward",
                input: c,
                kernel: self.config.in_channels,
            });
        }
        if mode != ForwardMode::DetEval && plan.len() != self.num_blocks() {
            return Err(Error::MaskCount {
                rule: "mask plan",
                expected: self.num_blocks(),
                got: plan.len(),
            });
        }
        let mut stats = Vec::with_capacity(self.bn.len());
        let l = &self.layout;
        let stem = self.leaf(tape, l.stem, track);
        let mut h = tape.conv2d(input, stem, 1, 1)?;
        if let Some(bn) = l.stem_bn {
            h = self.batch_norm(tape, h, bn, mode, track, &mut stats)?;
            h = tape.relu(h)?;
        }
        for i in 0..self.num_blocks() {
            h = self.block_forward(tape, i, h, mode, plan.get(i), track, &mut stats)?;
        }
        if let Some(bn) = l.final_bn {
            h = self.batch_norm(tape, h, bn, mode, track, &mut stats)?;
            h = tape.relu(h)?;
        }
        let hw = self.leaf(tape, l.head_weight, track);
        let hb = self.leaf(tape, l.head_bias, track);
        h = tape.conv2d(h, hw, 1, 0)?;
        h = tape.add_bias(h, hb)?;
        let logits = tape.global_avg_pool(h)?;
        Ok(ForwardOutput {
            logits,
            bn_stats: stats,
        })
    }

    /// One residual block: the variant's branch `F`, the shortcut, and the
    /// block's rule applied to both.
    #[allow(clippy::too_many_arguments)]
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        index: usize,
        x: Var,
        mode: ForwardMode,
        masks: Option<&MaskSet>,
        track: bool,
        stats: &mut Vec<ChannelStats>,
    ) -> Result<Var> {
        let blk = self.layout.blocks.get(index).ok_or(Error::BlockIndex {
            index,
            num_blocks: self.num_blocks(),
        })?;
        let (_, c, _, _) = tape.value(x)?.dims4()?;
        if c != blk.in_channels {
            return Err(Error::ChannelMismatch {
                op: "block_forward",
                input: c,
                kernel: blk.in_channels,
            });
        }
        let (main_in, shortcut) = if blk.downsample {
            let pooled = tape.avg_pool2d(x, 2, 2)?;
            let proj = self.leaf(
                tape,
                blk.proj.expect("downsampling block has a projection"),
                track,
            );
            (pooled, tape.conv2d(pooled, proj, 1, 0)?)
        } else {
            (x, x)
        };
        let conv1 = self.leaf(tape, blk.conv1, track);
        let conv2 = self.leaf(tape, blk.conv2, track);
        let fx = match self.config.variant {
            Variant::V1 => {
                let a = tape.conv2d(main_in, conv1, 1, 1)?;
                let a = self.batch_norm(tape, a, blk.bn1, mode, track, stats)?;
                let a = tape.relu(a)?;
                let b = tape.conv2d(a, conv2, 1, 1)?;
                self.batch_norm(tape, b, blk.bn2, mode, track, stats)?
            }
            Variant::V2 => {
                let a = self.batch_norm(tape, main_in, blk.bn1, mode, track, stats)?;
                let a = tape.relu(a)?;
                let a = tape.conv2d(a, conv1, 1, 1)?;
                let b = self.batch_norm(tape, a, blk.bn2, mode, track, stats)?;
                let b = tape.relu(b)?;
                tape.conv2d(b, conv2, 1, 1)?
            }
        };
        let rule = &self.rules[index];
        let gates: Vec<Gate> = match mode {
            ForwardMode::DetEval => rule.deterministic_transform().gates(),
            ForwardMode::Train | ForwardMode::StochEval => {
                let empty = MaskSet::empty();
                let masks = masks.unwrap_or(&empty);
                let shape = tape.value(fx)?.shape().to_vec();
                if let Some(m) = masks.masks.iter().find(|m| m.shape() != shape.as_slice()) {
                    return Err(Error::ShapeMismatch {
                        op: "block_forward",
                        left: shape,
                        right: m.shape().to_vec(),
                    });
                }
                rule.gates(masks)?
            }
        };
        let mut gates = gates.into_iter();
        let combined = tape.gated_sum(vec![
            (shortcut, gates.next().unwrap()),
            (fx, gates.next().unwrap()),
        ])?;
        match self.config.variant {
            Variant::V1 => tape.relu(combined),
            Variant::V2 => Ok(combined),
        }
    }

    /// Logits without gradient tracking, plus the observed BN moments.
    pub fn logits(
        &self,
        x: &Tensor,
        mode: ForwardMode,
        plan: &[MaskSet],
    ) -> Result<(Tensor, Vec<ChannelStats>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, mode, plan, false)?;
        Ok((tape.value(out.logits)?.clone(), out.bn_stats))
    }

    /// Folds one training pass's batch moments into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[ChannelStats]) -> Result<()> {
        if stats.len() != self.bn.len() {
            return Err(Error::Config(format!(
                "expected {} batch-norm statistics, got {}",
                self.bn.len(),
                stats.len()
            )));
        }
        let m = self.config.bn_momentum;
        for (state, s) in self.bn.iter_mut().zip(stats) {
            state.update(s, m);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::{RuleKind, Schedule};

    fn tiny(variant: Variant, rule: RuleSpec) -> NetworkConfig {
        NetworkConfig {
            variant,
            groups: vec![
                GroupConfig {
                    blocks: 1,
                    width: 2,
                },
                GroupConfig {
                    blocks: 1,
                    width: 3,
                },
            ],
            num_classes: 4,
            in_channels: 3,
            rule,
            mask_sharing: MaskSharing::PerExample,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }

    fn input() -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng)
    }

    #[test]
    fn depth_accounting() {
        let cfg = NetworkConfig::from_depth(20, 1, 10, RuleSpec::none()).unwrap();
        assert_eq!(cfg.num_blocks(), 9);
        assert_eq!(cfg.depth(), 20);
        assert!(NetworkConfig::from_depth(21, 1, 10, RuleSpec::none()).is_err());
        let net = Network::new(cfg, 0).unwrap();
        let conv_weights: usize = net
            .params()
            .iter()
            .filter(|p| p.decay)
            .map(|p| p.value.len())
            .sum();
        // stem 432, group 0 13824, group 1 51200, group 2 204800, head 640
        assert_eq!(conv_weights, 270_896);
    }

    #[test]
    fn logits_shape_and_determinism() {
        for variant in [Variant::V1, Variant::V2] {
            let net = Network::new(tiny(variant, RuleSpec::none()), 1).unwrap();
            let plan = net.empty_plan();
            let (a, _) = net.logits(&input(), ForwardMode::Train, &plan).unwrap();
            let (b, _) = net.logits(&input(), ForwardMode::Train, &plan).unwrap();
            assert_eq!(a.shape(), &[2, 4]);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_second_conv_makes_v2_block_identity() {
        let mut net = Network::new(tiny(Variant::V2, RuleSpec::none()), 2).unwrap();
        let id = net.param_by_name("group0.block0.conv2").unwrap().0;
        net.params_mut()[id.0].value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = tape.constant(Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng));
        let y = net
            .block_forward(
                &mut tape,
                0,
                x,
                ForwardMode::Train,
                Some(&MaskSet::empty()),
                false,
                &mut vec![],
            )
            .unwrap();
        assert_eq!(tape.value(y).unwrap(), tape.value(x).unwrap());
    }

    #[test]
    fn downsample_halves_resolution_and_widens() {
        let net = Network::new(tiny(Variant::V2, RuleSpec::none()), 3).unwrap();
        assert_eq!(
            net.block_output_shapes(2, 4, 4).unwrap(),
            vec![vec![2, 2, 4, 4], vec![2, 3, 2, 2]]
        );
        assert!(net.param_by_name("group1.block0.proj").is_some());
        assert!(net.param_by_name("group0.block0.proj").is_none());
    }

    #[test]
    fn swapout_one_one_matches_plain_residual() {
        let plain = Network::new(tiny(Variant::V1, RuleSpec::none()), 4).unwrap();
        let swap = Network::new(
            tiny(Variant::V1, RuleSpec::swapout(Schedule::Constant(1.0))),
            4,
        )
        .unwrap();
        let x = input();
        for mode in [ForwardMode::DetEval, ForwardMode::Train] {
            let plan = swap
                .sample_plan(x.shape(), StreamKey::training(0, 0, 0))
                .unwrap();
            let (a, _) = plain.logits(&x, mode, &plain.empty_plan()).unwrap();
            let (b, _) = swap.logits(&x, mode, &plan).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn plan_errors() {
        let net = Network::new(
            tiny(Variant::V2, RuleSpec::swapout(Schedule::Constant(0.5))),
            0,
        )
        .unwrap();
        assert!(net.logits(&input(), ForwardMode::Train, &[]).is_err());
        let bad = vec![MaskSet::empty(); 2];
        assert!(matches!(
            net.logits(&input(), ForwardMode::Train, &bad),
            Err(Error::MaskCount { .. })
        ));
        let wrong_channels = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(net
            .logits(&wrong_channels, ForwardMode::DetEval, &[])
            .is_err());
    }

    #[test]
    fn running_stats_two_step_recurrence() {
        let mut state = BatchNormState {
            name: "bn".into(),
            gamma: ParamId(0),
            beta: ParamId(1),
            running_mean: vec![0.0],
            running_var: vec![1.0],
        };
        state.update(
            &ChannelStats {
                mean: vec![2.0],
                var: vec![4.0],
            },
            0.9,
        );
        state.update(
            &ChannelStats {
                mean: vec![1.0],
                var: vec![0.0],
            },
            0.9,
        );
        // mean: 0.2 then 0.9*0.2+0.1 = 0.28; var: 1.3 then 1.17
        assert!((state.running_mean[0] - 0.28).abs() < 1e-15);
        assert!((state.running_var[0] - 1.17).abs() < 1e-15);
    }

    #[test]
    fn eval_with_unit_stats_is_affine_identity() {
        let net = Network::new(tiny(Variant::V2, RuleSpec::none()), 6).unwrap();
        let mut tape = Tape::new();
        let x = input();
        let xv = tape.constant(x.clone());
        let mut stats = vec![];
        let y = net
            .batch_norm(&mut tape, xv, 0, ForwardMode::DetEval, false, &mut stats)
            .unwrap_err();
        // bn 0 of a v2 net has 2 channels; the 3-channel input is rejected
        assert!(matches!(y, Error::ShapeMismatch { .. }));
        let two = tape.constant(Tensor::randn(
            &[2, 2, 3, 3],
            1.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        ));
        let out = net
            .batch_norm(&mut tape, two, 0, ForwardMode::DetEval, false, &mut stats)
            .unwrap();
        let (a, b) = (tape.value(two).unwrap(), tape.value(out).unwrap());
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u / (1.0f64 + 1e-5).sqrt() - v).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_dropout_config_resolves_per_block() {
        let cfg = tiny(
            Variant::V2,
            RuleSpec::single(RuleKind::LayerDropout, "linear:1:0.5".parse().unwrap()),
        );
        let net = Network::new(cfg, 0).unwrap();
        assert_eq!(net.rules()[1].thetas(), &[0.5]);
        let plan = net
            .sample_plan(&[2, 3, 4, 4], StreamKey::training(1, 0, 0))
            .unwrap();
        for ex in plan[1].masks[0].data().chunks(12) {
            assert!(ex.iter().all(|&v| v == ex[0]));
        }
    }
}
