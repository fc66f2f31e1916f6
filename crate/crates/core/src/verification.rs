//! Independent oracles: exhaustive mask enumeration, closed-form moments of
//! a masked pair, the maximum gradient norm over all mask configurations,
//! and a finite-difference gradient check for full networks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_norm, relative_error, GradientMap, ParamId, Step, Tape, Var};
use crate::error::{Error, Result};
use crate::network::{ForwardMode, Network};
use crate::rules::{sample_masks, MaskSet, MaskSharing, StochasticRule, StreamKey};
use crate::tensor::{gated_sum, Gate, Tensor};

/// Largest number of mask entries an enumeration may cover.
pub const ENUMERATION_CAP: usize = 24;

/// The stochastic sites of a small model: one `(shape, θ)` per mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumerationDomain {
    pub sites: Vec<(Vec<usize>, f64)>,
}

impl EnumerationDomain {
    pub fn new(sites: Vec<(Vec<usize>, f64)>) -> Result<Self> {
        let d = Self { sites };
        let entries = d.entries();
        if entries > ENUMERATION_CAP {
            return Err(Error::EnumerationCap {
                entries,
                cap: ENUMERATION_CAP,
            });
        }
        Ok(d)
    }

    pub fn entries(&self) -> usize {
        self.sites
            .iter()
            .map(|(s, _)| s.iter().product::<usize>())
            .sum()
    }

    pub fn configurations(&self) -> u64 {
        1u64 << self.entries()
    }

    /// Masks and probability of configuration `index`: bit `j` of `index`
    /// is mask entry `j`, counting through the sites in order.
    pub fn configuration(&self, index: u64) -> (Vec<Tensor>, f64) {
        let mut bit = 0;
        let mut prob = 1.0;
        let masks = self
            .sites
            .iter()
            .map(|(shape, theta)| {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        let on = (index >> bit) & 1 == 1;
                        bit += 1;
                        prob *= if on { *theta } else { 1.0 - theta };
                        if on {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Tensor::new(shape, data).expect("site shape")
            })
            .collect();
        (masks, prob)
    }
}

/// `Σ_config P(config) · f(masks(config))`, summed in configuration order.
/// Zero-probability configurations are skipped.
pub fn exhaustive_expectation(
    domain: &EnumerationDomain,
    f: impl FnMut(&[Tensor]) -> Result<Tensor>,
) -> Result<Tensor> {
    let order: Vec<u64> = (0..domain.configurations()).collect();
    exhaustive_expectation_in_order(domain, &order, f)
}

/// As [`exhaustive_expectation`] with an explicit visiting order.
pub fn exhaustive_expectation_in_order(
    domain: &EnumerationDomain,
    order: &[u64],
    mut f: impl FnMut(&[Tensor]) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for &c in order {
        let (masks, p) = domain.configuration(c);
        if p == 0.0 {
            continue;
        }
        let y = f(&masks)?;
        let term = if p == 1.0 { y } else { y.scale(p) };
        match acc.as_mut() {
            None => acc = Some(term),
            Some(a) => a.add_assign(&term)?,
        }
    }
    acc.ok_or_else(|| {
        Error::Config("enumeration domain has no configuration of positive probability".into())
    })
}

/// Mean and variance of `Θ1·x + Θ2·y` for independent Bernoulli Θ.
pub fn analytic_moments(x: f64, y: f64, theta1: f64, theta2: f64) -> (f64, f64) {
    let mean = theta1 * x + theta2 * y;
    let var = theta1 * (1.0 - theta1) * x * x + theta2 * (1.0 - theta2) * y * y;
    (mean, var)
}

/// The same moments by summing over the four outcomes.
pub fn enumerated_moments(x: f64, y: f64, theta1: f64, theta2: f64) -> (f64, f64) {
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for (a, pa) in [(0.0, 1.0 - theta1), (1.0, theta1)] {
        for (b, pb) in [(0.0, 1.0 - theta2), (1.0, theta2)] {
            let v = a * x + b * y;
            m1 += pa * pb * v;
            m2 += pa * pb * v * v;
        }
    }
    (m1, m2 - m1 * m1)
}

/// Monte Carlo sample moments of `Θ1·x + Θ2·y`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMoments {
    pub mean: f64,
    /// Unbiased sample variance.
    pub var: f64,
    /// Standard error of `mean`.
    pub mean_se: f64,
    /// Standard error of `var`: `sqrt(m4/n − m2²(n−3)/(n(n−1)))` from central
    /// moments, which stays positive for symmetric two-point distributions.
    pub var_se: f64,
}

pub fn sampled_moments(
    x: f64,
    y: f64,
    theta1: f64,
    theta2: f64,
    n: usize,
    rng: &mut impl Rng,
) -> SampleMoments {
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let a = if rng.gen::<f64>() < theta1 { 1.0 } else { 0.0 };
            let b = if rng.gen::<f64>() < theta2 { 1.0 } else { 0.0 };
            a * x + b * y
        })
        .collect();
    let nf = n as f64;
    let mean = vals.iter().sum::<f64>() / nf;
    let m2 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
    let m4 = vals.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / nf;
    SampleMoments {
        mean,
        var: m2 * nf / (nf - 1.0),
        mean_se: (m2 / nf).sqrt(),
        var_se: (m4 / nf - m2 * m2 * (nf - 3.0) / (nf * (nf - 1.0)))
            .max(0.0)
            .sqrt(),
    }
}

/// `(E[relu(Θ1·1 + Θ2·(−2))], relu(E[Θ1·1 + Θ2·(−2)]))` at θ = 0.5, by
/// enumeration: the expectation of the ReLU differs from the ReLU of the
/// expectation.
pub fn relu_witness() -> Result<(f64, f64)> {
    let domain = EnumerationDomain::new(vec![(vec![1], 0.5), (vec![1], 0.5)])?;
    let x = Tensor::scalar(1.0);
    let y = Tensor::scalar(-2.0);
    let combine = |m: &[Tensor]| {
        gated_sum(&[
            (&x, &Gate::Mask(m[0].clone())),
            (&y, &Gate::Mask(m[1].clone())),
        ])
    };
    let e_relu = exhaustive_expectation(&domain, |m| Ok(combine(m)?.relu()))?;
    let e_lin = exhaustive_expectation(&domain, combine)?;
    Ok((e_relu.data()[0], e_lin.relu().data()[0]))
}

/// Shape of a [`ToyNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub units: usize,
    pub hidden: usize,
    pub classes: usize,
    pub rules: Vec<StochasticRule>,
    /// Apply a ReLU after each block's combination.
    pub relu_after_combine: bool,
}

/// Dense residual network on `(B, units)` inputs. Block `i` computes
/// `F(x) = relu(x·W1 + b1)·W2 + b2` and combines `x, F(x)` with rule `i`;
/// a linear head produces logits.
#[derive(Clone, Debug)]
pub struct ToyNet {
    pub config: ToyConfig,
    pub params: Vec<Tensor>,
}

impl ToyNet {
    pub fn new(config: ToyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, h, c) = (config.units, config.hidden, config.classes);
        let mut params = Vec::new();
        for _ in &config.rules {
            params.push(Tensor::randn(&[u, h], (2.0 / u as f64).sqrt(), &mut rng));
            params.push(Tensor::randn(&[h], 0.1, &mut rng));
            params.push(Tensor::randn(&[h, u], (1.0 / h as f64).sqrt(), &mut rng));
            params.push(Tensor::randn(&[u], 0.1, &mut rng));
        }
        params.push(Tensor::randn(&[u, c], (1.0 / u as f64).sqrt(), &mut rng));
        params.push(Tensor::randn(&[c], 0.1, &mut rng));
        Self { config, params }
    }

    /// One `(shape, θ)` site per mask of every block for a batch of `batch`.
    pub fn enumeration_domain(&self, batch: usize) -> Result<EnumerationDomain> {
        let shape = vec![batch, self.config.units];
        EnumerationDomain::new(
            self.config
                .rules
                .iter()
                .flat_map(|r| r.thetas().iter().map(|&t| (shape.clone(), t)))
                .collect(),
        )
    }

    /// Groups a flat mask list (domain order) into per-block sets.
    pub fn mask_sets(&self, flat: &[Tensor]) -> Vec<MaskSet> {
        let mut it = flat.iter().cloned();
        self.config
            .rules
            .iter()
            .map(|r| {
                MaskSet::fixed(
                    it.by_ref().take(r.num_masks()).collect(),
                    r.thetas().to_vec(),
                )
            })
            .collect()
    }

    pub fn sample_plan(&self, batch: usize, key: StreamKey) -> Result<Vec<MaskSet>> {
        let shape = [batch, self.config.units];
        self.config
            .rules
            .iter()
            .enumerate()
            .map(|(i, r)| sample_masks(r, &shape, key.for_block(i), MaskSharing::PerExample))
            .collect()
    }

    /// Records the forward pass; `None` masks means deterministic inference.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        masks: Option<&[MaskSet]>,
        track: bool,
    ) -> Result<Var> {
        let leaf = |tape: &mut Tape, i: usize| {
            if track {
                tape.param(ParamId(i), self.params[i].clone())
            } else {
                tape.constant(self.params[i].clone())
            }
        };
        let mut h = tape.constant(x.clone());
        for (i, rule) in self.config.rules.iter().enumerate() {
            let (w1, b1, w2, b2) = (
                leaf(tape, 4 * i),
                leaf(tape, 4 * i + 1),
                leaf(tape, 4 * i + 2),
                leaf(tape, 4 * i + 3),
            );
            let a = tape.matmul(h, w1)?;
            let a = tape.add_bias(a, b1)?;
            let a = tape.relu(a)?;
            let f = tape.matmul(a, w2)?;
            let f = tape.add_bias(f, b2)?;
            let gates = match masks {
                Some(m) => rule.gates(m.get(i).ok_or(Error::BlockIndex {
                    index: i,
                    num_blocks: m.len(),
                })?)?,
                None => rule.deterministic_transform().gates(),
            };
            let mut g = gates.into_iter();
            h = tape.gated_sum(vec![(h, g.next().unwrap()), (f, g.next().unwrap())])?;
            if self.config.relu_after_combine {
                h = tape.relu(h)?;
            }
        }
        let n = self.config.rules.len();
        let (wh, bh) = (leaf(tape, 4 * n), leaf(tape, 4 * n + 1));
        let out = tape.matmul(h, wh)?;
        tape.add_bias(out, bh)
    }

    pub fn logits(&self, x: &Tensor, masks: Option<&[MaskSet]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, masks, false)?;
        Ok(tape.value(out)?.clone())
    }

    pub fn probabilities(&self, x: &Tensor, masks: Option<&[MaskSet]>) -> Result<Tensor> {
        self.logits(x, masks)?.softmax_rows()
    }

    /// Gradients of the mean cross-entropy under fixed masks.
    pub fn gradients(
        &self,
        x: &Tensor,
        labels: &[usize],
        masks: &[MaskSet],
    ) -> Result<GradientMap> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, x, Some(masks), true)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        tape.backward(loss)
    }

    pub fn grad_norm(&self, x: &Tensor, labels: &[usize], masks: &[MaskSet]) -> Result<f64> {
        Ok(grad_norm(&self.gradients(x, labels, masks)?))
    }
}

/// Largest parameter-gradient norm over every mask configuration of positive
/// probability.
pub fn max_grad_norm_over_masks(net: &ToyNet, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let domain = net.enumeration_domain(x.shape()[0])?;
    let mut best = f64::NEG_INFINITY;
    for c in 0..domain.configurations() {
        let (masks, p) = domain.configuration(c);
        if p > 0.0 {
            best = best.max(net.grad_norm(x, labels, &net.mask_sets(&masks))?);
        }
    }
    Ok(best)
}

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: (String, usize),
}

/// Compares reverse-mode gradients of the mean cross-entropy against central
/// differences on `samples` parameter entries chosen uniformly at random.
/// Forwards run in train mode under the fixed `plan`.
pub fn gradient_check(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    plan: &[MaskSet],
    samples: usize,
    step: Step,
    floor: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let loss_of = |net: &Network| -> Result<f64> {
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, x, ForwardMode::Train, plan, false)?;
        let loss = tape.softmax_cross_entropy(out.logits, labels)?;
        Ok(tape.value(loss)?.data()[0])
    };
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, x, ForwardMode::Train, plan, true)?;
    let loss = tape.softmax_cross_entropy(out.logits, labels)?;
    let grads = tape.backward(loss)?;

    let sizes: Vec<usize> = net.params().iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, samples.min(total)).into_vec();
    picks.sort_unstable();

    let mut probe = net.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        worst: (String::new(), 0),
    };
    for flat in picks {
        let (mut p, mut j) = (0, flat);
        while j >= sizes[p] {
            j -= sizes[p];
            p += 1;
        }
        let original = net.params()[p].value.data()[j];
        let h = step.at(original);
        probe.params_mut()[p].value.data_mut()[j] = original + h;
        let up = loss_of(&probe)?;
        probe.params_mut()[p].value.data_mut()[j] = original - h;
        let down = loss_of(&probe)?;
        probe.params_mut()[p].value.data_mut()[j] = original;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(ParamId(p)).map_or(0.0, |g| g.data()[j]);
        let err = relative_error(analytic, numeric, floor);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = (net.params()[p].name.clone(), j);
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(rules: Vec<StochasticRule>, relu: bool) -> ToyNet {
        ToyNet::new(
            ToyConfig {
                units: 2,
                hidden: 3,
                classes: 3,
                rules,
                relu_after_combine: relu,
            },
            1,
        )
    }

    #[test]
    fn cap_is_enforced() {
        assert!(matches!(
            EnumerationDomain::new(vec![(vec![5, 5], 0.5)]),
            Err(Error::EnumerationCap { entries: 25, .. })
        ));
        let d = EnumerationDomain::new(vec![(vec![2], 0.5), (vec![1], 0.25)]).unwrap();
        assert_eq!(d.configurations(), 8);
        let (m, p) = d.configuration(0b101);
        assert_eq!(m[0].data(), &[1.0, 0.0]);
        assert_eq!(m[1].data(), &[1.0]);
        assert_eq!(p, 0.5 * 0.5 * 0.25);
    }

    #[test]
    fn relu_expectation_does_not_commute() {
        assert_eq!(relu_witness().unwrap(), (0.25, 0.0));
    }

    #[test]
    fn moment_examples() {
        assert_eq!(analytic_moments(3.0, -2.0, 1.0, 1.0).1, 0.0);
        assert_eq!(analytic_moments(1.0, 1.0, 0.5, 0.5), (1.0, 0.5));
        let (m, v) = analytic_moments(5.0, 2.0, 0.0, 0.5);
        assert_eq!((m, v), analytic_moments(0.0, 2.0, 0.0, 0.5));
        for &(x, y, a, b) in &[
            (1.0, 1.0, 0.5, 0.5),
            (2.0, -3.0, 0.2, 0.9),
            (0.5, 4.0, 0.7, 0.1),
        ] {
            let (m1, v1) = analytic_moments(x, y, a, b);
            let (m2, v2) = enumerated_moments(x, y, a, b);
            assert!((m1 - m2).abs() <= 1e-12 * m1.abs().max(1.0));
            assert!((v1 - v2).abs() <= 1e-12 * v1.abs().max(1.0));
        }
    }

    #[test]
    fn all_ones_expectation_is_single_forward() {
        let net = toy(vec![StochasticRule::swapout(1.0, 1.0).unwrap(); 2], true);
        let x = Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap();
        let d = net.enumeration_domain(1).unwrap();
        let e = exhaustive_expectation(&d, |m| net.logits(&x, Some(&net.mask_sets(m)))).unwrap();
        let ones = net.mask_sets(&vec![Tensor::ones(&[1, 2]); 4]);
        assert_eq!(e, net.logits(&x, Some(&ones)).unwrap());
    }

    #[test]
    fn linear_combination_expectation_is_deterministic_forward() {
        // with one block and no ReLU after the combination, the logits are
        // affine in the masks
        let net = toy(vec![StochasticRule::swapout(0.3, 0.6).unwrap()], false);
        let x = Tensor::new(&[1, 2], vec![0.4, -0.9]).unwrap();
        let d = net.enumeration_domain(1).unwrap();
        let e = exhaustive_expectation(&d, |m| net.logits(&x, Some(&net.mask_sets(m)))).unwrap();
        let det = net.logits(&x, None).unwrap();
        for (a, b) in e.data().iter().zip(det.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn enumeration_order_does_not_matter() {
        let net = toy(vec![StochasticRule::swapout(0.5, 0.3).unwrap(); 2], true);
        let x = Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap();
        let d = net.enumeration_domain(1).unwrap();
        let f = |m: &[Tensor]| net.probabilities(&x, Some(&net.mask_sets(m)));
        let fwd = exhaustive_expectation(&d, f).unwrap();
        let mut order: Vec<u64> = (0..d.configurations()).rev().collect();
        let rev = exhaustive_expectation_in_order(&d, &order, f).unwrap();
        order.swap(0, 7);
        let shuffled = exhaustive_expectation_in_order(&d, &order, f).unwrap();
        for other in [rev, shuffled] {
            for (a, b) in fwd.data().iter().zip(other.data()) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn max_norm_dominates_samples() {
        let net = toy(vec![StochasticRule::swapout(0.5, 0.5).unwrap(); 2], true);
        let x = Tensor::new(&[1, 2], vec![0.5, -1.0]).unwrap();
        let labels = [2];
        let max = max_grad_norm_over_masks(&net, &x, &labels).unwrap();
        let mut total = 0.0;
        for d in 0..50 {
            let plan = net.sample_plan(1, StreamKey::inference(3, 0, d)).unwrap();
            let g = net.grad_norm(&x, &labels, &plan).unwrap();
            assert!(g <= max);
            total += g;
        }
        assert!(total / 50.0 < max);

        let fixed = toy(vec![StochasticRule::swapout(1.0, 0.0).unwrap(); 2], true);
        let only = fixed.mask_sets(&[
            Tensor::ones(&[1, 2]),
            Tensor::zeros(&[1, 2]),
            Tensor::ones(&[1, 2]),
            Tensor::zeros(&[1, 2]),
        ]);
        assert_eq!(
            max_grad_norm_over_masks(&fixed, &x, &labels).unwrap(),
            fixed.grad_norm(&x, &labels, &only).unwrap()
        );
    }
}
