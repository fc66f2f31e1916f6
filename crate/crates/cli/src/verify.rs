//! Quick oracle checks behind `swapout verify`.

use swapout::autodiff::Step;
use swapout::network::{ForwardMode, GroupConfig, Network, NetworkConfig, Variant};
use swapout::rules::{
    Granularity, MaskSharing, RuleKind, RuleSpec, Schedule, StochasticRule, StreamKey,
};
use swapout::tensor::Tensor;
use swapout::verification::{
    analytic_moments, enumerated_moments, exhaustive_expectation, gradient_check,
    max_grad_norm_over_masks, relu_witness, ToyConfig, ToyNet,
};
use swapout::Result;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check {
            name,
            passed,
            detail,
        },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn small_net(rule: RuleSpec, seed: u64) -> Result<Network> {
    Network::new(
        NetworkConfig {
            variant: Variant::V2,
            groups: vec![
                GroupConfig {
                    blocks: 1,
                    width: 4,
                },
                GroupConfig {
                    blocks: 1,
                    width: 6,
                },
                GroupConfig {
                    blocks: 1,
                    width: 8,
                },
            ],
            num_classes: 5,
            in_channels: 3,
            rule,
            mask_sharing: MaskSharing::PerExample,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        },
        seed,
    )
}

fn toy(seed: u64) -> Result<ToyNet> {
    Ok(ToyNet::new(
        ToyConfig {
            units: 2,
            hidden: 3,
            classes: 3,
            rules: vec![StochasticRule::swapout(0.7, 0.4)?; 3],
            relu_after_combine: true,
        },
        seed,
    ))
}

fn reductions(seed: u64) -> Result<(bool, String)> {
    let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let key = StreamKey::training(seed, 0, 0);
    let logits = |spec: RuleSpec| -> Result<Tensor> {
        let net = small_net(spec, seed)?;
        let plan = net.sample_plan(x.shape(), key)?;
        Ok(net.logits(&x, ForwardMode::Train, &plan)?.0)
    };
    let c = Schedule::Constant;
    let pair = |a: f64, b: f64, g: Granularity| RuleSpec {
        kind: RuleKind::SwapoutPair,
        schedules: vec![c(a), c(b)],
        granularity: g,
    };
    let residual = logits(RuleSpec::none())? == logits(pair(1.0, 1.0, Granularity::PerUnit))?;
    let dropout = logits(RuleSpec::single(RuleKind::Dropout, c(0.6)))?
        == logits(pair(0.0, 0.6, Granularity::PerUnit))?;
    let layer = logits(RuleSpec::single(RuleKind::LayerDropout, c(0.6)))?
        == logits(pair(1.0, 0.6, Granularity::PerBlock))?;
    Ok((
        residual && dropout && layer,
        format!("pair(1,1)=residual {residual}, pair(0,t)=dropout {dropout}, pair(1,t)=layer-dropout {layer}"),
    ))
}

fn moments() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for &(x, y) in &[(1.0, 1.0), (2.0, -3.0), (0.5, 4.0)] {
        for &a in &[0.0, 0.2, 0.5, 0.8, 1.0] {
            for &b in &[0.0, 0.2, 0.5, 0.8, 1.0] {
                let (m1, v1) = analytic_moments(x, y, a, b);
                let (m2, v2) = enumerated_moments(x, y, a, b);
                worst = worst.max((m1 - m2).abs() / m1.abs().max(1.0));
                worst = worst.max((v1 - v2).abs() / v1.abs().max(1.0));
            }
        }
    }
    Ok((worst <= 1e-12, format!("max relative gap {worst:.2e}")))
}

fn expectation(seed: u64) -> Result<(bool, String)> {
    let net = toy(seed)?;
    let x = Tensor::new(&[1, 2], vec![0.8, -0.5])?;
    let domain = net.enumeration_domain(1)?;
    let exact =
        exhaustive_expectation(&domain, |m| net.probabilities(&x, Some(&net.mask_sets(m))))?;
    let draws = 20_000;
    let mut sum = Tensor::zeros(exact.shape());
    let mut sq = Tensor::zeros(exact.shape());
    for d in 0..draws {
        let p = net.probabilities(
            &x,
            Some(&net.sample_plan(1, StreamKey::inference(seed, 0, d))?),
        )?;
        sq.add_assign(&p.map(|v| v * v))?;
        sum.add_assign(&p)?;
    }
    let n = draws as f64;
    let mut worst: f64 = 0.0;
    for i in 0..exact.len() {
        let mean = sum.data()[i] / n;
        let var = sq.data()[i] / n - mean * mean;
        let se = (var.max(0.0) / n).sqrt();
        worst = worst.max((mean - exact.data()[i]).abs() / se.max(1e-300));
    }
    let (e_relu, relu_e) = relu_witness()?;
    Ok((
        worst <= 4.0 && e_relu == 0.25 && relu_e == 0.0,
        format!("max |MC - exact| = {worst:.2} SE over {draws} draws; E[relu] = {e_relu}, relu(E) = {relu_e}"),
    ))
}

fn grad_bound(seed: u64) -> Result<(bool, String)> {
    let net = toy(seed)?;
    let x = Tensor::new(&[1, 2], vec![0.8, -0.5])?;
    let labels = [1];
    let max = max_grad_norm_over_masks(&net, &x, &labels)?;
    let mut largest: f64 = 0.0;
    for d in 0..200 {
        let plan = net.sample_plan(1, StreamKey::inference(seed, 1, d))?;
        largest = largest.max(net.grad_norm(&x, &labels, &plan)?);
    }
    Ok((
        largest <= max,
        format!("largest sampled {largest:.6} <= max {max:.6}"),
    ))
}

fn gradients(seed: u64) -> Result<(bool, String)> {
    let net = small_net(RuleSpec::swapout(Schedule::Constant(0.5)), seed)?;
    let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    let labels = [0, 1, 2, 3];
    let plan = net.sample_plan(x.shape(), StreamKey::training(seed, 0, 0))?;
    let report = gradient_check(
        &net,
        &x,
        &labels,
        &plan,
        100,
        Step::Relative(1e-5),
        1e-7,
        seed,
    )?;
    Ok((
        report.max_relative_error < 1e-4,
        format!(
            "{} parameters, max relative error {:.2e}",
            report.checked, report.max_relative_error
        ),
    ))
}

pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        check("reductions", || reductions(seed)),
        check("moments", moments),
        check("expectation", || expectation(seed)),
        check("gradient-norm bound", || grad_bound(seed)),
        check("gradients", || gradients(seed)),
    ]
}
