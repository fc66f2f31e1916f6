use swapout::data::{synth_dataset, SynthConfig};
use swapout::network::{Network, NetworkConfig};
use swapout::rules::{RuleSpec, Schedule};
use swapout::train::{train_epoch, AugmentConfig, LrSchedule, OptimizerState, TrainConfig};

fn setup(rule: RuleSpec, count: usize) -> (Network, swapout::data::Dataset, TrainConfig) {
    let mut synth = SynthConfig::new(count, 4);
    synth.image_size = 8;
    synth.noise = 0.3;
    let data = synth_dataset(&synth, 1).unwrap();
    let cfg = NetworkConfig::from_depth(8, 1, 4, rule).unwrap();
    let net = Network::new(cfg, 2).unwrap();
    let train = TrainConfig {
        batch_size: 16,
        momentum: 0.9,
        weight_decay: 1e-4,
        epochs: 30,
        lr_schedule: LrSchedule::new(vec![(0, 0.05)]).unwrap(),
        seed: 3,
        augment: AugmentConfig::none(),
    };
    (net, data, train)
}

#[test]
fn memorizes_a_small_set() {
    let (mut net, data, cfg) = setup(RuleSpec::none(), 32);
    let mut opt = OptimizerState::new(net.params());
    let first = train_epoch(&mut net, &mut opt, &data, &cfg, 0).unwrap();
    let mut last = first.clone();
    for epoch in 1..cfg.epochs {
        last = train_epoch(&mut net, &mut opt, &data, &cfg, epoch).unwrap();
    }
    assert!(
        last.loss < 0.2 * first.loss,
        "{} -> {}",
        first.loss,
        last.loss
    );
    assert_eq!(last.error, 0.0);
}

#[test]
fn training_is_deterministic() {
    let rule = RuleSpec::swapout(Schedule::Constant(0.7));
    let run = || {
        let (mut net, data, cfg) = setup(rule.clone(), 40);
        let mut opt = OptimizerState::new(net.params());
        let metrics: Vec<_> = (0..2)
            .map(|e| train_epoch(&mut net, &mut opt, &data, &cfg, e).unwrap())
            .collect();
        (metrics, net.params().to_vec())
    };
    let (m1, p1) = run();
    let (m2, p2) = run();
    assert_eq!(m1, m2);
    assert_eq!(p1, p2);
}

#[test]
fn stochastic_training_changes_with_seed() {
    let rule = RuleSpec::swapout(Schedule::Constant(0.5));
    let (mut a, data, cfg) = setup(rule.clone(), 16);
    let (mut b, _, mut cfg_b) = setup(rule, 16);
    cfg_b.seed = 4;
    let mut oa = OptimizerState::new(a.params());
    let mut ob = OptimizerState::new(b.params());
    train_epoch(&mut a, &mut oa, &data, &cfg, 0).unwrap();
    train_epoch(&mut b, &mut ob, &data, &cfg_b, 0).unwrap();
    assert_ne!(a.params(), b.params());
}
