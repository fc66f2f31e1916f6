use swapout::data::{synth_dataset, SynthConfig};
use swapout::inference::{
    evaluate, predict, sample_sweep, sweep_error_table, InferenceMode, Reduction,
};
use swapout::network::{Network, NetworkConfig};
use swapout::rules::{RuleKind, RuleSpec, Schedule};

fn net(rule: RuleSpec) -> Network {
    Network::new(NetworkConfig::from_depth(8, 1, 4, rule).unwrap(), 6).unwrap()
}

fn data() -> swapout::data::Dataset {
    let mut cfg = SynthConfig::new(30, 4);
    cfg.image_size = 8;
    synth_dataset(&cfg, 2).unwrap()
}

#[test]
fn sweep_prefixes_match_direct_evaluation() {
    let net = net(RuleSpec::swapout(Schedule::Constant(0.6)));
    let data = data();
    let table = sweep_error_table(&net, &data, 4, 2, 11, Reduction::MeanSoftmax, 7).unwrap();
    for k in 1..=4 {
        let direct = evaluate(
            &net,
            &data,
            InferenceMode::Stochastic {
                samples: k,
                seed: 11,
            },
            Reduction::MeanSoftmax,
            7,
        )
        .unwrap();
        assert_eq!(table[0][k - 1], direct);
    }
    let rows = sample_sweep(&net, &data, 4, 2, 11, Reduction::MeanSoftmax, 7).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].mean_error, (table[0][0] + table[1][0]) / 2.0);
}

#[test]
fn deterministic_rule_makes_both_modes_agree() {
    let net = net(RuleSpec::single(RuleKind::None, Schedule::Constant(1.0)));
    let x = data().images;
    let det = predict(
        &net,
        &x,
        InferenceMode::Deterministic,
        Reduction::MeanSoftmax,
    )
    .unwrap();
    let stoch = predict(
        &net,
        &x,
        InferenceMode::Stochastic {
            samples: 3,
            seed: 0,
        },
        Reduction::MeanLogits,
    )
    .unwrap();
    for (a, b) in det.data().iter().zip(stoch.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn probabilities_are_normalized() {
    let net = net(RuleSpec::swapout(Schedule::Constant(0.5)));
    let x = data().images;
    for reduction in [Reduction::MeanSoftmax, Reduction::MeanLogits] {
        let p = predict(
            &net,
            &x,
            InferenceMode::Stochastic {
                samples: 5,
                seed: 1,
            },
            reduction,
        )
        .unwrap();
        for row in p.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn zero_samples_is_an_error() {
    let net = net(RuleSpec::swapout(Schedule::Constant(0.5)));
    let x = data().images;
    assert!(predict(
        &net,
        &x,
        InferenceMode::Stochastic {
            samples: 0,
            seed: 0
        },
        Reduction::MeanSoftmax
    )
    .is_err());
}
