use proptest::prelude::*;
use swapout::rules::{
    apply_rule, sample_masks, Granularity, MaskSet, MaskSharing, RuleKind, Schedule,
    StochasticRule, StreamKey,
};
use swapout::tensor::Tensor;

fn tensor(shape: &[usize], values: &[f64]) -> Tensor {
    Tensor::new(shape, values.to_vec()).unwrap()
}

proptest! {
    #[test]
    fn pair_reductions_hold_elementwise(
        x in prop::collection::vec(-5.0f64..5.0, 8),
        fx in prop::collection::vec(-5.0f64..5.0, 8),
        theta in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let (x, fx) = (tensor(&[2, 4], &x), tensor(&[2, 4], &fx));
        let key = StreamKey::training(seed, 1, 2);
        let sharing = MaskSharing::PerExample;

        let full = StochasticRule::swapout(1.0, 1.0).unwrap();
        let m = sample_masks(&full, x.shape(), key, sharing).unwrap();
        prop_assert_eq!(apply_rule(&full, &x, &fx, &m).unwrap(), x.add(&fx).unwrap());

        let dropout = StochasticRule::dropout(theta).unwrap();
        let pair = StochasticRule::swapout(0.0, theta).unwrap();
        let a = apply_rule(&dropout, &x, &fx, &sample_masks(&dropout, x.shape(), key, sharing).unwrap()).unwrap();
        let b = apply_rule(&pair, &x, &fx, &sample_masks(&pair, x.shape(), key, sharing).unwrap()).unwrap();
        prop_assert_eq!(a, b);

        let layer = StochasticRule::layer_dropout(theta).unwrap();
        let pair = StochasticRule::swapout(1.0, theta).unwrap().with_granularity(Granularity::PerBlock).unwrap();
        let a = apply_rule(&layer, &x, &fx, &sample_masks(&layer, x.shape(), key, sharing).unwrap()).unwrap();
        let b = apply_rule(&pair, &x, &fx, &sample_masks(&pair, x.shape(), key, sharing).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pair_output_is_one_of_four_values(
        x in prop::collection::vec(-5.0f64..5.0, 6),
        fx in prop::collection::vec(-5.0f64..5.0, 6),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let rule = StochasticRule::swapout(t1, t2).unwrap();
        let (xt, ft) = (tensor(&[1, 6], &x), tensor(&[1, 6], &fx));
        let m = sample_masks(&rule, xt.shape(), StreamKey::training(seed, 0, 0), MaskSharing::PerExample).unwrap();
        let y = apply_rule(&rule, &xt, &ft, &m).unwrap();
        for i in 0..6 {
            let options = [0.0, x[i], fx[i], x[i] + fx[i]];
            prop_assert!(options.contains(&y.data()[i]));
        }
    }

    #[test]
    fn linear_schedule_stays_between_endpoints(a in 0.0f64..=1.0, b in 0.0f64..=1.0, n in 1usize..40) {
        let s = Schedule::Linear { start: a, end: b };
        let first = s.resolve(0, n).unwrap();
        prop_assert_eq!(first, a);
        if n > 1 {
            prop_assert!((s.resolve(n - 1, n).unwrap() - b).abs() < 1e-12);
        }
        for i in 0..n {
            let v = s.resolve(i, n).unwrap();
            prop_assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
        }
    }
}

#[test]
fn mask_frequency_matches_theta() {
    let rule = StochasticRule::swapout(0.3, 0.8).unwrap();
    let m = sample_masks(
        &rule,
        &[50, 400],
        StreamKey::training(9, 0, 0),
        MaskSharing::PerExample,
    )
    .unwrap();
    let n = 20_000.0;
    for (mask, theta) in m.masks.iter().zip([0.3, 0.8]) {
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let freq = mask.sum() / n;
        let se = (theta * (1.0 - theta) / n).sqrt();
        assert!((freq - theta).abs() < 4.0 * se, "{freq} vs {theta}");
    }
    // the two streams are independent draws
    assert_ne!(m.masks[0], m.masks[1].map(|v| v));
}

#[test]
fn masks_are_reproducible_and_keyed() {
    let rule = StochasticRule::swapout(0.5, 0.5).unwrap();
    let key = StreamKey::training(3, 4, 5);
    let a = sample_masks(&rule, &[4, 10], key, MaskSharing::PerExample).unwrap();
    let b = sample_masks(&rule, &[4, 10], key, MaskSharing::PerExample).unwrap();
    assert_eq!(a.masks, b.masks);
    let c = sample_masks(
        &rule,
        &[4, 10],
        StreamKey::training(3, 4, 6),
        MaskSharing::PerExample,
    )
    .unwrap();
    assert_ne!(a.masks, c.masks);
    let d = sample_masks(&rule, &[4, 10], key.for_block(1), MaskSharing::PerExample).unwrap();
    assert_ne!(a.masks, d.masks);
}

#[test]
fn per_batch_sharing_repeats_across_examples() {
    let rule = StochasticRule::dropout(0.5).unwrap();
    let m = sample_masks(
        &rule,
        &[3, 2, 4, 4],
        StreamKey::training(1, 0, 0),
        MaskSharing::PerBatch,
    )
    .unwrap();
    let per = 32;
    let d = m.masks[0].data();
    assert_eq!(&d[..per], &d[per..2 * per]);
    assert_eq!(&d[..per], &d[2 * per..]);
}

#[test]
fn per_channel_masks_are_constant_over_space() {
    let rule = StochasticRule::dropout(0.5)
        .unwrap()
        .with_granularity(Granularity::PerChannel)
        .unwrap();
    let m = sample_masks(
        &rule,
        &[2, 5, 3, 3],
        StreamKey::training(2, 0, 0),
        MaskSharing::PerExample,
    )
    .unwrap();
    for plane in m.masks[0].data().chunks(9) {
        assert!(plane.iter().all(|&v| v == plane[0]));
    }
}

#[test]
fn deterministic_transform_is_the_expectation() {
    let x = tensor(&[1, 3], &[1.0, -2.0, 0.5]);
    let fx = tensor(&[1, 3], &[3.0, 0.25, -1.0]);
    let rule = StochasticRule::swapout(0.3, 0.6).unwrap();
    // average of the four mask outcomes weighted by their probabilities
    let mut expected = Tensor::zeros(&[1, 3]);
    for (a, b) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
        let p = (if a == 1.0 { 0.3 } else { 0.7 }) * (if b == 1.0 { 0.6 } else { 0.4 });
        let masks = MaskSet::fixed(
            vec![Tensor::full(&[1, 3], a), Tensor::full(&[1, 3], b)],
            vec![0.3, 0.6],
        );
        expected
            .add_assign(&apply_rule(&rule, &x, &fx, &masks).unwrap().scale(p))
            .unwrap();
    }
    let det = rule.deterministic_transform().apply(&[&x, &fx]).unwrap();
    for (d, e) in det.data().iter().zip(expected.data()) {
        assert!((d - e).abs() < 1e-12);
    }
}

#[test]
fn invalid_rules_are_rejected() {
    assert!(StochasticRule::swapout(1.2, 0.5).is_err());
    assert!(StochasticRule::dropout(f64::NAN).is_err());
    assert!(StochasticRule::new(RuleKind::SwapoutPair, vec![0.5], Granularity::PerUnit).is_err());
    assert!("linear:0.5".parse::<Schedule>().is_err());
    assert!("constant:2".parse::<Schedule>().is_err());
    assert!(Schedule::Constant(-0.1).validate().is_err());
}
