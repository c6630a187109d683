mod common;

use std::sync::OnceLock;

use fairlora::autodiff::{Graph, PenaltyTarget};
use fairlora::backbone::Backbone;
use fairlora::bundle::{bundle_len, encode_bundle};
use fairlora::data::{bayes_reference, generate, GenSpec};
use fairlora::lora::{
    compose, init_adapter_stack, r_norm, r_norm_value, r_orth, r_orth_value, LoraAdapter, LoraAdapterStack, Sign,
    StackMeta, StackVars,
};
use fairlora::optim::{balanced_batches, AdamW, AdamWConfig};
use fairlora::rng::Stream;
use fairlora::tensor::Tensor;
use proptest::prelude::*;

fn base() -> &'static Backbone {
    static BASE: OnceLock<Backbone> = OnceLock::new();
    BASE.get_or_init(common::small_backbone)
}

#[test]
fn adamw_reaches_quadratic_minimum() {
    // f(w) = ½ wᵀ diag(q) w − bᵀw, minimized at w* = b / q.
    let q = [1.0, 2.0, 4.0, 0.5];
    let b = [0.3, -1.2, 0.8, 0.1];
    let grad = |w: &Tensor| Tensor::new(1, 4, (0..4).map(|i| q[i] * w.data()[i] - b[i]).collect()).unwrap();
    let mut w = [Tensor::new(1, 4, vec![1.0, 1.0, -1.0, 2.0]).unwrap()];
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    for _ in 0..500 {
        let g = [grad(&w[0])];
        opt.step(&mut w, &g, 0.1).unwrap();
    }
    let norm = grad(&w[0]).data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-6, "gradient norm {norm:e}");
    for i in 0..4 {
        assert!((w[0].data()[i] - b[i] / q[i]).abs() < 1e-6);
    }
}

#[test]
fn weight_decay_is_decoupled() {
    // Zero gradient leaves the moments at zero, so only the decay moves w.
    let mut w = [Tensor::new(1, 3, vec![1.0, -2.0, 0.5]).unwrap()];
    let before = w[0].clone();
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.1,
        weight_decay: 0.2,
        ..AdamWConfig::default()
    });
    opt.step(&mut w, &[Tensor::zeros(1, 3)], 0.1).unwrap();
    for (a, b) in w[0].data().iter().zip(before.data()) {
        assert!((a - b * (1.0 - 0.1 * 0.2)).abs() < 1e-15);
    }
}

#[test]
fn sampler_balances_ninety_ten() {
    let labels: Vec<usize> = (0..1000).map(|i| usize::from(i % 10 == 0)).collect();
    let mut rng = Stream::new(5, "sampler");
    let mut minority = 0usize;
    let mut total = 0usize;
    while total < 10_000 {
        for batch in balanced_batches(&labels, 50, &mut rng).unwrap() {
            minority += batch.iter().filter(|&&i| labels[i] == 1).count();
            total += batch.len();
        }
    }
    let frac = minority as f64 / total as f64;
    assert!((frac - 0.5).abs() < 0.02, "{frac}");
}

fn stack_from(layers: &[(&str, usize, usize)], rank: usize, rng: &mut Stream) -> LoraAdapterStack {
    let adapters = layers
        .iter()
        .map(|&(id, d, k)| LoraAdapter {
            layer_id: id.to_string(),
            a: Tensor::randn(d, rank, 1.0, rng),
            b: Tensor::randn(rank, k, 1.0, rng),
            rank,
            alpha: 2.0 * rank as f64,
        })
        .collect();
    let meta = StackMeta {
        rank,
        alpha: 2.0 * rank as f64,
        seed: 0,
        strategy: String::new(),
    };
    LoraAdapterStack::from_adapters(adapters, meta).unwrap()
}

#[test]
fn bundle_size_matches_format_arithmetic() {
    let mut rng = Stream::new(0, "size");
    let s = stack_from(&[("enc.q", 16, 32), ("mid", 32, 8)], 3, &mut rng);
    // magic + version + rank + alpha + count, then per layer a
    // length-prefixed name, d, k and the f32 factors.
    let header = 4 + 4 + 4 + 4 + 4;
    let names = (4 + 5) + (4 + 3);
    let dims = 2 * 8;
    let factors = 4 * 3 * (16 + 32) + 4 * 3 * (32 + 8);
    assert_eq!(encode_bundle(&s).len(), header + names + dims + factors);
    assert_eq!(bundle_len(&s), header + names + dims + factors);
}

#[test]
fn node_with_two_consumers_accumulates() {
    // f(x) = sum(x·x) + sum(3x), with x feeding a matmul twice and a scale.
    let mut rng = Stream::new(9, "dag");
    for _ in 0..20 {
        let x0 = Tensor::randn(3, 3, 1.0, &mut rng);
        let f = |x: &Tensor| -> (f64, Tensor) {
            let mut g = Graph::new();
            let x = g.param(x.clone());
            let sq = g.matmul(x, x).unwrap();
            let lin = g.scale(x, 3.0);
            let a = g.sum(sq);
            let b = g.sum(lin);
            let out = g.add(a, b).unwrap();
            g.backward(out).unwrap();
            (g.value(out).item(), g.grad(x))
        };
        let (_, grad) = f(&x0);
        let h = 1e-5;
        for i in 0..9 {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let num = (f(&p).0 - f(&m).0) / (2.0 * h);
            let an = grad.data()[i];
            assert!((an - num).abs() / num.abs().max(1.0) < 1e-6, "{an} vs {num}");
        }
    }
}

#[test]
fn r_orth_never_moves_sensitive_factors() {
    let mut rng = Stream::new(4, "orth");
    let layers = [("a", 6, 5), ("b", 4, 7)];
    let task = stack_from(&layers, 3, &mut rng);
    let sen = stack_from(&layers, 3, &mut rng);
    for target in [PenaltyTarget::Identity, PenaltyTarget::Zero] {
        let mut g = Graph::new();
        let tv = StackVars::bind(&mut g, &task, true);
        let sv = StackVars::bind(&mut g, &sen, true);
        let loss = r_orth(&mut g, &tv, &sv, target).unwrap();
        g.backward(loss).unwrap();
        for &(a, b) in sv.layers.values() {
            assert!(g.grad(a).data().iter().all(|&v| v == 0.0));
            assert!(g.grad(b).data().iter().all(|&v| v == 0.0));
        }
        assert!(tv
            .layers
            .values()
            .any(|&(a, _)| g.grad(a).data().iter().any(|&v| v != 0.0)));
    }
}

#[test]
fn regularizers_vanish_at_their_zero_configurations() {
    // R_norm is zero for orthonormal A columns and orthonormal B rows.
    let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]).unwrap();
    let meta = StackMeta {
        rank: 2,
        alpha: 4.0,
        seed: 0,
        strategy: String::new(),
    };
    let ortho = LoraAdapterStack::from_adapters(
        vec![LoraAdapter {
            layer_id: "l".into(),
            a: a.clone(),
            b: b.clone(),
            rank: 2,
            alpha: 4.0,
        }],
        meta.clone(),
    )
    .unwrap();
    assert_eq!(r_norm_value(&ortho).unwrap(), 0.0);
    // Identity target: the cross Grams equal I when the stacks coincide.
    assert_eq!(r_orth_value(&ortho, &ortho, PenaltyTarget::Identity).unwrap(), 0.0);
    // Zero target: factors in complementary subspaces are orthogonal.
    let a2 = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let b2 = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
    let other = LoraAdapterStack::from_adapters(
        vec![LoraAdapter {
            layer_id: "l".into(),
            a: a2,
            b: b2,
            rank: 2,
            alpha: 4.0,
        }],
        meta,
    )
    .unwrap();
    assert_eq!(r_orth_value(&ortho, &other, PenaltyTarget::Zero).unwrap(), 0.0);
}

#[test]
fn r_norm_graph_and_value_agree() {
    let mut rng = Stream::new(8, "rn");
    let s = stack_from(&[("x", 5, 4)], 2, &mut rng);
    let mut g = Graph::new();
    let v = StackVars::bind(&mut g, &s, true);
    let out = r_norm(&mut g, &v).unwrap();
    assert_eq!(g.value(out).item(), r_norm_value(&s).unwrap());
}

#[test]
fn parties_never_share_rows_and_g_matches_prevalence() {
    for seed in 0..5 {
        let spec = GenSpec {
            n: 4000,
            group_prevalence: 0.5,
            seed,
            ..GenSpec::default()
        };
        let data = generate(&spec).unwrap();
        assert!(data.parties_disjoint());
        let n = data.co_train.len() as f64;
        let ones = data.co_train.labels().iter().sum::<usize>() as f64;
        // 99.9% binomial interval.
        let half = 3.29 * (0.25 / n).sqrt();
        assert!((ones / n - 0.5).abs() < half, "seed {seed}: {}", ones / n);
    }
}

#[test]
fn bayes_reference_references() {
    let noisy = bayes_reference(
        &GenSpec {
            label_noise: 0.5,
            ..GenSpec::default()
        },
        100_000,
    )
    .unwrap();
    assert!((noisy.accuracy.mean - 0.5).abs() < noisy.accuracy.ci95 * 1.5);

    let fair = bayes_reference(
        &GenSpec {
            beta: 0.0,
            ..GenSpec::default()
        },
        100_000,
    )
    .unwrap();
    assert!(fair.dp_diff.mean < 0.01, "{:?}", fair.dp_diff);

    let biased = bayes_reference(&GenSpec::default(), 100_000).unwrap();
    assert!(biased.accuracy.ci95 > 0.0 && biased.accuracy.ci95 < 0.005);
    assert!(biased.dp_diff.mean > 0.1, "{:?}", biased.dp_diff);
    assert!(biased.accuracy.mean > fair.accuracy.mean - 0.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn compose_is_linear_in_coefficient(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = Stream::new(seed, "lin");
        let mut s = init_adapter_stack(&base().attachment_points(), 3, 6.0, 0.5, seed, &mut rng).unwrap();
        for ad in s.iter_mut() {
            ad.b = Tensor::randn(ad.b.rows(), ad.b.cols(), 0.5, &mut rng);
        }
        let two = compose(&compose(base().weights(), &s, Sign::Plus, a).unwrap(), &s, Sign::Plus, b).unwrap();
        let one = compose(base().weights(), &s, Sign::Plus, a + b).unwrap();
        for (name, e) in one.iter() {
            let d = e.tensor.data().iter().zip(two.get(name).unwrap().data())
                .map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(d <= 1e-12, "{name}: {d:e}");
        }
    }

    #[test]
    fn regularizers_are_nonnegative(seed in 0u64..1000, rank in 1usize..5, sigma in 0.0f64..3.0) {
        let mut rng = Stream::new(seed, "nonneg");
        let layers = [("p", 7, 6), ("q", 5, 9)];
        let mut t = stack_from(&layers, rank, &mut rng);
        let s = stack_from(&layers, rank, &mut rng);
        for ad in t.iter_mut() {
            ad.a = ad.a.scale(sigma);
        }
        prop_assert!(r_norm_value(&t).unwrap() >= 0.0);
        prop_assert!(r_orth_value(&t, &s, PenaltyTarget::Identity).unwrap() >= 0.0);
        prop_assert!(r_orth_value(&t, &s, PenaltyTarget::Zero).unwrap() >= 0.0);
    }
}
