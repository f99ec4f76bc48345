//! Invariant properties shared by the invariant and acceptance test targets.
#![allow(dead_code)]

use proptest::prelude::*;

use onda_core::autodiff::{BnMode, Graph};
use onda_core::detector::{DetectorConfig, DetectorState, Direction};
use onda_core::policy::{
    delta_cds, delta_cs, delta_hs, delta_scs, PolicyConfig, PolicyKind, PolicyState,
};
use onda_core::proto::{DistanceNorm, PrototypeBank, VarianceMode};
use onda_core::replay::ReplayBuffer;
use onda_core::segnet::{ema_update, init_model, promote_dynamic, ArchConfig};
use onda_core::self_training::{adapt_step, prior_blend, rectify, Hyperparams, OndaModels};
use onda_core::storm::{
    corrupt, make_streams, render, CorruptionKind, DomainSchedule, SceneSample, StreamConfig,
};
use onda_core::Tensor;

fn tensor(shape: [usize; 4], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random values for a `[n, c, h, w]` tensor.
fn values(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

/// Channel-softmax of random logits.
fn simplex(n: usize, c: usize, hw: usize) -> impl Strategy<Value = Tensor> {
    values(n * c * hw, -4.0, 4.0).prop_map(move |v| {
        let mut g = Graph::inference();
        let x = g.constant(tensor([n, c, 1, hw], v));
        let p = g.softmax_channel(x).unwrap();
        g.value(p).clone()
    })
}

fn pixel_sums(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = t.data();
    (0..n)
        .flat_map(|b| (0..hw).map(move |q| (0..c).map(|k| d[(b * c + k) * hw + q]).sum()))
        .collect()
}

fn small_arch() -> ArchConfig {
    ArchConfig {
        hidden: 3,
        feature_dim: 4,
        height: 4,
        width: 4,
        ..Default::default()
    }
}

fn bank(classes: usize, eta: Vec<f64>, sigma2: Vec<f64>) -> PrototypeBank {
    PrototypeBank {
        eta,
        sigma2,
        class_seen: vec![true; classes],
        class_counts: vec![1; classes],
        lambda: 0.9,
        norm: DistanceNorm::L2,
        variance_mode: VarianceMode::Frozen,
    }
}

fn detector(window: usize, threshold: f64, debounce: usize) -> DetectorState {
    DetectorState::new(DetectorConfig {
        window,
        threshold,
        debounce_len: debounce,
        normalized: false,
    })
    .unwrap()
}

/// A confidence stream of random steps with per-batch jitter.
fn z_stream() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0.3f64..0.95, 5usize..40), 1..8).prop_flat_map(|steps| {
        let len: usize = steps.iter().map(|s| s.1).sum();
        values(len, -0.01, 0.01).prop_map(move |jitter| {
            steps
                .iter()
                .flat_map(|&(level, n)| std::iter::repeat_n(level, n))
                .zip(jitter)
                .map(|(l, j)| l + j)
                .collect()
        })
    })
}

pub fn softmax_is_a_distribution() {
    proptest!(ProptestConfig::with_cases(48), |(p in simplex(2, 5, 6))| {
            prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for s in pixel_sums(&p) {
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
    });
}

pub fn frozen_bn_never_touches_running_stats() {
    proptest!(ProptestConfig::with_cases(48), |(seed in 0u64..1000, x in values(2 * 3 * 16, 0.0, 1.0))| {
            let mut model = init_model(&small_arch(), seed).unwrap();
            for b in &mut model.blocks {
                b.bn.running_mean.iter_mut().enumerate().for_each(|(i, m)| *m = 0.1 * i as f64);
            }
            let before = model.clone();
            let mut g = Graph::new();
            let xv = g.constant(tensor([2, 3, 4, 4], x));
            let fp = model.forward(&mut g, xv, BnMode::TrainFrozen).unwrap();
            let loss = g.mean(fp.probs).unwrap();
            g.backward(loss).unwrap();
            prop_assert!(fp.bn_stats.iter().all(Option::is_none));
            model.absorb_bn_stats(&fp.bn_stats);
            prop_assert!(model.blocks.iter().zip(&before.blocks).all(|(a, b)| a.bn.bit_eq(&b.bn)));
    });
}

pub fn forward_backward_is_deterministic() {
    proptest!(ProptestConfig::with_cases(48), |(seed in 0u64..1000, x in values(2 * 3 * 16, 0.0, 1.0))| {
            let model = init_model(&small_arch(), seed).unwrap();
            let x = tensor([2, 3, 4, 4], x);
            let run = || {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let fp = model.forward(&mut g, xv, BnMode::TrainUpdate).unwrap();
                let loss = g.mean(fp.probs).unwrap();
                let l2 = g.mul(loss, loss).unwrap();
                g.backward(l2).unwrap();
                fp.params.iter().flat_map(|&p| g.grad(p).unwrap().to_vec()).collect::<Vec<f64>>()
            };
            let (a, b) = (run(), run());
            prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    });
}

pub fn momentum_stays_in_hull_of_live_history() {
    proptest!(ProptestConfig::with_cases(48), |(seeds in prop::collection::vec(0u64..500, 1..6), m in 0.0f64..0.999)| {
            let arch = small_arch();
            let mut momentum = init_model(&arch, 10_000).unwrap();
            let mut history = vec![momentum.clone()];
            for s in seeds {
                let live = init_model(&arch, s).unwrap();
                ema_update(&mut momentum, &live, m).unwrap();
                history.push(live);
            }
            let params = momentum.params();
            for (i, p) in params.iter().enumerate() {
                for (j, v) in p.data().iter().enumerate() {
                    let past = history.iter().map(|h| h.params()[i].data()[j]);
                    let (lo, hi) = past.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
    });
}

pub fn promotion_leaves_live_and_static_alone() {
    proptest!(ProptestConfig::with_cases(48), |(a in 0u64..100, b in 100u64..200)| {
            let arch = small_arch();
            let live = init_model(&arch, a).unwrap();
            let stat = init_model(&arch, b).unwrap();
            let mut dynamic = stat.clone();
            let (l0, s0) = (live.clone(), stat.clone());
            promote_dynamic(&mut dynamic, &live);
            prop_assert!(live.bit_eq(&l0));
            prop_assert!(stat.bit_eq(&s0));
            prop_assert!(dynamic.params().iter().zip(live.params()).all(|(x, y)| x.bit_eq(y)));
    });
}

pub fn proto_predict_is_a_distribution() {
    proptest!(ProptestConfig::with_cases(48), |(f in values(2 * 4 * 6, -3.0, 3.0), eta in values(3 * 4, -2.0, 2.0), s2 in values(4, 0.05, 3.0))| {
            let p = bank(3, eta, s2).predict(&tensor([2, 4, 2, 3], f)).unwrap();
            prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for s in pixel_sums(&p) {
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
    });
}

pub fn proto_predict_is_scale_equivariant() {
    proptest!(ProptestConfig::with_cases(48), |(f in values(4 * 6, -3.0, 3.0), eta in values(3 * 4, -2.0, 2.0), s2 in values(4, 0.05, 3.0), a in 0.1f64..10.0)| {
            let base = bank(3, eta.clone(), s2.clone()).predict(&tensor([1, 4, 2, 3], f.clone())).unwrap();
            let scaled = bank(3, eta.iter().map(|e| e * a).collect(), s2.iter().map(|s| s * a * a).collect())
                .predict(&tensor([1, 4, 2, 3], f.iter().map(|x| x * a).collect()))
                .unwrap();
            prop_assert!(base.data().iter().zip(scaled.data()).all(|(x, y)| (x - y).abs() < 1e-9));
    });
}

pub fn unit_variance_is_euclidean() {
    proptest!(ProptestConfig::with_cases(48), |(f in values(4 * 3, -3.0, 3.0), eta in values(2 * 4, -2.0, 2.0))| {
            let p = bank(2, eta.clone(), vec![1.0; 4]).predict(&tensor([1, 4, 1, 3], f.clone())).unwrap();
            for q in 0..3 {
                let d: Vec<f64> = (0..2)
                    .map(|c| (0..4).map(|k| (f[k * 3 + q] - eta[c * 4 + k]).powi(2)).sum::<f64>().sqrt())
                    .collect();
                let z: f64 = d.iter().map(|x| (-x).exp()).sum();
                for c in 0..2 {
                    prop_assert!((p.data()[c * 3 + q] - (-d[c]).exp() / z).abs() < 1e-12);
                }
            }
    });
}

pub fn absent_classes_keep_their_prototypes() {
    proptest!(ProptestConfig::with_cases(48), |(f in values(4 * 6, -3.0, 3.0), eta in values(3 * 4, -2.0, 2.0), assign in prop::collection::vec(0usize..2, 6))| {
            let mut b = bank(3, eta, vec![1.0; 4]);
            b.class_seen[2] = false;
            let before = b.clone();
            b.update(&tensor([1, 4, 2, 3], f), &assign).unwrap();
            prop_assert_eq!(b.prototype(2), before.prototype(2));
            prop_assert!(!b.class_seen[2]);
    });
}

pub fn prior_blend_stays_on_simplex() {
    proptest!(ProptestConfig::with_cases(48), |(s in simplex(1, 4, 5), d in simplex(1, 4, 5), delta in 0.0f64..=1.0)| {
            let p = prior_blend(&s, &d, delta).unwrap();
            prop_assert!(p.data().iter().all(|&v| v >= 0.0));
            for x in pixel_sums(&p) {
                prop_assert!((x - 1.0).abs() < 1e-6);
            }
    });
}

pub fn rectify_ignores_pixel_rescaling() {
    proptest!(ProptestConfig::with_cases(48), |(p in simplex(1, 4, 5), w in simplex(1, 4, 5), scales in values(5, 0.01, 100.0))| {
            let scaled: Vec<f64> = p.data().iter().enumerate().map(|(i, v)| v * scales[i % 5]).collect();
            let a = rectify(&p, &w).unwrap();
            let b = rectify(&tensor([1, 4, 1, 5], scaled), &w).unwrap();
            prop_assert_eq!(a, b);
    });
}

pub fn replay_pass_leaves_bn_stats_alone() {
    proptest!(ProptestConfig::with_cases(48), |(seed in 0u64..200, r1 in values(2 * 3 * 16, 0.0, 1.0), r2 in values(2 * 3 * 16, 0.0, 1.0))| {
            let arch = small_arch();
            let source = init_model(&arch, seed).unwrap();
            let target = tensor([2, 3, 4, 4], (0..96).map(|i| (i as f64 * 0.37 + seed as f64).sin().abs()).collect());
            let b = bank(5, vec![0.0; 20], vec![1.0; 4]);
            let labels: Vec<usize> = (0..32).map(|i| i % 5).collect();
            let hp = Hyperparams { lr_online: 0.0, ..Default::default() };
            let stats = |replay: Vec<f64>| {
                let mut m = OndaModels::from_source(&source, b.clone());
                adapt_step(&mut m, &target, None, Some((&tensor([2, 3, 4, 4], replay), &labels)), 1.0, &hp).unwrap();
                m.live.blocks.iter().map(|blk| blk.bn.clone()).collect::<Vec<_>>()
            };
            let (x, y) = (stats(r1), stats(r2));
            prop_assert!(x.iter().zip(&y).all(|(a, b)| a.bit_eq(b)));
    });
}

pub fn mirrored_stream_mirrors_events() {
    proptest!(ProptestConfig::with_cases(48), |(z in z_stream())| {
            let c = 0.6;
            let mut a = detector(6, 2e-3, 2);
            let mut b = detector(6, 2e-3, 2);
            for &v in &z {
                a.push(v);
                b.push(2.0 * c - v);
            }
            prop_assert_eq!(a.events().len(), b.events().len());
            for (x, y) in a.events().iter().zip(b.events()) {
                prop_assert_eq!(x.t, y.t);
                prop_assert_eq!(x.direction.sign(), -y.direction.sign());
            }
    });
}

pub fn detector_warm_up_and_spacing() {
    proptest!(ProptestConfig::with_cases(48), |(z in z_stream(), n in 2usize..10, debounce in 1usize..6)| {
            let mut d = detector(n, 1e-3, debounce);
            for &v in &z {
                d.push(v);
            }
            prop_assert!(d.events().iter().all(|e| e.t > n));
            for dir in [Direction::Forward, Direction::Backward] {
                let ts: Vec<usize> = d.events().iter().filter(|e| e.direction == dir).map(|e| e.t).collect();
                prop_assert!(ts.windows(2).all(|w| w[1] - w[0] >= debounce));
            }
    });
}

pub fn smoothed_mean_is_local() {
    proptest!(ProptestConfig::with_cases(48), |(prefix in values(20, 0.0, 1.0), window in values(8, 0.0, 1.0), perm_seed in any::<u64>())| {
            let mut shuffled = prefix.clone();
            let len = shuffled.len();
            for i in (1..len).rev() {
                shuffled.swap(i, (perm_seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
            }
            let last_mu = |head: &[f64]| {
                let mut d = detector(8, 1.0, 1);
                head.iter().chain(&window).map(|&v| d.push(v).mu).last().flatten().unwrap()
            };
            prop_assert!((last_mu(&prefix) - last_mu(&shuffled)).abs() < 1e-12);
    });
}

pub fn policy_outputs_in_range() {
    proptest!(ProptestConfig::with_cases(48), |(mu in 0.0f64..1.0, t in 0.2f64..0.9, ind in -1i8..=1, prev in prop::bool::ANY)| {
            let prev = if prev { 1.0 } else { 0.0 };
            let cs = delta_cs(mu, t);
            let cds = delta_cds(ind, prev);
            let hs = delta_hs(mu, ind, prev, t, t - 0.08).unwrap();
            for d in [cs, cds, hs] {
                prop_assert!(d == 0.0 || d == 1.0);
            }
            let scs = delta_scs(mu, t, t - 0.05).unwrap();
            prop_assert!((0.0..=1.0).contains(&scs));
            if mu >= t || mu <= t - 0.08 {
                prop_assert_eq!(hs, cs);
            } else {
                prop_assert_eq!(hs, cds);
            }
    });
}

pub fn soft_switch_is_monotone() {
    proptest!(ProptestConfig::with_cases(48), |(a in 0.0f64..1.0, b in 0.0f64..1.0, t in 0.2f64..0.9)| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(delta_scs(lo, t, t - 0.05).unwrap() <= delta_scs(hi, t, t - 0.05).unwrap());
    });
}

pub fn fixed_priors_are_constant() {
    proptest!(ProptestConfig::with_cases(48), |(mus in prop::collection::vec(prop::option::of(0.0f64..1.0), 1..30))| {
            for (kind, want) in [(PolicyKind::StaticOnly, 1.0), (PolicyKind::DynamicOnly, 0.0)] {
                let mut p = PolicyState::new(PolicyConfig::from_base(kind, 0.5)).unwrap();
                for &mu in &mus {
                    prop_assert_eq!(p.delta(mu, None), want);
                }
            }
    });
}

pub fn replay_serves_unmodified_labels_once_per_epoch() {
    proptest!(ProptestConfig::with_cases(16), |(cap in 1usize..12, k in 1usize..5, seed in any::<u64>())| {
            let k = k.min(cap);
            let source: Vec<SceneSample> = (0..16u64)
                .map(|s| {
                    let (image, labels) = render(s, 6, 8);
                    SceneSample { image, labels, scene_seed: s, phi: 0.0 }
                })
                .collect();
            let buf = ReplayBuffer::build(&source, cap, seed).unwrap();
            let mut served = Vec::new();
            for step in 0..(3 * cap).div_ceil(k) {
                for s in buf.sample_batch(k, step).unwrap() {
                    prop_assert_eq!(&s.labels, &render(s.scene_seed, 6, 8).1);
                    served.push(s.scene_seed);
                }
            }
            for epoch in served.chunks_exact(cap).take(2) {
                let mut e = epoch.to_vec();
                e.sort_unstable();
                let mut ids: Vec<u64> = buf.samples().iter().map(|s| s.scene_seed).collect();
                ids.sort_unstable();
                prop_assert_eq!(e, ids);
            }
    });
}

pub fn corruption_keeps_labels_and_range() {
    proptest!(ProptestConfig::with_cases(16), |(seed in any::<u64>(), phi in 0.0f64..=1.0, fog in prop::bool::ANY)| {
            let kind = if fog { CorruptionKind::Fog } else { CorruptionKind::Rain };
            let (clean, labels) = render(seed, 12, 16);
            let x = corrupt(&clean, phi, seed ^ 0xABCD, kind);
            prop_assert_eq!(x.shape(), clean.shape());
            prop_assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(render(seed, 12, 16).1, labels);
    });
}

pub fn streams_are_pure() {
    proptest!(ProptestConfig::with_cases(16), |(seed in any::<u64>(), level in 0usize..6)| {
            let cfg = StreamConfig { height: 6, width: 8, source_train: 4, val_per_level: 2, batch_size: 2 };
            let sched = DomainSchedule::stationary(level, 3).unwrap();
            let a = make_streams(&sched, seed, cfg);
            let b = make_streams(&sched, seed, cfg);
            for t in 0..3 {
                let (x, y) = (a.target_batch(t).unwrap(), b.target_batch(t).unwrap());
                prop_assert!(x.images.bit_eq(&y.images));
                prop_assert_eq!(a.truth(t).unwrap().labels, b.truth(t).unwrap().labels);
            }
            for (va, vb) in a.val.iter().zip(&b.val) {
                for (sa, sb) in va.iter().zip(vb) {
                    prop_assert!(sa.image.bit_eq(&sb.image));
                    prop_assert_eq!(&sa.labels, &sb.labels);
                }
            }
    });
}

/// Every property, by name.
pub const ALL: &[(&str, fn())] = &[
    ("softmax_is_a_distribution", softmax_is_a_distribution),
    (
        "frozen_bn_never_touches_running_stats",
        frozen_bn_never_touches_running_stats,
    ),
    (
        "forward_backward_is_deterministic",
        forward_backward_is_deterministic,
    ),
    (
        "momentum_stays_in_hull_of_live_history",
        momentum_stays_in_hull_of_live_history,
    ),
    (
        "promotion_leaves_live_and_static_alone",
        promotion_leaves_live_and_static_alone,
    ),
    (
        "proto_predict_is_a_distribution",
        proto_predict_is_a_distribution,
    ),
    (
        "proto_predict_is_scale_equivariant",
        proto_predict_is_scale_equivariant,
    ),
    ("unit_variance_is_euclidean", unit_variance_is_euclidean),
    (
        "absent_classes_keep_their_prototypes",
        absent_classes_keep_their_prototypes,
    ),
    ("prior_blend_stays_on_simplex", prior_blend_stays_on_simplex),
    (
        "rectify_ignores_pixel_rescaling",
        rectify_ignores_pixel_rescaling,
    ),
    (
        "replay_pass_leaves_bn_stats_alone",
        replay_pass_leaves_bn_stats_alone,
    ),
    (
        "mirrored_stream_mirrors_events",
        mirrored_stream_mirrors_events,
    ),
    ("detector_warm_up_and_spacing", detector_warm_up_and_spacing),
    ("smoothed_mean_is_local", smoothed_mean_is_local),
    ("policy_outputs_in_range", policy_outputs_in_range),
    ("soft_switch_is_monotone", soft_switch_is_monotone),
    ("fixed_priors_are_constant", fixed_priors_are_constant),
    (
        "replay_serves_unmodified_labels_once_per_epoch",
        replay_serves_unmodified_labels_once_per_epoch,
    ),
    (
        "corruption_keeps_labels_and_range",
        corruption_keeps_labels_and_range,
    ),
    ("streams_are_pure", streams_are_pure),
];
