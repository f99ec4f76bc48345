use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use onda_bench::{arch, batch, models, samples};
use onda_core::autodiff::{BnMode, Graph};
use onda_core::detector::{batch_confidence, DetectorConfig, DetectorState};
use onda_core::proto::argmax_channel;
use onda_core::self_training::{adapt_step, loss_task, Hyperparams};
use onda_core::storm::{corrupt, render, CorruptionKind};

fn model_passes(c: &mut Criterion) {
    for (h, w) in [(24, 32), (48, 64)] {
        let a = arch(h, w);
        let m = models(&a);
        let (x, labels) = batch(&samples(4, 0.3, &a));
        c.bench_function(&format!("predict {h}x{w} b4"), |b| {
            b.iter(|| m.live.predict(black_box(&x)).unwrap())
        });
        c.bench_function(&format!("forward+backward {h}x{w} b4"), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let fp = m.live.forward(&mut g, xv, BnMode::TrainUpdate).unwrap();
                let loss = loss_task(&mut g, fp.probs, &labels).unwrap();
                g.backward(loss).unwrap();
                black_box(g.grad(fp.params[0]).is_some())
            })
        });
    }
}

fn adaptation_step(c: &mut Criterion) {
    for (h, w) in [(24, 32), (48, 64)] {
        let a = arch(h, w);
        let base = models(&a);
        let (target, _) = batch(&samples(4, 0.6, &a));
        let (replay, labels) = batch(&samples(4, 0.0, &a));
        let static_probs = base.static_model.predict(&target).unwrap();
        let hp = Hyperparams::default();
        c.bench_function(&format!("adapt_step {h}x{w}"), |b| {
            b.iter_batched(
                || base.clone(),
                |mut m| {
                    adapt_step(
                        &mut m,
                        &target,
                        Some(&static_probs),
                        Some((&replay, &labels)),
                        0.5,
                        &hp,
                    )
                    .unwrap()
                },
                BatchSize::SmallInput,
            )
        });
    }
}

fn prototypes(c: &mut Criterion) {
    let a = arch(48, 64);
    let m = models(&a);
    let (x, _) = batch(&samples(4, 0.3, &a));
    let (features, probs) = m.momentum.infer(&x).unwrap();
    let assign = argmax_channel(&probs);
    c.bench_function("prototype predict 48x64 b4", |b| {
        b.iter(|| m.bank.predict(black_box(&features)).unwrap())
    });
    c.bench_function("prototype update 48x64 b4", |b| {
        b.iter_batched(
            || m.bank.clone(),
            |mut bank| bank.update(&features, &assign).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn stream(c: &mut Criterion) {
    c.bench_function("render+corrupt 48x64", |b| {
        let mut s = 0u64;
        b.iter(|| {
            s += 1;
            let (img, _) = render(s, 48, 64);
            corrupt(&img, 0.9, s, CorruptionKind::Rain)
        })
    });
    let a = arch(24, 32);
    let m = models(&a);
    let (x, _) = batch(&samples(4, 0.3, &a));
    let probs = m.static_model.predict(&x).unwrap();
    c.bench_function("batch confidence 24x32 b4", |b| {
        b.iter(|| batch_confidence(black_box(&probs)).unwrap())
    });
    c.bench_function("detector push x1000", |b| {
        b.iter(|| {
            let mut d = DetectorState::new(DetectorConfig::default()).unwrap();
            for t in 0..1000 {
                d.push(0.9 - 1e-4 * (t as f64 % 17.0));
            }
            d.events().len()
        })
    });
}

criterion_group!(benches, model_passes, adaptation_step, prototypes, stream);
criterion_main!(benches);
