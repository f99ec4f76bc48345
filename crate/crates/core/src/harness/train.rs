//! Supervised source training, oracle fine-tuning, offline adaptation and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{RunConfig, TrainSchedule};
use crate::autodiff::{BnMode, Graph};
use crate::error::Result;
use crate::proto::{argmax_channel, PrototypeAccumulator, PrototypeBank, PROTO_LAMBDA};
use crate::replay::ReplayBuffer;
use crate::segnet::{init_model, ModelCheckpoint, Role};
use crate::self_training::{adapt_step, loss_task, OndaModels};
use crate::storm::streams::derive_seed;
use crate::storm::{batch_of, miou, Benchmark, ConfusionMatrix, SceneSample};

const EVAL_BATCH: usize = 10;
const TAG_SHUFFLE: u64 = 0x5348_5546;

/// Pixel confusion of `model` over `samples`.
pub fn evaluate(model: &ModelCheckpoint, samples: &[SceneSample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.arch.num_classes);
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let (x, labels) = batch_of(&refs);
        let pred = argmax_channel(&model.predict(&x)?);
        cm.add(&pred, &labels)?;
    }
    Ok(cm)
}

/// One confusion matrix per validation level.
pub fn evaluate_levels(model: &ModelCheckpoint, bench: &Benchmark) -> Result<Vec<ConfusionMatrix>> {
    bench.val.iter().map(|v| evaluate(model, v)).collect()
}

/// Prototypes and shared variance from `model` features on labeled samples.
pub fn source_bank(model: &ModelCheckpoint, samples: &[SceneSample]) -> Result<PrototypeBank> {
    let mut acc = PrototypeAccumulator::new(model.arch.num_classes, model.arch.feature_dim);
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let (x, labels) = batch_of(&refs);
        let (features, _) = model.infer(&x)?;
        acc.add(&features, &labels)?;
    }
    acc.finish(PROTO_LAMBDA)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        TAG_SHUFFLE,
        epoch as u64,
    )));
    order
}

/// Cross-entropy training over shuffled epochs; returns the mean loss per epoch.
fn supervised_epochs(
    model: &mut ModelCheckpoint,
    samples: &[SceneSample],
    sched: &TrainSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(sched.epochs);
    for epoch in 0..sched.epochs {
        let lr = sched.lr_at(epoch);
        let order = epoch_order(samples.len(), seed, epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(sched.batch) {
            let refs: Vec<&SceneSample> = idx.iter().map(|&i| &samples[i]).collect();
            let (x, labels) = batch_of(&refs);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let fp = model.forward(&mut g, xv, BnMode::TrainUpdate)?;
            let loss = loss_task(&mut g, fp.probs, &labels)?;
            total += g.value(loss).data()[0];
            batches += 1;
            g.backward(loss)?;
            model.collect_grads(&g, &fp.params)?;
            model.sgd(lr, None);
            model.absorb_bn_stats(&fp.bn_stats);
        }
        trace.push(total / batches as f64);
    }
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: ModelCheckpoint,
    pub bank: PrototypeBank,
    pub source_val_miou: f64,
    pub loss_trace: Vec<f64>,
}

/// Trains the source model from scratch and initializes the prototype bank.
pub fn pretrain(cfg: &RunConfig, bench: &Benchmark) -> Result<Pretrained> {
    let mut model = init_model(&cfg.arch, cfg.seeds.model)?.with_role(Role::Static);
    let loss_trace = supervised_epochs(
        &mut model,
        &bench.source_train,
        &cfg.pretrain,
        cfg.seeds.model,
    )?;
    let bank = source_bank(&model, &bench.source_train)?;
    let source_val_miou = miou(&evaluate(&model, &bench.val[0])?)?.miou;
    Ok(Pretrained {
        model,
        bank,
        source_val_miou,
        loss_trace,
    })
}

fn training_levels(cfg: &RunConfig, bench: &Benchmark) -> Vec<usize> {
    match cfg.level {
        Some(l) => vec![l],
        None => (0..bench.schedule.levels.len()).collect(),
    }
}

fn level_sets(cfg: &RunConfig, bench: &Benchmark) -> Vec<SceneSample> {
    training_levels(cfg, bench)
        .into_iter()
        .flat_map(|l| bench.level_set(l, cfg.offline_frames))
        .collect()
}

/// Oracle fine-tuning of the source model on labeled target frames.
pub fn run_supervised(
    cfg: &RunConfig,
    bench: &Benchmark,
    source: &ModelCheckpoint,
) -> Result<ModelCheckpoint> {
    let mut model = source.clone().with_role(Role::Live);
    let sched = TrainSchedule {
        lr: cfg.pretrain.lr,
        ..cfg.offline
    };
    supervised_epochs(
        &mut model,
        &level_sets(cfg, bench),
        &sched,
        cfg.seeds.model ^ 0x5u64,
    )?;
    Ok(model)
}

/// Offline adaptation on a fully available unlabeled target set with the
/// online loss stack, the static prior and target-initialized prototypes.
pub fn run_offline(
    cfg: &RunConfig,
    bench: &Benchmark,
    pre: &Pretrained,
) -> Result<ModelCheckpoint> {
    let target = level_sets(cfg, bench);
    let mut acc = PrototypeAccumulator::new(cfg.arch.num_classes, cfg.arch.feature_dim);
    for chunk in target.chunks(EVAL_BATCH) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let (x, _) = batch_of(&refs);
        let (features, probs) = pre.model.infer(&x)?;
        acc.add(&features, &argmax_channel(&probs))?;
    }
    let bank = acc.finish_or(PROTO_LAMBDA, &pre.bank)?;
    let mut models = OndaModels::from_source(&pre.model, bank);
    let replay = ReplayBuffer::build(&bench.source_train, cfg.buffer, cfg.seeds.buffer)?;
    let mut hp = cfg.hyper;
    let mut step = 0;
    for epoch in 0..cfg.offline.epochs {
        hp.lr_online = cfg.offline.lr_at(epoch);
        for idx in epoch_order(target.len(), cfg.seeds.data, epoch).chunks(cfg.offline.batch) {
            let refs: Vec<&SceneSample> = idx.iter().map(|&i| &target[i]).collect();
            let (x, _) = batch_of(&refs);
            let rb = if replay.is_empty() {
                None
            } else {
                Some(batch_of(
                    &replay.sample_batch(hp.batch_replay.min(replay.len()), step)?,
                ))
            };
            adapt_step(
                &mut models,
                &x,
                None,
                rb.as_ref().map(|(i, l)| (i, l.as_slice())),
                1.0,
                &hp,
            )?;
            step += 1;
        }
    }
    Ok(models.live)
}
