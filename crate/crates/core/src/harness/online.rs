//! Streaming adaptation over a deployment schedule.

use serde::{Deserialize, Serialize};

use super::train::{evaluate_levels, Pretrained};
use super::RunConfig;
use crate::detector::{batch_confidence, DetectorConfig, DetectorState, SwitchEvent};
use crate::error::Result;
use crate::policy::{PolicyConfig, PolicyState, Promotion};
use crate::replay::ReplayBuffer;
use crate::segnet::ModelCheckpoint;
use crate::self_training::{adapt_step, OndaModels, StepReport};
use crate::storm::streams::derive_seed;
use crate::storm::{batch_of, miou, Benchmark, ConfusionMatrix, DomainSchedule, Pass};

const TAG_CALIBRATION: u64 = 0xCA11;

/// Evaluation on every level at the end of one schedule segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEval {
    pub segment: usize,
    pub level: usize,
    pub end_step: usize,
    pub pass: Pass,
    pub confusions: Vec<ConfusionMatrix>,
    pub miou: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub evals: Vec<SegmentEval>,
    pub steps: Vec<StepReport>,
    pub events: Vec<SwitchEvent>,
    pub promotions: Vec<Promotion>,
    /// Training objective per batch.
    pub objective: Vec<f64>,
    pub policy: Option<PolicyConfig>,
    pub models: Option<OndaModels>,
    /// Final adapted network for runs without the full model set.
    pub final_model: ModelCheckpoint,
}

/// Segments up to the first visit of the hardest level are forward, the rest backward.
pub fn segment_passes(schedule: &DomainSchedule) -> Vec<Pass> {
    let peak = schedule
        .segments
        .iter()
        .map(|s| s.0)
        .max()
        .expect("schedules have segments");
    let first_peak = schedule
        .segments
        .iter()
        .position(|s| s.0 == peak)
        .unwrap_or(0);
    (0..schedule.segments.len())
        .map(|i| {
            if i <= first_peak {
                Pass::Forward
            } else {
                Pass::Backward
            }
        })
        .collect()
}

/// Index of the segment that ends at batch `t`, if any.
pub(crate) fn segment_ending_at(schedule: &DomainSchedule, t: usize) -> Option<usize> {
    let i = schedule.segment_of(t)?;
    let end = schedule.segment_starts()[i] + schedule.segments[i].1 - 1;
    (t == end).then_some(i)
}

pub(crate) fn segment_eval(
    model: &ModelCheckpoint,
    bench: &Benchmark,
    segment: usize,
    t: usize,
    passes: &[Pass],
) -> Result<SegmentEval> {
    let confusions = evaluate_levels(model, bench)?;
    let miou = confusions
        .iter()
        .map(|c| miou(c).map(|r| r.miou))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentEval {
        segment,
        level: bench.schedule.segments[segment].0,
        end_step: t,
        pass: passes[segment],
        confusions,
        miou,
    })
}

/// Confidence threshold at `percentile` of the smoothed static confidence on a clean stream.
pub fn calibrate_threshold(
    static_model: &ModelCheckpoint,
    cfg: &RunConfig,
    detector: DetectorConfig,
) -> Result<f64> {
    let schedule = DomainSchedule::stationary(0, cfg.calibration_batches)?;
    let bench = Benchmark {
        config: cfg.stream,
        schedule,
        split_seed: derive_seed(cfg.seeds.data, TAG_CALIBRATION, 0),
        source_train: Vec::new(),
        val: Vec::new(),
    };
    let mut det = DetectorState::new(detector)?;
    let mut mus = Vec::new();
    for b in bench.target_stream() {
        let z = batch_confidence(&static_model.predict(&b.images)?)?;
        if let Some(mu) = det.push(z).mu {
            mus.push(mu);
        }
    }
    if mus.is_empty() {
        return Err(crate::error::OndaError::InvalidArgument(
            "calibration stream shorter than the detector window".into(),
        ));
    }
    Ok(percentile(&mut mus, cfg.policy.percentile))
}

/// Linear-interpolated percentile in `[0, 100]`.
pub(crate) fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Streams the schedule through the adaptation step. `init` continues from a
/// previous run's models instead of the pretrained source.
pub fn run_onda(
    cfg: &RunConfig,
    bench: &Benchmark,
    pre: &Pretrained,
    init: Option<OndaModels>,
) -> Result<OnlineRun> {
    let mut models = init.unwrap_or_else(|| OndaModels::from_source(&pre.model, pre.bank.clone()));
    let t_c = match cfg.policy.t_c {
        Some(t) => t,
        None => calibrate_threshold(&models.static_model, cfg, cfg.detector)?,
    };
    let policy_cfg = PolicyConfig::from_base(cfg.policy.kind, t_c);
    let mut policy = PolicyState::new(policy_cfg)?;
    let mut detector = DetectorState::new(cfg.detector)?;
    let replay = ReplayBuffer::build(&bench.source_train, cfg.buffer, cfg.seeds.buffer)?;
    let hp = cfg.hyper;
    let passes = segment_passes(&bench.schedule);
    let mut steps = Vec::with_capacity(bench.schedule.total_batches());
    let mut evals = Vec::new();
    let mut objective = Vec::with_capacity(steps.capacity());

    for batch in bench.target_stream() {
        let t = batch.index;
        let static_probs = models.static_model.predict(&batch.images)?;
        let z = batch_confidence(&static_probs)?;
        let obs = detector.push(z);
        if let Some(e) = &obs.event {
            policy.on_event(e, &models.live, &mut models.dynamic);
        }
        let delta = policy.delta(obs.mu, obs.event.as_ref());
        let rb = if replay.is_empty() {
            None
        } else {
            Some(batch_of(
                &replay.sample_batch(hp.batch_replay.min(replay.len()), t)?,
            ))
        };
        let losses = adapt_step(
            &mut models,
            &batch.images,
            Some(&static_probs),
            rb.as_ref().map(|(i, l)| (i, l.as_slice())),
            delta,
            &hp,
        )?;
        objective.push(losses.total);
        steps.push(StepReport {
            step: t,
            domain_truth: bench.schedule.level_at(t).expect("batch within schedule"),
            z,
            mu: obs.mu,
            indicator: obs.indicator,
            delta,
            loss_task: losses.loss_task,
            loss_pseudo: losses.loss_pseudo,
            loss_reg: losses.loss_reg,
        });
        if let Some(seg) = segment_ending_at(&bench.schedule, t) {
            evals.push(segment_eval(&models.live, bench, seg, t, &passes)?);
        }
    }
    Ok(OnlineRun {
        evals,
        steps,
        events: detector.events().to_vec(),
        promotions: policy.promotions().to_vec(),
        objective,
        policy: Some(policy_cfg),
        final_model: models.live.clone(),
        models: Some(models),
    })
}
