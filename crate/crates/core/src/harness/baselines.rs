//! Test-time adaptation baselines sharing the online evaluation protocol.

use serde::{Deserialize, Serialize};

use super::online::{segment_ending_at, segment_eval, segment_passes, OnlineRun};
use super::train::Pretrained;
use super::RunConfig;
use crate::autodiff::{BnMode, Graph, Var};
use crate::error::Result;
use crate::replay::ReplayBuffer;
use crate::segnet::Role;
use crate::self_training::{loss_task, PROB_FLOOR};
use crate::storm::{batch_of, Benchmark};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Re-estimate BN running statistics on the stream.
    BnAdapt,
    /// Train BN affine parameters to minimize prediction entropy.
    EntropyMin,
    /// Entropy minimization plus the replayed source task loss.
    EntropyMinReplay,
}

impl std::str::FromStr for BaselineKind {
    type Err = crate::error::OndaError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "bn_adapt" | "bn" => BaselineKind::BnAdapt,
            "entropy_min" | "tent" => BaselineKind::EntropyMin,
            "entropy_min_replay" | "tent_rb" => BaselineKind::EntropyMinReplay,
            other => {
                return Err(crate::error::OndaError::InvalidArgument(format!(
                    "unknown baseline '{other}' (bn_adapt, entropy_min, entropy_min_replay)"
                )))
            }
        })
    }
}

/// Mean per-pixel entropy `−Σ_k p_k log p_k`.
pub fn entropy(g: &mut Graph, probs: Var) -> Result<Var> {
    let c = g.value(probs).shape()[1] as f64;
    let p = g.clamp(probs, PROB_FLOOR, 1.0)?;
    let logp = g.log(p)?;
    let plogp = g.mul(p, logp)?;
    let m = g.mean(plogp)?;
    g.scale(m, -c)
}

pub fn run_baseline(
    cfg: &RunConfig,
    bench: &Benchmark,
    pre: &Pretrained,
    kind: BaselineKind,
) -> Result<OnlineRun> {
    let mut model = pre.model.clone().with_role(Role::Live);
    let affine = model.bn_affine_indices();
    let replay = match kind {
        BaselineKind::EntropyMinReplay => {
            ReplayBuffer::build(&bench.source_train, cfg.buffer, cfg.seeds.buffer)?
        }
        _ => ReplayBuffer::build(&bench.source_train, 0, cfg.seeds.buffer)?,
    };
    let passes = segment_passes(&bench.schedule);
    let mut evals = Vec::new();
    let mut objective = Vec::new();
    for batch in bench.target_stream() {
        let t = batch.index;
        let mut g = Graph::new();
        let x = g.constant(batch.images);
        let fp = model.forward(&mut g, x, BnMode::TrainUpdate)?;
        let ent = entropy(&mut g, fp.probs)?;
        objective.push(g.value(ent).data()[0]);
        if kind != BaselineKind::BnAdapt {
            let mut total = ent;
            let mut replay_params = None;
            if !replay.is_empty() {
                let (ri, rl) =
                    batch_of(&replay.sample_batch(cfg.hyper.batch_replay.min(replay.len()), t)?);
                let xr = g.constant(ri);
                let fr = model.forward(&mut g, xr, BnMode::TrainFrozen)?;
                let lt = loss_task(&mut g, fr.probs, &rl)?;
                total = g.add(total, lt)?;
                replay_params = Some(fr.params);
            }
            g.backward(total)?;
            model.collect_grads(&g, &fp.params)?;
            if let Some(rp) = &replay_params {
                model.collect_grads(&g, rp)?;
            }
            model.sgd(cfg.hyper.lr_online, Some(&affine));
        }
        model.absorb_bn_stats(&fp.bn_stats);
        if let Some(seg) = segment_ending_at(&bench.schedule, t) {
            evals.push(segment_eval(&model, bench, seg, t, &passes)?);
        }
    }
    Ok(OnlineRun {
        evals,
        steps: Vec::new(),
        events: Vec::new(),
        promotions: Vec::new(),
        objective,
        policy: None,
        models: None,
        final_model: model,
    })
}
