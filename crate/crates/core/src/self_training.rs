//! Pseudo-labels from blended priors and prototypes, and the online training step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnMode, Graph, Var};
use crate::detector::batch_confidence;
use crate::error::{shape_err, OndaError, Result};
use crate::proto::{argmax_channel, PrototypeBank};
use crate::segnet::{ema_update, ModelCheckpoint, Role, EMA_MOMENTUM};
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-8;
pub const ONE_HOT_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr_online: f64,
    pub batch_target: usize,
    pub batch_replay: usize,
    pub ema_momentum: f64,
    /// Multiply priors by the prototype distribution before taking labels.
    #[serde(default = "yes")]
    pub rectify: bool,
}

fn yes() -> bool {
    true
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: 0.1,
            beta: 1.0,
            gamma: 0.1,
            lr_online: 1e-3,
            batch_target: 4,
            batch_replay: 4,
            ema_momentum: EMA_MOMENTUM,
            rectify: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.beta, self.gamma, self.lr_online]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.batch_target > 0
            && (0.0..1.0).contains(&self.ema_momentum);
        if !ok {
            return Err(OndaError::InvalidArgument(format!(
                "bad hyperparameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// The four networks and the prototype bank carried through adaptation.
#[derive(Debug, Clone)]
pub struct OndaModels {
    pub live: ModelCheckpoint,
    pub momentum: ModelCheckpoint,
    pub static_model: ModelCheckpoint,
    pub dynamic: ModelCheckpoint,
    pub bank: PrototypeBank,
}

impl OndaModels {
    /// All four networks start as copies of the pretrained source model.
    pub fn from_source(source: &ModelCheckpoint, bank: PrototypeBank) -> Self {
        OndaModels {
            live: source.clone().with_role(Role::Live),
            momentum: source.clone().with_role(Role::Momentum),
            static_model: source.clone().with_role(Role::Static),
            dynamic: source.clone().with_role(Role::Dynamic),
            bank,
        }
    }
}

/// `δ·static + (1−δ)·dynamic`, pixelwise.
pub fn prior_blend(static_probs: &Tensor, dynamic_probs: &Tensor, delta: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(OndaError::InvalidArgument(format!(
            "delta {delta} outside [0, 1]"
        )));
    }
    if static_probs.shape() != dynamic_probs.shape() {
        return Err(shape_err(
            "prior_blend",
            format!("{:?} vs {:?}", static_probs.shape(), dynamic_probs.shape()),
        ));
    }
    if delta == 1.0 {
        return Ok(static_probs.clone());
    }
    if delta == 0.0 {
        return Ok(dynamic_probs.clone());
    }
    let data = static_probs
        .data()
        .iter()
        .zip(dynamic_probs.data())
        .map(|(s, d)| delta * s + (1.0 - delta) * d)
        .collect();
    Ok(Tensor::from_parts(static_probs.shape().to_vec(), data))
}

/// Per-pixel argmax of `p_hat · omega`, lowest class on ties.
pub fn rectify(p_hat: &Tensor, omega: &Tensor) -> Result<Vec<usize>> {
    p_hat.expect_rank("rectify", 4)?;
    if p_hat.shape() != omega.shape() {
        return Err(shape_err(
            "rectify",
            format!("{:?} vs {:?}", p_hat.shape(), omega.shape()),
        ));
    }
    let data = p_hat
        .data()
        .iter()
        .zip(omega.data())
        .map(|(p, w)| p * w)
        .collect();
    Ok(argmax_channel(&Tensor::from_parts(
        p_hat.shape().to_vec(),
        data,
    )))
}

/// Labels `[N·H·W]` to a `[N, C, H, W]` indicator tensor.
pub fn one_hot(labels: &[usize], shape: [usize; 4]) -> Result<Tensor> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(shape_err(
            "one_hot",
            format!("{} labels for {} pixels", labels.len(), n * hw),
        ));
    }
    let mut data = vec![0.0; n * c * hw];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(OndaError::LabelOutOfRange {
                label: l,
                classes: c,
            });
        }
        let (b, q) = (i / hw, i % hw);
        data[(b * c + l) * hw + q] = 1.0;
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], data))
}

fn channels(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    t.expect_rank("loss", 4)?;
    Ok(t.shape()[1] as f64)
}

/// `−γ·mean_pixels (1/C)·Σ_k log p_k`.
pub fn loss_reg(g: &mut Graph, probs: Var, gamma: f64) -> Result<Var> {
    channels(g, probs)?;
    let clamped = g.clamp(probs, PROB_FLOOR, 1.0)?;
    let logp = g.log(clamped)?;
    let m = g.mean(logp)?;
    g.scale(m, -gamma)
}

/// Symmetric cross-entropy `α·CE(p, ŷ) + β·CE(ŷ, p)`, pixel averaged.
pub fn loss_pseudo(
    g: &mut Graph,
    probs: Var,
    y_hat: &Tensor,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let c = channels(g, probs)?;
    if y_hat.shape() != g.value(probs).shape() {
        return Err(shape_err(
            "loss_pseudo",
            format!(
                "labels {:?}, probs {:?}",
                y_hat.shape(),
                g.value(probs).shape()
            ),
        ));
    }
    let p = g.clamp(probs, PROB_FLOOR, 1.0)?;
    let logp = g.log(p)?;
    let y = g.constant(y_hat.clone());
    let fwd = g.mul(y, logp)?;
    let fwd = g.mean(fwd)?;
    let fwd = g.scale(fwd, -alpha * c)?;
    let log_y = y_hat
        .data()
        .iter()
        .map(|v| v.max(ONE_HOT_FLOOR).ln())
        .collect();
    let log_y = g.constant(Tensor::from_parts(y_hat.shape().to_vec(), log_y));
    let rev = g.mul(p, log_y)?;
    let rev = g.mean(rev)?;
    let rev = g.scale(rev, -beta * c)?;
    g.add(fwd, rev)
}

/// Pixel-averaged cross-entropy against ground-truth labels.
pub fn loss_task(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let c = channels(g, probs)?;
    let y = one_hot(labels, g.value(probs).dims4())?;
    let p = g.clamp(probs, PROB_FLOOR, 1.0)?;
    let logp = g.log(p)?;
    let y = g.constant(y);
    let ce = g.mul(y, logp)?;
    let ce = g.mean(ce)?;
    g.scale(ce, -c)
}

/// Pseudo-labels for one target batch.
#[derive(Debug, Clone)]
pub struct PseudoBatch {
    pub omega: Tensor,
    pub p_hat: Tensor,
    pub y_hat: Vec<usize>,
    pub momentum_features: Tensor,
    pub momentum_pred: Vec<usize>,
}

pub fn pseudo_labels(
    models: &OndaModels,
    target: &Tensor,
    static_probs: &Tensor,
    delta: f64,
    hp: &Hyperparams,
) -> Result<PseudoBatch> {
    let (features, mprobs) = models.momentum.infer(target)?;
    let omega = models.bank.predict(&features)?;
    let p_hat = if delta == 1.0 {
        prior_blend(static_probs, static_probs, 1.0)?
    } else {
        prior_blend(static_probs, &models.dynamic.predict(target)?, delta)?
    };
    let y_hat = if hp.rectify {
        rectify(&p_hat, &omega)?
    } else {
        argmax_channel(&p_hat)
    };
    Ok(PseudoBatch {
        omega,
        p_hat,
        y_hat,
        momentum_features: features,
        momentum_pred: argmax_channel(&mprobs),
    })
}

/// Handles into a recorded total loss.
pub struct LossGraph {
    pub total: Var,
    pub loss_task: Option<Var>,
    pub loss_pseudo: Var,
    pub loss_reg: Var,
    pub target_params: Vec<Var>,
    pub replay_params: Option<Vec<Var>>,
    pub target_bn: Vec<Option<BatchStats>>,
}

/// Records `L_task + L_pseudo + L_reg` for `live` on `g`. The target pass
/// uses batch statistics that should be absorbed afterwards; the replay pass
/// uses batch statistics without touching the running averages.
pub fn record_total_loss(
    g: &mut Graph,
    live: &ModelCheckpoint,
    target: &Tensor,
    y_hat: &[usize],
    replay: Option<(&Tensor, &[usize])>,
    hp: &Hyperparams,
) -> Result<LossGraph> {
    let x = g.constant(target.clone());
    let fp = live.forward(g, x, BnMode::TrainUpdate)?;
    let y = one_hot(y_hat, g.value(fp.probs).dims4())?;
    let loss_pseudo = loss_pseudo(g, fp.probs, &y, hp.alpha, hp.beta)?;
    let loss_reg = loss_reg(g, fp.probs, hp.gamma)?;
    let mut total = g.add(loss_pseudo, loss_reg)?;
    let (mut loss_task_v, mut replay_params) = (None, None);
    if let Some((images, labels)) = replay {
        let xr = g.constant(images.clone());
        let fr = live.forward(g, xr, BnMode::TrainFrozen)?;
        let lt = loss_task(g, fr.probs, labels)?;
        total = g.add(total, lt)?;
        loss_task_v = Some(lt);
        replay_params = Some(fr.params);
    }
    Ok(LossGraph {
        total,
        loss_task: loss_task_v,
        loss_pseudo,
        loss_reg,
        target_params: fp.params,
        replay_params,
        target_bn: fp.bn_stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss_task: Option<f64>,
    pub loss_pseudo: f64,
    pub loss_reg: f64,
    pub total: f64,
    /// Static-model confidence on the target batch.
    pub z: f64,
}

/// One online update of `models` from a target batch and an optional replay batch.
pub fn adapt_step(
    models: &mut OndaModels,
    target: &Tensor,
    static_probs: Option<&Tensor>,
    replay: Option<(&Tensor, &[usize])>,
    delta: f64,
    hp: &Hyperparams,
) -> Result<StepLosses> {
    let owned;
    let static_probs = match static_probs {
        Some(p) => p,
        None => {
            owned = models.static_model.predict(target)?;
            &owned
        }
    };
    let z = batch_confidence(static_probs)?;
    let pseudo = pseudo_labels(models, target, static_probs, delta, hp)?;

    let mut g = Graph::new();
    let lg = record_total_loss(&mut g, &models.live, target, &pseudo.y_hat, replay, hp)?;
    let scalar = |v: Var| g.value(v).data()[0];
    let losses = StepLosses {
        loss_task: lg.loss_task.map(scalar),
        loss_pseudo: scalar(lg.loss_pseudo),
        loss_reg: scalar(lg.loss_reg),
        total: scalar(lg.total),
        z,
    };
    if !losses.total.is_finite() {
        return Err(OndaError::NonFinite {
            op: "adapt_step loss",
        });
    }
    g.backward(lg.total)?;
    models.live.collect_grads(&g, &lg.target_params)?;
    if let Some(rp) = &lg.replay_params {
        models.live.collect_grads(&g, rp)?;
    }
    models.live.sgd(hp.lr_online, None);
    models.live.absorb_bn_stats(&lg.target_bn);
    ema_update(&mut models.momentum, &models.live, hp.ema_momentum)?;
    models
        .bank
        .update(&pseudo.momentum_features, &pseudo.momentum_pred)?;
    Ok(losses)
}

/// One JSON line of the per-batch trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub domain_truth: usize,
    pub z: f64,
    pub mu: Option<f64>,
    #[serde(rename = "I")]
    pub indicator: i8,
    pub delta: f64,
    pub loss_task: Option<f64>,
    pub loss_pseudo: f64,
    pub loss_reg: f64,
}
