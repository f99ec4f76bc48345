//! The segmentation network `h = g ∘ f`: a three-block conv/BN/ReLU encoder
//! followed by a 1×1 convolutional classifier, plus the checkpoint roles the
//! adaptation loop juggles (live, momentum, static, dynamic).

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, BatchStats, BnMode, BnState, Graph, Var};
use crate::error::{shape_err, OndaError, Result};
use crate::tensor::Tensor;

/// Default EMA coefficient for the momentum model.
pub const EMA_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub hidden: usize,
    /// Encoder output dimension (prototype space).
    pub feature_dim: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            hidden: 16,
            feature_dim: 16,
            num_classes: 5,
            height: 48,
            width: 64,
            kernel: 3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.in_channels == 0 {
            return Err(OndaError::InvalidArgument(
                "channel counts must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(OndaError::InvalidArgument("need at least 2 classes".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(OndaError::InvalidArgument("kernel size must be odd".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(OndaError::InvalidArgument(
                "image size must be positive".into(),
            ));
        }
        Ok(())
    }

    fn block_channels(&self) -> [(usize, usize); 3] {
        [
            (self.in_channels, self.hidden),
            (self.hidden, self.hidden),
            (self.hidden, self.feature_dim),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Live,
    Momentum,
    Static,
    Dynamic,
}

/// One conv → BN → ReLU stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub bn: BnState,
}

/// Full parameter and BN-statistics snapshot of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub arch: ArchConfig,
    pub role: Role,
    pub blocks: Vec<ConvBlock>,
    pub classifier_kernel: Tensor,
    pub classifier_bias: Tensor,
}

/// Graph handles produced by [`ModelCheckpoint::forward`].
#[derive(Debug)]
pub struct ForwardPass {
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
    /// Parameter leaves in [`ModelCheckpoint::params`] order.
    pub params: Vec<Var>,
    /// Batch statistics per block (present in batch-statistics modes).
    pub bn_stats: Vec<Option<BatchStats>>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data).with_grad()
}

/// Fan-in scaled uniform initialization; deterministic in `seed`.
pub fn init_model(cfg: &ArchConfig, seed: u64) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.kernel;
    let blocks = cfg
        .block_channels()
        .iter()
        .map(|&(cin, cout)| {
            let fan_in = (cin * k * k) as f64;
            ConvBlock {
                kernel: uniform(&mut rng, &[cout, cin, k, k], (6.0 / fan_in).sqrt()),
                bias: uniform(&mut rng, &[cout], 1.0 / fan_in.sqrt()),
                gamma: Tensor::full(&[cout], 1.0).with_grad(),
                beta: Tensor::zeros(&[cout]).with_grad(),
                bn: BnState::new(cout),
            }
        })
        .collect();
    let fan_in = cfg.feature_dim as f64;
    let bound = 1.0 / fan_in.sqrt();
    Ok(ModelCheckpoint {
        arch: cfg.clone(),
        role: Role::Live,
        blocks,
        classifier_kernel: uniform(&mut rng, &[cfg.num_classes, cfg.feature_dim, 1, 1], bound),
        classifier_bias: uniform(&mut rng, &[cfg.num_classes], bound),
    })
}

impl ModelCheckpoint {
    /// Parameters in declared order: per block kernel, bias, gamma, beta; then
    /// classifier kernel and bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.blocks.len() * 4 + 2);
        for b in &self.blocks {
            out.extend([&b.kernel, &b.bias, &b.gamma, &b.beta]);
        }
        out.push(&self.classifier_kernel);
        out.push(&self.classifier_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.blocks.len() * 4 + 2);
        for b in &mut self.blocks {
            out.extend([&mut b.kernel, &mut b.bias, &mut b.gamma, &mut b.beta]);
        }
        out.push(&mut self.classifier_kernel);
        out.push(&mut self.classifier_bias);
        out
    }

    /// Indices into [`Self::params`] of the BN affine parameters.
    pub fn bn_affine_indices(&self) -> Vec<usize> {
        (0..self.blocks.len())
            .flat_map(|b| [b * 4 + 2, b * 4 + 3])
            .collect()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn same_arch(&self, other: &ModelCheckpoint) -> Result<()> {
        if self.arch != other.arch {
            return Err(OndaError::InvalidArgument(format!(
                "architecture mismatch: {:?} vs {:?}",
                self.arch, other.arch
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        batch.expect_rank("segnet", 4)?;
        let [n, c, h, w] = batch.dims4();
        if n == 0 {
            return Err(OndaError::EmptyBatch);
        }
        if c != self.arch.in_channels || h != self.arch.height || w != self.arch.width {
            return Err(shape_err(
                "segnet",
                format!(
                    "batch [{n},{c},{h},{w}] does not match arch [{},{},{}]",
                    self.arch.in_channels, self.arch.height, self.arch.width
                ),
            ));
        }
        Ok(())
    }

    /// Records `h(x)` on `g`. Running statistics are not modified here; in
    /// [`BnMode::TrainUpdate`] pass the returned stats to
    /// [`Self::absorb_bn_stats`].
    pub fn forward(&self, g: &mut Graph, input: Var, mode: BnMode) -> Result<ForwardPass> {
        self.check_batch(g.value(input))?;
        let params: Vec<Var> = self.params().into_iter().map(|p| g.param(p)).collect();
        let pad = self.arch.kernel / 2;
        let mut x = input;
        let mut bn_stats = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let p = &params[i * 4..i * 4 + 4];
            let c = g.conv2d(x, p[0], p[1], pad)?;
            let (n, stats) = g.batch_norm(c, p[2], p[3], &block.bn, mode)?;
            bn_stats.push(stats);
            x = g.relu(n)?;
        }
        let features = x;
        let np = params.len();
        let logits = g.conv2d(features, params[np - 2], params[np - 1], 0)?;
        let probs = g.softmax_channel(logits)?;
        Ok(ForwardPass {
            features,
            logits,
            probs,
            params,
            bn_stats,
        })
    }

    /// Gradient-free forward with running statistics; returns `(features, probs)`.
    pub fn infer(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference();
        let x = g.constant(batch.clone());
        let fp = self.forward(&mut g, x, BnMode::Eval)?;
        Ok((g.value(fp.features).clone(), g.value(fp.probs).clone()))
    }

    /// Class probabilities only, see [`Self::infer`].
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.infer(batch)?.1)
    }

    pub fn absorb_bn_stats(&mut self, stats: &[Option<BatchStats>]) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            if let Some(s) = s {
                block.bn.absorb(s);
            }
        }
    }

    /// Copies leaf gradients from a finished backward pass into the
    /// parameters' grad slots.
    pub fn collect_grads(&mut self, g: &Graph, params: &[Var]) -> Result<()> {
        for (p, &v) in self.params_mut().into_iter().zip(params) {
            if let Some(gr) = g.grad(v) {
                p.accumulate_grad(gr)?;
            }
        }
        Ok(())
    }

    /// SGD over all parameters, or only those whose index passes `mask`.
    pub fn sgd(&mut self, lr: f64, mask: Option<&[usize]>) {
        let mut params = self.params_mut();
        match mask {
            None => sgd_step(&mut params, lr),
            Some(keep) => {
                let mut selected: Vec<&mut Tensor> = params
                    .iter_mut()
                    .enumerate()
                    .filter(|(i, _)| keep.contains(i))
                    .map(|(_, p)| &mut **p)
                    .collect();
                sgd_step(&mut selected, lr);
                for p in params.iter_mut() {
                    p.zero_grad();
                }
            }
        }
    }

    /// Bitwise equality of all parameters and running statistics.
    pub fn bit_eq(&self, other: &ModelCheckpoint) -> bool {
        self.arch == other.arch
            && self
                .params()
                .iter()
                .zip(other.params())
                .all(|(a, b)| a.bit_eq(b))
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.bn.bit_eq(&b.bn))
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// `θ̃ ← m·θ̃ + (1−m)·θ` for every parameter; BN running statistics are copied
/// from `live`.
pub fn ema_update(momentum: &mut ModelCheckpoint, live: &ModelCheckpoint, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(OndaError::InvalidArgument(format!(
            "EMA coefficient {m} outside [0, 1)"
        )));
    }
    momentum.same_arch(live)?;
    for (t, s) in momentum.params_mut().into_iter().zip(live.params()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    for (t, s) in momentum.blocks.iter_mut().zip(&live.blocks) {
        t.bn = s.bn.clone();
    }
    Ok(())
}

/// Replaces the dynamic checkpoint with a frozen copy of `live`.
pub fn promote_dynamic(dynamic: &mut ModelCheckpoint, live: &ModelCheckpoint) {
    let mut copy = live.clone();
    copy.role = Role::Dynamic;
    for p in copy.params_mut() {
        p.zero_grad();
    }
    *dynamic = copy;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            height: 6,
            width: 5,
            hidden: 4,
            feature_dim: 3,
            num_classes: 3,
            ..ArchConfig::default()
        }
    }

    fn rand_batch(seed: u64, arch: &ArchConfig, n: usize, shift: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * arch.in_channels * arch.height * arch.width;
        let data = (0..len)
            .map(|_| rng.random_range(0.0..1.0) * 0.5 + shift)
            .collect();
        Tensor::new(vec![n, arch.in_channels, arch.height, arch.width], data).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_model(&small_arch(), 7).unwrap();
        let b = init_model(&small_arch(), 7).unwrap();
        let c = init_model(&small_arch(), 8).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn forward_yields_simplex_and_shapes() {
        let arch = small_arch();
        let m = init_model(&arch, 1).unwrap();
        let (f, p) = m.infer(&rand_batch(2, &arch, 2, 0.0)).unwrap();
        assert_eq!(f.shape(), &[2, 3, 6, 5]);
        assert_eq!(p.shape(), &[2, 3, 6, 5]);
        let hw = 30;
        for b in 0..2 {
            for q in 0..hw {
                let s: f64 = (0..3).map(|c| p.data()[(b * 3 + c) * hw + q]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_forward_is_repeatable() {
        let arch = small_arch();
        let m = init_model(&arch, 1).unwrap();
        let x = rand_batch(3, &arch, 2, 0.0);
        assert!(m.predict(&x).unwrap().bit_eq(&m.predict(&x).unwrap()));
    }

    #[test]
    fn train_update_differs_from_eval_on_shifted_batch() {
        let arch = small_arch();
        let m = init_model(&arch, 1).unwrap();
        let x = rand_batch(4, &arch, 2, 3.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fp = m.forward(&mut g, xv, BnMode::TrainUpdate).unwrap();
        let train = g.value(fp.probs).clone();
        assert!(!train.bit_eq(&m.predict(&x).unwrap()));
    }

    #[test]
    fn forward_rejects_wrong_image_size() {
        let arch = small_arch();
        let m = init_model(&arch, 1).unwrap();
        let x = Tensor::zeros(&[1, 3, 7, 5]);
        assert!(m.predict(&x).is_err());
    }

    #[test]
    fn ema_endpoints() {
        let arch = small_arch();
        let live = init_model(&arch, 1).unwrap();
        let mut mom = init_model(&arch, 2).unwrap();
        ema_update(&mut mom, &live, 0.0).unwrap();
        assert!(mom.bit_eq(&live));

        let mut mom = init_model(&arch, 2).unwrap();
        let before = mom.clone();
        ema_update(&mut mom, &live, 1.0 - 1e-12).unwrap();
        for (a, b) in mom.params().iter().zip(before.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert!(ema_update(&mut mom, &live, 1.0).is_err());
    }

    #[test]
    fn ema_scalar_case() {
        let arch = small_arch();
        let mut live = init_model(&arch, 1).unwrap();
        let mut mom = live.clone();
        live.params_mut()
            .into_iter()
            .for_each(|p| p.data_mut().fill(2.0));
        mom.params_mut()
            .into_iter()
            .for_each(|p| p.data_mut().fill(0.0));
        ema_update(&mut mom, &live, 0.99).unwrap();
        for p in mom.params() {
            assert!(p.data().iter().all(|v| (v - 0.02).abs() < 1e-15));
        }
    }

    #[test]
    fn ema_rejects_mismatched_arch() {
        let live = init_model(&small_arch(), 1).unwrap();
        let mut mom = init_model(&ArchConfig::default(), 1).unwrap();
        assert!(ema_update(&mut mom, &live, 0.5).is_err());
    }

    #[test]
    fn promotion_copies_live_and_leaves_sources_alone() {
        let arch = small_arch();
        let static_m = init_model(&arch, 1).unwrap().with_role(Role::Static);
        let live = init_model(&arch, 5).unwrap();
        let (live0, static0) = (live.clone(), static_m.clone());
        let mut dynamic = static_m.clone().with_role(Role::Dynamic);
        assert!(dynamic.bit_eq(&static_m));
        promote_dynamic(&mut dynamic, &live);
        assert!(dynamic.bit_eq(&live));
        assert_eq!(dynamic.role, Role::Dynamic);
        let snap = dynamic.clone();
        promote_dynamic(&mut dynamic, &live);
        assert!(dynamic.bit_eq(&snap));
        assert!(live.bit_eq(&live0) && static_m.bit_eq(&static0));
    }

    #[test]
    fn masked_sgd_touches_only_selected() {
        let arch = small_arch();
        let mut m = init_model(&arch, 1).unwrap();
        let before = m.clone();
        for p in m.params_mut() {
            let n = p.numel();
            p.accumulate_grad(&vec![1.0; n]).unwrap();
        }
        let mask = m.bn_affine_indices();
        m.sgd(0.5, Some(&mask));
        for (i, (a, b)) in m.params().iter().zip(before.params()).enumerate() {
            assert_eq!(a.bit_eq(b), !mask.contains(&i), "param {i}");
            assert!(a.grad().is_none());
        }
    }
}
