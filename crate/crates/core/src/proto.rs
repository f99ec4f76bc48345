//! Class prototypes in feature space.
//!
//! Prototypes are initialized from source features (class means and a shared
//! per-dimension variance), predict a class distribution from the
//! variance-scaled distance to each prototype, and track the target domain
//! through an exponential moving average of per-batch class centroids.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, OndaError, Result};
use crate::tensor::Tensor;

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const PROTO_LAMBDA: f64 = 0.99;

/// Norm applied to the variance-scaled difference vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DistanceNorm {
    #[default]
    L2,
    L1,
}

/// Whether the shared variance follows target batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VarianceMode {
    /// Fixed at the source estimate.
    #[default]
    Frozen,
    /// EMA of target batch variances with the prototype coefficient.
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    /// Row-major `[C, K]` class centroids.
    pub eta: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub class_seen: Vec<bool>,
    /// Source pixel count per class.
    pub class_counts: Vec<u64>,
    pub lambda: f64,
    pub norm: DistanceNorm,
    pub variance_mode: VarianceMode,
}

/// Single-pass accumulator for source initialization.
#[derive(Debug, Clone)]
pub struct PrototypeAccumulator {
    classes: usize,
    dim: usize,
    class_sum: Vec<f64>,
    class_count: Vec<u64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    total: u64,
}

impl PrototypeAccumulator {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            class_sum: vec![0.0; classes * dim],
            class_count: vec![0; classes],
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
            total: 0,
        }
    }

    /// Adds `features [N, K, H, W]` with per-pixel labels (`N·H·W`, row-major).
    pub fn add(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        features.expect_rank("init_prototypes", 4)?;
        let [n, k, h, w] = features.dims4();
        if k != self.dim {
            return Err(shape_err(
                "init_prototypes",
                format!("feature dim {k}, bank dim {}", self.dim),
            ));
        }
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(shape_err(
                "init_prototypes",
                format!("{} labels for {} pixels", labels.len(), n * hw),
            ));
        }
        let f = features.data();
        for b in 0..n {
            for q in 0..hw {
                let c = labels[b * hw + q];
                if c >= self.classes {
                    return Err(OndaError::LabelOutOfRange {
                        label: c,
                        classes: self.classes,
                    });
                }
                self.class_count[c] += 1;
                for d in 0..k {
                    let v = f[(b * k + d) * hw + q];
                    self.class_sum[c * k + d] += v;
                    self.sum[d] += v;
                    self.sum_sq[d] += v * v;
                }
            }
        }
        self.total += (n * hw) as u64;
        Ok(())
    }

    pub fn finish(self, lambda: f64) -> Result<PrototypeBank> {
        if let Some(c) = self.class_count.iter().position(|&n| n == 0) {
            return Err(OndaError::MissingClass { class: c });
        }
        self.build(lambda, None)
    }

    /// Like [`Self::finish`], but classes without pixels take their prototype
    /// from `fallback` and are marked unseen.
    pub fn finish_or(self, lambda: f64, fallback: &PrototypeBank) -> Result<PrototypeBank> {
        if fallback.num_classes() != self.classes || fallback.dim() != self.dim {
            return Err(shape_err(
                "init_prototypes",
                format!(
                    "fallback bank {}x{}, accumulator {}x{}",
                    fallback.num_classes(),
                    fallback.dim(),
                    self.classes,
                    self.dim
                ),
            ));
        }
        if self.total == 0 {
            return Err(OndaError::EmptyBatch);
        }
        self.build(lambda, Some(fallback))
    }

    fn build(self, lambda: f64, fallback: Option<&PrototypeBank>) -> Result<PrototypeBank> {
        let k = self.dim;
        let mut eta = self.class_sum;
        let mut class_seen = vec![true; self.classes];
        for (c, &cnt) in self.class_count.iter().enumerate() {
            let row = &mut eta[c * k..(c + 1) * k];
            match (cnt, fallback) {
                (0, Some(f)) => {
                    row.copy_from_slice(f.prototype(c));
                    class_seen[c] = false;
                }
                _ => row.iter_mut().for_each(|v| *v /= cnt as f64),
            }
        }
        let t = self.total as f64;
        let sigma2 = self
            .sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, sq)| {
                let mean = s / t;
                (sq / t - mean * mean).max(VARIANCE_FLOOR)
            })
            .collect();
        Ok(PrototypeBank {
            eta,
            sigma2,
            class_seen,
            class_counts: self.class_count,
            lambda,
            norm: DistanceNorm::L2,
            variance_mode: VarianceMode::Frozen,
        })
    }
}

impl PrototypeBank {
    pub fn num_classes(&self) -> usize {
        self.class_seen.len()
    }

    pub fn dim(&self) -> usize {
        self.sigma2.len()
    }

    pub fn prototype(&self, c: usize) -> &[f64] {
        let k = self.dim();
        &self.eta[c * k..(c + 1) * k]
    }

    /// Per-pixel softmax over classes of the negative variance-scaled
    /// distance between `features [N, K, H, W]` and each prototype.
    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        features.expect_rank("proto_predict", 4)?;
        let [n, k, h, w] = features.dims4();
        if k != self.dim() {
            return Err(shape_err(
                "proto_predict",
                format!("feature dim {k}, bank dim {}", self.dim()),
            ));
        }
        let c_n = self.num_classes();
        let hw = h * w;
        let f = features.data();
        let inv_sigma: Vec<f64> = self.sigma2.iter().map(|s| 1.0 / s.sqrt()).collect();
        let mut out = vec![0.0; n * c_n * hw];
        let mut logits = vec![0.0; c_n];
        let mut x = vec![0.0; k];
        for b in 0..n {
            for q in 0..hw {
                for d in 0..k {
                    x[d] = f[(b * k + d) * hw + q];
                }
                for (c, l) in logits.iter_mut().enumerate() {
                    let eta = self.prototype(c);
                    let dist = match self.norm {
                        DistanceNorm::L2 => x
                            .iter()
                            .zip(eta)
                            .zip(&inv_sigma)
                            .map(|((xv, e), is)| ((xv - e) * is).powi(2))
                            .sum::<f64>()
                            .sqrt(),
                        DistanceNorm::L1 => x
                            .iter()
                            .zip(eta)
                            .zip(&inv_sigma)
                            .map(|((xv, e), is)| ((xv - e) * is).abs())
                            .sum::<f64>(),
                    };
                    *l = -dist;
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - mx).exp();
                    s += *l;
                }
                for (c, l) in logits.iter().enumerate() {
                    out[(b * c_n + c) * hw + q] = l / s;
                }
            }
        }
        Tensor::new(vec![n, c_n, h, w], out)
    }

    /// Blends batch centroids of the pixels assigned to each class into the
    /// prototypes; classes with no assigned pixel are left untouched.
    pub fn update(&mut self, features: &Tensor, assignments: &[usize]) -> Result<()> {
        features.expect_rank("update_prototypes", 4)?;
        let [n, k, h, w] = features.dims4();
        if k != self.dim() {
            return Err(shape_err(
                "update_prototypes",
                format!("feature dim {k}, bank dim {}", self.dim()),
            ));
        }
        let hw = h * w;
        if assignments.len() != n * hw {
            return Err(shape_err(
                "update_prototypes",
                format!("{} assignments for {} pixels", assignments.len(), n * hw),
            ));
        }
        let c_n = self.num_classes();
        let f = features.data();
        let mut sums = vec![0.0; c_n * k];
        let mut counts = vec![0u64; c_n];
        let mut mom1 = vec![0.0; k];
        let mut mom2 = vec![0.0; k];
        for b in 0..n {
            for q in 0..hw {
                let c = assignments[b * hw + q];
                if c >= c_n {
                    return Err(OndaError::LabelOutOfRange {
                        label: c,
                        classes: c_n,
                    });
                }
                counts[c] += 1;
                for d in 0..k {
                    let v = f[(b * k + d) * hw + q];
                    sums[c * k + d] += v;
                    mom1[d] += v;
                    mom2[d] += v * v;
                }
            }
        }
        let lambda = self.lambda;
        for c in 0..c_n {
            if counts[c] == 0 {
                continue;
            }
            let cnt = counts[c] as f64;
            for d in 0..k {
                let batch = sums[c * k + d] / cnt;
                let e = &mut self.eta[c * k + d];
                *e = lambda * *e + (1.0 - lambda) * batch;
            }
            self.class_seen[c] = true;
        }
        if self.variance_mode == VarianceMode::Online {
            let t = (n * hw) as f64;
            for d in 0..k {
                let mean = mom1[d] / t;
                let var = (mom2[d] / t - mean * mean).max(VARIANCE_FLOOR);
                self.sigma2[d] =
                    (lambda * self.sigma2[d] + (1.0 - lambda) * var).max(VARIANCE_FLOOR);
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.eta.iter().chain(&self.sigma2).all(|v| v.is_finite())
    }
}

/// Per-pixel argmax over the class axis of `[N, C, H, W]`, lowest index on ties.
pub fn argmax_channel(probs: &Tensor) -> Vec<usize> {
    let [n, c, h, w] = probs.dims4();
    let hw = h * w;
    let p = probs.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for q in 0..hw {
            let mut best = 0;
            let mut bv = p[b * c * hw + q];
            for k in 1..c {
                let v = p[(b * c + k) * hw + q];
                if v > bv {
                    bv = v;
                    best = k;
                }
            }
            out.push(best);
        }
    }
    out
}
