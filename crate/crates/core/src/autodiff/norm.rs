//! Per-channel batch normalization over `[N, C, H, W]` activations.

use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How a batch-norm layer treats its statistics on a given call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with batch statistics and fold them into the running averages.
    TrainUpdate,
    /// Normalize with batch statistics; running averages are left untouched.
    TrainFrozen,
    /// Normalize with the running averages.
    Eval,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, BnMode::Eval)
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one batch's statistics into the running averages.
    pub fn absorb(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    pub fn bit_eq(&self, other: &BnState) -> bool {
        let eq = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        eq(&self.running_mean, &other.running_mean) && eq(&self.running_var, &other.running_var)
    }
}

/// Per-channel mean and (population) variance of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) struct BnForward {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub stats: Option<BatchStats>,
}

pub(crate) fn bn_forward(
    dims: [usize; 4],
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    state: &BnState,
    mode: BnMode,
) -> BnForward {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let count = (n * hw) as f64;
    let (mean, var, stats) = if mode.uses_batch_stats() {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .sum::<f64>();
            }
            let mu = s / count;
            let mut v = 0.0;
            for b in 0..n {
                v += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|&t| (t - mu) * (t - mu))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = v / count;
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        (mean, var, (mode == BnMode::TrainUpdate).then_some(stats))
    } else {
        (state.running_mean.clone(), state.running_var.clone(), None)
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let (mu, is, g, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for ((xh, o), &xv) in xhat[r.clone()]
                .iter_mut()
                .zip(&mut out[r.clone()])
                .zip(&x[r])
            {
                *xh = (xv - mu) * is;
                *o = g * *xh + be;
            }
        }
    }
    BnForward {
        out,
        xhat,
        inv_std,
        stats,
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward(
    dims: [usize; 4],
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    mode: BnMode,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (&g, &xh) in dy[r.clone()].iter().zip(&xhat[r]) {
                dgamma[ch] += g * xh;
                dbeta[ch] += g;
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let scale = gamma[ch] * inv_std[ch];
            if mode.uses_batch_stats() {
                let (sg, sgx) = (dbeta[ch] / count, dgamma[ch] / count);
                for ((d, &g), &xh) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&xhat[r]) {
                    *d = scale * (g - sg - xh * sgx);
                }
            } else {
                for (d, &g) in dx[r.clone()].iter_mut().zip(&dy[r]) {
                    *d = scale * g;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
