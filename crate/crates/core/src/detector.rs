//! Domain-shift detection from the static model's confidence stream.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{OndaError, Result};
use crate::tensor::Tensor;

pub const HISTORY_CAP: usize = 100_000;

/// Mean over pixels of the per-pixel maximum class probability of `[N, C, H, W]` probabilities.
pub fn batch_confidence(probs: &Tensor) -> Result<f64> {
    probs.expect_rank("batch_confidence", 4)?;
    let [n, c, h, w] = probs.dims4();
    if n == 0 {
        return Err(OndaError::EmptyBatch);
    }
    let hw = h * w;
    let d = probs.data();
    let mut total = 0.0;
    for img in 0..n {
        let base = img * c * hw;
        for q in 0..hw {
            let mut best = d[base + q];
            for k in 1..c {
                best = best.max(d[base + k * hw + q]);
            }
            total += best;
        }
    }
    Ok(total / (n * hw) as f64)
}

/// `w[i] = 0.54 − 0.46·cos(2πi/(n−1))`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub window: usize,
    pub threshold: f64,
    pub debounce_len: usize,
    /// Divide by `Σw` instead of `n` when smoothing.
    #[serde(default)]
    pub normalized: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            window: 40,
            threshold: 2e-4,
            debounce_len: 5,
            normalized: false,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.debounce_len == 0 || !(self.threshold >= 0.0) {
            return Err(OndaError::InvalidArgument(format!(
                "detector needs window ≥ 2, debounce ≥ 1 and threshold ≥ 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Toward harder domains (confidence falling).
    Forward,
    /// Toward the source (confidence rising).
    Backward,
}

impl Direction {
    pub fn sign(self) -> i8 {
        match self {
            Direction::Forward => -1,
            Direction::Backward => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub t: usize,
    pub direction: Direction,
    pub mu: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorRecord {
    pub t: usize,
    pub z: f64,
    pub mu: Option<f64>,
    pub indicator: i8,
}

/// Result of one [`DetectorState::push`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub indicator: i8,
    /// `None` until the window is full.
    pub mu: Option<f64>,
    pub event: Option<SwitchEvent>,
}

#[derive(Debug, Clone)]
pub struct DetectorState {
    cfg: DetectorConfig,
    weights: Vec<f64>,
    scale: f64,
    /// Newest confidence first.
    window: VecDeque<f64>,
    mu_prev: Option<f64>,
    t: usize,
    run_sign: i8,
    run_len: usize,
    /// Set after an event until the raw indicator has been zero for `debounce_len` batches.
    latched: bool,
    quiet: usize,
    history: VecDeque<DetectorRecord>,
    events: Vec<SwitchEvent>,
}

impl DetectorState {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = hamming(cfg.window);
        let scale = if cfg.normalized {
            weights.iter().sum()
        } else {
            cfg.window as f64
        };
        Ok(DetectorState {
            cfg,
            weights,
            scale,
            window: VecDeque::with_capacity(cfg.window),
            mu_prev: None,
            t: 0,
            run_sign: 0,
            run_len: 0,
            latched: false,
            quiet: 0,
            history: VecDeque::new(),
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Feeds the confidence of the next batch.
    pub fn push(&mut self, z: f64) -> Observation {
        let t = self.t;
        self.t += 1;
        if self.window.len() == self.cfg.window {
            self.window.pop_back();
        }
        self.window.push_front(z);
        let mu = (self.window.len() == self.cfg.window).then(|| {
            self.window
                .iter()
                .zip(&self.weights)
                .map(|(z, w)| z * w)
                .sum::<f64>()
                / self.scale
        });
        let mut indicator = 0;
        if let (Some(m), Some(p)) = (mu, self.mu_prev) {
            if self.t > self.cfg.window + 1 {
                let d = m - p;
                indicator = if d > self.cfg.threshold {
                    1
                } else if d < -self.cfg.threshold {
                    -1
                } else {
                    0
                };
            }
        }
        self.mu_prev = mu;
        let event = self.debounce(t, indicator, mu.unwrap_or(f64::NAN), z);
        if self.history.len() == HISTORY_CAP {
            self.history.pop_front();
        }
        self.history.push_back(DetectorRecord {
            t,
            z,
            mu,
            indicator,
        });
        Observation {
            indicator,
            mu,
            event,
        }
    }

    fn debounce(&mut self, t: usize, indicator: i8, mu: f64, z: f64) -> Option<SwitchEvent> {
        if indicator == 0 {
            self.run_sign = 0;
            self.run_len = 0;
            self.quiet += 1;
            if self.quiet >= self.cfg.debounce_len {
                self.latched = false;
            }
            return None;
        }
        self.quiet = 0;
        if indicator == self.run_sign {
            self.run_len += 1;
        } else {
            self.run_sign = indicator;
            self.run_len = 1;
        }
        if self.latched || self.run_len < self.cfg.debounce_len {
            return None;
        }
        self.run_sign = 0;
        self.run_len = 0;
        self.latched = true;
        let direction = if indicator < 0 {
            Direction::Forward
        } else {
            Direction::Backward
        };
        let e = SwitchEvent {
            t,
            direction,
            mu,
            z,
        };
        self.events.push(e);
        Some(e)
    }

    pub fn history(&self) -> impl Iterator<Item = &DetectorRecord> {
        self.history.iter()
    }

    pub fn events(&self) -> &[SwitchEvent] {
        &self.events
    }

    /// Events as JSON lines.
    pub fn event_log(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
            .collect()
    }
}
