//! Experiment runner: pretraining, online adaptation, baselines and result tables.

mod baselines;
mod online;
mod report;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use baselines::{entropy, run_baseline, BaselineKind};
pub use online::{calibrate_threshold, run_onda, segment_passes, OnlineRun, SegmentEval};
pub use report::{
    aggregate, online_rows, static_row, write_online_run, write_table, ResultRow, ResultTable,
};
pub use train::{
    evaluate, evaluate_levels, pretrain, run_offline, run_supervised, source_bank, Pretrained,
};

use crate::detector::DetectorConfig;
use crate::error::{OndaError, Result};
use crate::policy::PolicyKind;
use crate::segnet::ArchConfig;
use crate::self_training::Hyperparams;
use crate::storm::{DomainSchedule, StreamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Onda,
    BnAdapt,
    EntropyMin,
    Offline,
    Supervised,
    EvalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub buffer: u64,
}

impl Seeds {
    pub fn from_base(seed: u64) -> Self {
        Seeds {
            model: seed,
            data: seed.wrapping_add(1_000),
            buffer: seed.wrapping_add(2_000),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr: f64,
    /// Epoch (0-based) from which the learning rate is multiplied by 0.1.
    pub decay_epoch: usize,
    pub batch: usize,
}

impl TrainSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    /// Confidence threshold; calibrated from the source stream when absent.
    pub t_c: Option<f64>,
    /// Percentile of source-stream smoothed confidence used for calibration.
    pub percentile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub arch: ArchConfig,
    pub stream: StreamConfig,
    pub hyper: Hyperparams,
    pub policy: PolicySpec,
    pub detector: DetectorConfig,
    pub buffer: usize,
    pub schedule: String,
    pub segment_batches: usize,
    pub seeds: Seeds,
    pub pretrain: TrainSchedule,
    pub offline: TrainSchedule,
    /// Frames per level in offline and supervised training sets.
    pub offline_frames: usize,
    /// Source-stream batches used to calibrate the confidence threshold.
    pub calibration_batches: usize,
    #[serde(default)]
    pub baseline: Option<BaselineKind>,
    /// Level trained by offline and supervised modes; `None` trains on all levels.
    #[serde(default)]
    pub level: Option<usize>,
}

impl RunConfig {
    /// Full-size benchmark.
    pub fn full() -> Self {
        RunConfig {
            mode: Mode::Onda,
            arch: ArchConfig::default(),
            stream: StreamConfig::default(),
            hyper: Hyperparams::default(),
            policy: PolicySpec {
                kind: PolicyKind::Hs,
                t_c: None,
                percentile: 5.0,
            },
            detector: DetectorConfig::default(),
            buffer: 500,
            schedule: "increasing_storm".into(),
            segment_batches: 375,
            seeds: Seeds::from_base(0),
            pretrain: TrainSchedule {
                epochs: 20,
                lr: 0.01,
                decay_epoch: 15,
                batch: 8,
            },
            offline: TrainSchedule {
                epochs: 10,
                lr: 1e-3,
                decay_epoch: 8,
                batch: 4,
            },
            offline_frames: 1500,
            calibration_batches: 200,
            baseline: None,
            level: None,
        }
    }

    /// Reduced images, sets and segment lengths for single-core test runs.
    pub fn compact() -> Self {
        let mut c = Self::full();
        c.arch.height = 24;
        c.arch.width = 32;
        c.stream = StreamConfig {
            height: 24,
            width: 32,
            source_train: 600,
            val_per_level: 100,
            batch_size: 4,
        };
        c.buffer = 150;
        c.segment_batches = 120;
        c.pretrain = TrainSchedule {
            epochs: 40,
            lr: 0.01,
            decay_epoch: 30,
            batch: 4,
        };
        c.offline_frames = 240;
        c.calibration_batches = 240;
        c.hyper.lr_online = 5e-3;
        c.detector.window = 80;
        c.detector.threshold = 6e-5;
        c
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds::from_base(seed);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.hyper.validate()?;
        self.detector.validate()?;
        if self.arch.height != self.stream.height || self.arch.width != self.stream.width {
            return Err(OndaError::InvalidArgument(
                "architecture and stream image sizes differ".into(),
            ));
        }
        if self.buffer > self.stream.source_train {
            return Err(OndaError::InvalidArgument(format!(
                "buffer {} exceeds source set {}",
                self.buffer, self.stream.source_train
            )));
        }
        if self.segment_batches == 0 || self.pretrain.batch == 0 || self.offline.batch == 0 {
            return Err(OndaError::InvalidArgument(
                "empty segments or batches".into(),
            ));
        }
        self.schedule()?;
        Ok(())
    }

    /// The schedule named in the config, or a JSON schedule file if the name is a path.
    pub fn schedule(&self) -> Result<DomainSchedule> {
        if self.schedule.ends_with(".json") {
            DomainSchedule::load(Path::new(&self.schedule))
        } else {
            DomainSchedule::preset(&self.schedule, self.segment_batches)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        for c in [RunConfig::full(), RunConfig::compact()] {
            c.validate().unwrap();
            let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn lr_decay() {
        let s = RunConfig::full().pretrain;
        assert_eq!(s.lr_at(14), 0.01);
        assert!((s.lr_at(15) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let mut c = RunConfig::compact();
        c.arch.height = 48;
        assert!(c.validate().is_err());
        let mut c = RunConfig::compact();
        c.buffer = 10_000;
        assert!(c.validate().is_err());
    }
}
