//! Source/validation splits and the unlabeled deployment stream.

use serde::{Deserialize, Serialize};

use super::corrupt::corrupt;
use super::scene::{render, render_labels, SceneSample};
use super::schedule::DomainSchedule;
use crate::tensor::Tensor;

const TAG_TRAIN: u64 = 1;
const TAG_VAL: u64 = 2;
const TAG_STREAM: u64 = 3;
const TAG_VAL_NOISE: u64 = 4;
const TAG_LEVEL_SET: u64 = 6;
const NOISE_BIT: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub height: usize,
    pub width: usize,
    pub source_train: usize,
    pub val_per_level: usize,
    pub batch_size: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            height: 48,
            width: 64,
            source_train: 2000,
            val_per_level: 250,
            batch_size: 4,
        }
    }
}

/// Mixes a base seed with a stream tag and an index.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: StreamConfig,
    pub schedule: DomainSchedule,
    pub split_seed: u64,
    /// Clean labeled source scenes.
    pub source_train: Vec<SceneSample>,
    /// One validation set per schedule level; all levels share scene seeds.
    pub val: Vec<Vec<SceneSample>>,
}

/// One unlabeled batch of the deployment stream.
#[derive(Debug, Clone)]
pub struct TargetBatch {
    pub index: usize,
    /// `[B, 3, H, W]`.
    pub images: Tensor,
}

/// Ground truth behind a stream batch, for evaluation and oracle baselines only.
#[derive(Debug, Clone)]
pub struct BatchTruth {
    pub level: usize,
    pub phi: f64,
    pub labels: Vec<usize>,
}

pub fn make_streams(schedule: &DomainSchedule, split_seed: u64, config: StreamConfig) -> Benchmark {
    let (h, w) = (config.height, config.width);
    let source_train = (0..config.source_train as u64)
        .map(|i| {
            let seed = derive_seed(split_seed, TAG_TRAIN, i);
            let (image, labels) = render(seed, h, w);
            SceneSample {
                image,
                labels,
                scene_seed: seed,
                phi: 0.0,
            }
        })
        .collect();
    let clean: Vec<(u64, Tensor, Vec<usize>)> = (0..config.val_per_level as u64)
        .map(|i| {
            let seed = derive_seed(split_seed, TAG_VAL, i);
            let (image, labels) = render(seed, h, w);
            (seed, image, labels)
        })
        .collect();
    let val = schedule
        .levels
        .iter()
        .enumerate()
        .map(|(l, &phi)| {
            clean
                .iter()
                .enumerate()
                .map(|(i, (seed, image, labels))| {
                    let noise = derive_seed(split_seed, TAG_VAL_NOISE, (l * 1_000_003 + i) as u64);
                    SceneSample {
                        image: corrupt(image, phi, noise, schedule.corruption),
                        labels: labels.clone(),
                        scene_seed: *seed,
                        phi,
                    }
                })
                .collect()
        })
        .collect();
    Benchmark {
        config,
        schedule: schedule.clone(),
        split_seed,
        source_train,
        val,
    }
}

impl Benchmark {
    pub fn target_stream(&self) -> TargetStream<'_> {
        TargetStream {
            bench: self,
            next: 0,
        }
    }

    /// Renders deployment batch `t`, a pure function of `(schedule, split_seed, t)`.
    pub fn target_batch(&self, t: usize) -> Option<TargetBatch> {
        let phi = self.schedule.phi_at(t)?;
        let b = self.config.batch_size;
        let frames: Vec<Tensor> = (0..b)
            .map(|j| self.frame(TAG_STREAM, (t * b + j) as u64, phi).0)
            .collect();
        Some(TargetBatch {
            index: t,
            images: Tensor::stack(&frames.iter().collect::<Vec<_>>())
                .expect("frames share a shape"),
        })
    }

    pub fn truth(&self, t: usize) -> Option<BatchTruth> {
        let level = self.schedule.level_at(t)?;
        let b = self.config.batch_size;
        let (h, w) = (self.config.height, self.config.width);
        let labels = (0..b)
            .flat_map(|j| {
                render_labels(
                    derive_seed(self.split_seed, TAG_STREAM, (t * b + j) as u64),
                    h,
                    w,
                )
            })
            .collect();
        Some(BatchTruth {
            level,
            phi: self.schedule.levels[level],
            labels,
        })
    }

    /// A labeled set of `count` fresh frames at `level`, disjoint from the stream
    /// and validation scenes.
    pub fn level_set(&self, level: usize, count: usize) -> Vec<SceneSample> {
        let phi = self.schedule.levels[level];
        (0..count as u64)
            .map(|i| {
                let index = ((level as u64) << 40) | i;
                let (image, labels, scene_seed) = self.frame(TAG_LEVEL_SET, index, phi);
                SceneSample {
                    image,
                    labels,
                    scene_seed,
                    phi,
                }
            })
            .collect()
    }

    fn frame(&self, tag: u64, index: u64, phi: f64) -> (Tensor, Vec<usize>, u64) {
        let seed = derive_seed(self.split_seed, tag, index);
        let (image, labels) = render(seed, self.config.height, self.config.width);
        let noise = derive_seed(self.split_seed, tag | NOISE_BIT, index);
        (
            corrupt(&image, phi, noise, self.schedule.corruption),
            labels,
            seed,
        )
    }
}

pub struct TargetStream<'a> {
    bench: &'a Benchmark,
    next: usize,
}

impl Iterator for TargetStream<'_> {
    type Item = TargetBatch;

    fn next(&mut self) -> Option<TargetBatch> {
        let b = self.bench.target_batch(self.next)?;
        self.next += 1;
        Some(b)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self
            .bench
            .schedule
            .total_batches()
            .saturating_sub(self.next);
        (left, Some(left))
    }
}

/// Stacks samples into a `[B, 3, H, W]` batch plus flattened labels.
pub fn batch_of(samples: &[&SceneSample]) -> (Tensor, Vec<usize>) {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let labels = samples
        .iter()
        .flat_map(|s| s.labels.iter().copied())
        .collect();
    (
        Tensor::stack(&images).expect("samples share a shape"),
        labels,
    )
}
