//! Fixed labeled subset of the source set replayed during adaptation.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OndaError, Result};
use crate::storm::streams::derive_seed;
use crate::storm::SceneSample;

const TAG_EPOCH: u64 = 0x5245_504c;

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    samples: Vec<SceneSample>,
    ids: Vec<usize>,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayManifest {
    pub seed: u64,
    pub capacity: usize,
    /// Indices into the source set, in buffer order.
    pub ids: Vec<usize>,
    pub scene_seeds: Vec<u64>,
}

impl ReplayBuffer {
    /// Uniform sample of `capacity` source items without replacement.
    pub fn build(source: &[SceneSample], capacity: usize, seed: u64) -> Result<Self> {
        if capacity > source.len() {
            return Err(OndaError::InvalidArgument(format!(
                "replay capacity {capacity} exceeds source size {}",
                source.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = index::sample(&mut rng, source.len(), capacity).into_vec();
        ids.sort_unstable();
        let samples = ids.iter().map(|&i| source[i].clone()).collect();
        Ok(ReplayBuffer { samples, ids, seed })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn samples(&self) -> &[SceneSample] {
        &self.samples
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, TAG_EPOCH, epoch));
        order.shuffle(&mut rng);
        order
    }

    /// The `step`-th batch of `k` samples from a sequence of independently shuffled epochs.
    pub fn sample_batch(&self, k: usize, step: usize) -> Result<Vec<&SceneSample>> {
        if self.is_empty() {
            return Err(OndaError::InvalidArgument("replay buffer is empty".into()));
        }
        let cap = self.samples.len();
        if k == 0 || k > cap {
            return Err(OndaError::InvalidArgument(format!(
                "replay batch {k} must be in 1..={cap}"
            )));
        }
        let start = step * k;
        let mut out = Vec::with_capacity(k);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for pos in start..start + k {
            let (epoch, offset) = (pos / cap, pos % cap);
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, self.epoch_order(epoch as u64)));
            }
            let order = &cached.as_ref().expect("filled above").1;
            out.push(&self.samples[order[offset]]);
        }
        Ok(out)
    }

    pub fn manifest(&self) -> ReplayManifest {
        ReplayManifest {
            seed: self.seed,
            capacity: self.len(),
            ids: self.ids.clone(),
            scene_seeds: self.samples.iter().map(|s| s.scene_seed).collect(),
        }
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.manifest())?)?;
        Ok(())
    }
}
