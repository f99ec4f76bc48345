//! Shared fixtures for the benchmarks.

use onda_core::proto::{PrototypeAccumulator, PROTO_LAMBDA};
use onda_core::segnet::{init_model, ArchConfig};
use onda_core::storm::{batch_of, corrupt, render, CorruptionKind, SceneSample};
use onda_core::{OndaModels, Tensor};

pub fn arch(height: usize, width: usize) -> ArchConfig {
    ArchConfig {
        height,
        width,
        ..Default::default()
    }
}

/// `n` rendered scenes at intensity `phi`.
pub fn samples(n: usize, phi: f64, arch: &ArchConfig) -> Vec<SceneSample> {
    (0..n as u64)
        .map(|s| {
            let (clean, labels) = render(s, arch.height, arch.width);
            SceneSample {
                image: corrupt(&clean, phi, s + 1_000, CorruptionKind::Rain),
                labels,
                scene_seed: s,
                phi,
            }
        })
        .collect()
}

pub fn batch(samples: &[SceneSample]) -> (Tensor, Vec<usize>) {
    batch_of(&samples.iter().collect::<Vec<_>>())
}

/// Randomly initialized models with a bank fit to labeled source scenes.
pub fn models(arch: &ArchConfig) -> OndaModels {
    let source = init_model(arch, 7).expect("valid arch");
    let (x, labels) = batch(&samples(8, 0.0, arch));
    let (features, _) = source.infer(&x).expect("forward");
    let mut acc = PrototypeAccumulator::new(arch.num_classes, arch.feature_dim);
    acc.add(&features, &labels).expect("shapes match");
    OndaModels::from_source(&source, acc.finish(PROTO_LAMBDA).expect("non-empty"))
}
