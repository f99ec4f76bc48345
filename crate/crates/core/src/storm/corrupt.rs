//! Parametric weather-like corruption with intensity `phi`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const STREAKS_AT_FULL: f64 = 20.0;
pub const STREAK_AMPLITUDE: f64 = 0.4;
pub const NOISE_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    /// Contrast loss toward gray, diagonal streaks and sensor noise.
    #[default]
    Rain,
    /// Contrast blend toward white only.
    Fog,
}

impl CorruptionKind {
    fn blend_target(self) -> f64 {
        match self {
            CorruptionKind::Rain => 0.5,
            CorruptionKind::Fog => 1.0,
        }
    }
}

/// Unclipped additive pieces of a corruption, each `[3, H, W]` flat.
pub(crate) struct Parts {
    pub blend: Vec<f64>,
    pub streaks: Vec<f64>,
    pub noise: Vec<f64>,
}

pub(crate) fn parts(image: &Tensor, phi: f64, noise_seed: u64, kind: CorruptionKind) -> Parts {
    let (c, h, w) = dims3(image);
    let hw = h * w;
    let target = kind.blend_target();
    let blend = image
        .data()
        .iter()
        .map(|&x| (1.0 - 0.5 * phi) * x + 0.5 * phi * target)
        .collect();
    let mut streaks = vec![0.0; c * hw];
    let mut noise = vec![0.0; c * hw];
    if kind == CorruptionKind::Rain && phi > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let count = (STREAKS_AT_FULL * phi).round() as usize;
        let (lo, hi) = ((h / 6).max(1), (h / 3).max(1));
        for _ in 0..count {
            let len = rng.random_range(lo..=hi);
            let mut x = rng.random_range(0..w) as isize;
            let y0 = rng.random_range(0..h);
            for y in y0..(y0 + len).min(h) {
                if (0..w as isize).contains(&x) {
                    for ch in 0..c {
                        streaks[ch * hw + y * w + x as usize] = STREAK_AMPLITUDE * phi;
                    }
                }
                x += 1;
            }
        }
        let gauss = Normal::new(0.0, NOISE_STD * phi).expect("valid std");
        noise.iter_mut().for_each(|v| *v = gauss.sample(&mut rng));
    }
    Parts {
        blend,
        streaks,
        noise,
    }
}

/// Applies a corruption of intensity `phi ∈ [0, 1]`; `phi = 0` returns the input unchanged.
pub fn corrupt(image: &Tensor, phi: f64, noise_seed: u64, kind: CorruptionKind) -> Tensor {
    assert!((0.0..=1.0).contains(&phi), "phi {phi} outside [0, 1]");
    if phi == 0.0 {
        return image.clone();
    }
    let p = parts(image, phi, noise_seed, kind);
    let data = p
        .blend
        .iter()
        .zip(&p.streaks)
        .zip(&p.noise)
        .map(|((b, s), n)| (b + s + n).clamp(0.0, 1.0))
        .collect();
    Tensor::from_parts(image.shape().to_vec(), data)
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    match *t.shape() {
        [c, h, w] => (c, h, w),
        _ => panic!("expected a [C, H, W] image, got {:?}", t.shape()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storm::scene::render;

    #[test]
    fn zero_intensity_is_identity() {
        let (img, _) = render(3, 48, 64);
        for kind in [CorruptionKind::Rain, CorruptionKind::Fog] {
            assert!(corrupt(&img, 0.0, 9, kind).bit_eq(&img));
        }
    }

    #[test]
    fn output_is_clipped_sum_of_parts() {
        let (img, _) = render(4, 48, 64);
        let out = corrupt(&img, 0.6, 11, CorruptionKind::Rain);
        let p = parts(&img, 0.6, 11, CorruptionKind::Rain);
        for (i, &o) in out.data().iter().enumerate() {
            let want = (p.blend[i] + p.streaks[i] + p.noise[i]).clamp(0.0, 1.0);
            assert_eq!(o.to_bits(), want.to_bits());
        }
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn full_intensity_quarters_contrast_variance() {
        let (mut num, mut den) = (0.0, 0.0);
        for seed in 0..100 {
            let (img, _) = render(seed, 48, 64);
            let p = parts(&img, 1.0, seed + 1000, CorruptionKind::Rain);
            num += variance(&p.blend);
            den += variance(img.data());
        }
        assert!((num / den - 0.25).abs() < 1e-9);
    }

    #[test]
    fn streak_count_scales_with_phi() {
        let (img, _) = render(8, 48, 64);
        let lit = |phi: f64| {
            parts(&img, phi, 5, CorruptionKind::Rain)
                .streaks
                .iter()
                .filter(|&&s| s > 0.0)
                .count()
        };
        assert!(lit(0.9) > lit(0.15));
        let fog = parts(&img, 0.9, 5, CorruptionKind::Fog);
        assert!(fog.streaks.iter().chain(&fog.noise).all(|&v| v == 0.0));
    }

    #[test]
    fn fog_brightens() {
        let (img, _) = render(1, 48, 64);
        let out = corrupt(&img, 0.6, 2, CorruptionKind::Fog);
        assert!(out.data().iter().zip(img.data()).all(|(o, i)| o >= i));
    }

    fn variance(xs: &[f64]) -> f64 {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
    }
}
