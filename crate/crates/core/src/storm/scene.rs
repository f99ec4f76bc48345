//! Procedural street-like scenes with exact per-pixel labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["sky", "ground", "block", "disk", "pole"];
pub const SKY: usize = 0;
pub const GROUND: usize = 1;
pub const BLOCK: usize = 2;
pub const DISK: usize = 3;
pub const POLE: usize = 4;

/// Base RGB color per class.
pub const CLASS_COLORS: [[f64; 3]; NUM_CLASSES] = [
    [0.555, 0.63, 0.73],
    [0.48, 0.46, 0.43],
    [0.60, 0.49, 0.445],
    [0.45, 0.56, 0.48],
    [0.65, 0.62, 0.50],
];
pub const TEXTURE_STD: f64 = 0.03;
pub const POLE_WIDTH: usize = 2;

/// Image/label pair for one rendered scene.
#[derive(Debug, Clone)]
pub struct SceneSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Class id per pixel, row-major `H·W`.
    pub labels: Vec<usize>,
    pub scene_seed: u64,
    /// Corruption intensity applied to `image`.
    pub phi: f64,
}

/// Range of horizon rows: `[h/3, h/2]` inclusive.
pub fn horizon_range(h: usize) -> (usize, usize) {
    (h / 3, h / 2)
}

/// Rasterizes the label map of a scene.
pub fn render_labels(seed: u64, h: usize, w: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layout(&mut rng, h, w)
}

fn layout(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<usize> {
    let (hlo, hhi) = horizon_range(h);
    let horizon = rng.random_range(hlo..=hhi);
    let mut labels = vec![GROUND; h * w];
    labels[..horizon * w].fill(SKY);
    let ground_h = h - horizon;

    let blocks = rng.random_range(1..=3);
    for _ in 0..blocks {
        let bw = rng.random_range((w / 8).max(1)..=(w / 3).max(1));
        let bh = rng
            .random_range((h / 8).max(1)..=(h / 3).max(1))
            .min(ground_h);
        let x0 = rng.random_range(0..=w - bw);
        let y0 = rng.random_range(horizon..=h - bh);
        for y in y0..y0 + bh {
            labels[y * w + x0..y * w + x0 + bw].fill(BLOCK);
        }
    }

    let disks = rng.random_range(0..=2);
    for _ in 0..disks {
        let r = rng.random_range((h / 12).max(1)..=(h / 6).max(1)) as isize;
        let cx = rng.random_range(0..w) as isize;
        let cy = rng.random_range(horizon..h) as isize;
        for y in (cy - r).max(horizon as isize)..=(cy + r).min(h as isize - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as isize - 1) {
                if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                    labels[y as usize * w + x as usize] = DISK;
                }
            }
        }
    }

    let x0 = rng.random_range(0..=w - POLE_WIDTH);
    for y in horizon..h {
        labels[y * w + x0..y * w + x0 + POLE_WIDTH].fill(POLE);
    }
    labels
}

/// Renders a clean scene: labels plus a textured color image.
pub fn render(seed: u64, h: usize, w: usize) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = layout(&mut rng, h, w);
    let noise = Normal::new(0.0, TEXTURE_STD).expect("valid std");
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for (q, &c) in labels.iter().enumerate() {
        for ch in 0..3 {
            let v = CLASS_COLORS[c][ch] + noise.sample(&mut rng);
            data[ch * hw + q] = v.clamp(0.0, 1.0);
        }
    }
    (Tensor::from_parts(vec![3, h, w], data), labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let (a, la) = render(42, 48, 64);
        let (b, lb) = render(42, 48, 64);
        assert!(a.bit_eq(&b));
        assert_eq!(la, lb);
        let (c, _) = render(43, 48, 64);
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn at_least_three_classes_and_always_sky_ground_pole() {
        for seed in 0..200 {
            let labels = render_labels(seed, 48, 64);
            let mut seen = [false; NUM_CLASSES];
            labels.iter().for_each(|&c| seen[c] = true);
            assert!(seen[SKY] && seen[GROUND] && seen[POLE], "seed {seed}");
            assert!(seen.iter().filter(|&&s| s).count() >= 3);
        }
    }

    #[test]
    fn sky_and_pole_frequencies_match_geometry() {
        let (h, w, n) = (48, 64, 1000);
        let mut counts = [0usize; NUM_CLASSES];
        for seed in 0..n {
            render_labels(seed as u64 + 77, h, w)
                .iter()
                .for_each(|&c| counts[c] += 1);
        }
        let (lo, hi) = horizon_range(h);
        let mean_horizon = (lo + hi) as f64 / 2.0;
        let sky = mean_horizon * w as f64;
        let pole = POLE_WIDTH as f64 * (h as f64 - mean_horizon);
        let got_sky = counts[SKY] as f64 / n as f64;
        let got_pole = counts[POLE] as f64 / n as f64;
        assert!((got_sky / sky - 1.0).abs() < 0.05, "{got_sky} vs {sky}");
        assert!((got_pole / pole - 1.0).abs() < 0.05, "{got_pole} vs {pole}");
    }

    #[test]
    fn image_in_unit_range() {
        let (img, labels) = render(5, 48, 64);
        assert_eq!(img.shape(), &[3, 48, 64]);
        assert_eq!(labels.len(), 48 * 64);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
