//! Confusion matrices, IoU and harmonic means.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{CLASS_COLORS, NUM_CLASSES};
use crate::error::{OndaError, Result};

/// Pixel counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(OndaError::InvalidArgument(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            for label in [p, t] {
                if label >= self.classes {
                    return Err(OndaError::LabelOutOfRange {
                        label,
                        classes: self.classes,
                    });
                }
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class; `None` when the class is absent from both truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.classes).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut out = String::from("truth\\pred");
        for c in 0..self.classes {
            out.push(',');
            out.push_str(names.get(c).copied().unwrap_or("?"));
        }
        out.push('\n');
        for t in 0..self.classes {
            out.push_str(names.get(t).copied().unwrap_or("?"));
            for p in 0..self.classes {
                out.push_str(&format!(",{}", self.get(t, p)));
            }
            out.push('\n');
        }
        out
    }
}

/// Per-class IoU and their mean over present classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn miou(confusion: &ConfusionMatrix) -> Result<MiouReport> {
    if confusion.total() == 0 {
        return Err(OndaError::EmptyBatch);
    }
    let per_class = confusion.iou();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouReport { per_class, miou })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HMean {
    pub value: f64,
    /// Set when some input was zero and the mean is reported as 0.
    pub degenerate: bool,
}

pub fn hmean(values: &[f64]) -> Result<HMean> {
    if values.is_empty() {
        return Err(OndaError::InvalidArgument(
            "harmonic mean of nothing".into(),
        ));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(OndaError::InvalidArgument(format!("harmonic mean of {v}")));
    }
    if values.contains(&0.0) {
        return Ok(HMean {
            value: 0.0,
            degenerate: true,
        });
    }
    let inv: f64 = values.iter().map(|v| 1.0 / v).sum();
    Ok(HMean {
        value: values.len() as f64 / inv,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Forward,
    Backward,
}

/// Evaluation of one model on every level at one point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub pass: Pass,
    /// Level being streamed when the evaluation was taken.
    pub current_level: usize,
    pub per_level: Vec<MiouReport>,
    pub hmean: HMean,
}

impl MetricsRecord {
    pub fn new(
        step: usize,
        pass: Pass,
        current_level: usize,
        per_level: Vec<MiouReport>,
    ) -> Result<Self> {
        let values: Vec<f64> = per_level.iter().map(|r| r.miou).collect();
        let hmean = hmean(&values)?;
        Ok(MetricsRecord {
            step,
            pass,
            current_level,
            per_level,
            hmean,
        })
    }

    pub fn miou(&self) -> Vec<f64> {
        self.per_level.iter().map(|r| r.miou).collect()
    }
}

/// Writes a class map as a binary PPM using the class base colors.
pub fn write_label_ppm(path: &Path, labels: &[usize], h: usize, w: usize) -> Result<()> {
    let mut rgb = Vec::with_capacity(3 * h * w);
    for &c in labels {
        let color = CLASS_COLORS[c.min(NUM_CLASSES - 1)];
        rgb.extend(color.iter().map(|v| (v * 255.0).round() as u8));
    }
    write_ppm(path, &rgb, h, w)
}

/// Writes a `[3, H, W]` image in `[0, 1]` as a binary PPM.
pub fn write_image_ppm(path: &Path, chw: &[f64], h: usize, w: usize) -> Result<()> {
    let hw = h * w;
    let mut rgb = Vec::with_capacity(3 * hw);
    for q in 0..hw {
        for ch in 0..3 {
            rgb.push((chw[ch * hw + q].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_ppm(path, &rgb, h, w)
}

fn write_ppm(path: &Path, rgb: &[u8], h: usize, w: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(rgb)?;
    f.flush()?;
    Ok(())
}
