//! Deployment schedules: ordered `(level, batches)` segments over a table of intensities.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corrupt::CorruptionKind;
use crate::error::{OndaError, Result};

/// Intensities of the named levels L0..L5.
pub const LEVELS: [f64; 6] = [0.0, 0.15, 0.30, 0.45, 0.60, 0.90];
pub const DEFAULT_SEGMENT_BATCHES: usize = 375;
pub const PRESET_NAMES: [&str; 6] = [
    "increasing_storm",
    "one_pass",
    "storm_a",
    "storm_b",
    "storm_c",
    "fog",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSchedule {
    #[serde(default)]
    pub name: String,
    pub levels: Vec<f64>,
    /// `(level index, number of batches)`.
    pub segments: Vec<(usize, usize)>,
    #[serde(default)]
    pub corruption: CorruptionKind,
}

/// A change of level between consecutive segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Boundary {
    /// First batch of the new segment.
    pub batch: usize,
    pub from: usize,
    pub to: usize,
}

impl DomainSchedule {
    pub fn new(
        name: &str,
        segments: Vec<(usize, usize)>,
        corruption: CorruptionKind,
    ) -> Result<Self> {
        let s = DomainSchedule {
            name: name.to_string(),
            levels: LEVELS.to_vec(),
            segments,
            corruption,
        };
        s.validate()?;
        Ok(s)
    }

    fn from_levels(name: &str, levels: &[usize], seg: usize, kind: CorruptionKind) -> Self {
        Self::new(name, levels.iter().map(|&l| (l, seg)).collect(), kind)
            .expect("preset schedules are valid")
    }

    /// Clear start, then L1..L5 and back down to L0.
    pub fn increasing_storm(seg: usize) -> Self {
        Self::from_levels(
            "increasing_storm",
            &[0, 1, 2, 3, 4, 5, 4, 3, 2, 1, 0],
            seg,
            CorruptionKind::Rain,
        )
    }

    /// Oscillating intensity with a slow upward drift.
    pub fn storm_a(seg: usize) -> Self {
        Self::from_levels(
            "storm_a",
            &[1, 2, 1, 3, 2, 4, 3, 5, 4, 2, 0],
            seg,
            CorruptionKind::Rain,
        )
    }

    /// Sudden ramp to the hardest level.
    pub fn storm_b(seg: usize) -> Self {
        Self::from_levels("storm_b", &[0, 3, 5, 4, 1, 0], seg, CorruptionKind::Rain)
    }

    /// Starts at the hardest level.
    pub fn storm_c(seg: usize) -> Self {
        Self::from_levels("storm_c", &[5, 3, 4, 1, 2, 0], seg, CorruptionKind::Rain)
    }

    pub fn fog(seg: usize) -> Self {
        Self::from_levels(
            "fog",
            &[0, 1, 2, 3, 4, 5, 4, 3, 2, 1, 0],
            seg,
            CorruptionKind::Fog,
        )
    }

    /// A single level held for `batches` batches.
    pub fn stationary(level: usize, batches: usize) -> Result<Self> {
        Self::new("stationary", vec![(level, batches)], CorruptionKind::Rain)
    }

    /// Looks up a preset by name; `one_pass` is the increasing storm at a third of the length.
    pub fn preset(name: &str, seg: usize) -> Result<Self> {
        Ok(match name {
            "increasing_storm" => Self::increasing_storm(seg),
            "one_pass" => {
                let mut s = Self::increasing_storm((seg / 3).max(1));
                s.name = "one_pass".into();
                s
            }
            "storm_a" => Self::storm_a(seg),
            "storm_b" => Self::storm_b(seg),
            "storm_c" => Self::storm_c(seg),
            "fog" => Self::fog(seg),
            other => {
                return Err(OndaError::InvalidArgument(format!(
                    "unknown schedule '{other}', expected one of {PRESET_NAMES:?}"
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OndaError::InvalidArgument(m));
        if self.levels.is_empty() || self.segments.is_empty() {
            return bad("schedule needs levels and segments".into());
        }
        if let Some(l) = self.levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return bad(format!("level intensity {l} outside [0, 1]"));
        }
        for (i, &(level, batches)) in self.segments.iter().enumerate() {
            if level >= self.levels.len() {
                return bad(format!(
                    "segment {i} uses level {level} of {}",
                    self.levels.len()
                ));
            }
            if batches == 0 {
                return bad(format!("segment {i} has no batches"));
            }
        }
        Ok(())
    }

    pub fn total_batches(&self) -> usize {
        self.segments.iter().map(|s| s.1).sum()
    }

    /// Segment index containing batch `t`, or `None` past the end.
    pub fn segment_of(&self, t: usize) -> Option<usize> {
        let mut end = 0;
        for (i, s) in self.segments.iter().enumerate() {
            end += s.1;
            if t < end {
                return Some(i);
            }
        }
        None
    }

    pub fn level_at(&self, t: usize) -> Option<usize> {
        self.segment_of(t).map(|i| self.segments[i].0)
    }

    pub fn phi_at(&self, t: usize) -> Option<f64> {
        self.level_at(t).map(|l| self.levels[l])
    }

    /// First batch index of every segment.
    pub fn segment_starts(&self) -> Vec<usize> {
        self.segments
            .iter()
            .scan(0, |acc, s| {
                let start = *acc;
                *acc += s.1;
                Some(start)
            })
            .collect()
    }

    /// Every place where the level changes between adjacent segments.
    pub fn boundaries(&self) -> Vec<Boundary> {
        let starts = self.segment_starts();
        self.segments
            .windows(2)
            .zip(&starts[1..])
            .filter(|(w, _)| w[0].0 != w[1].0)
            .map(|(w, &batch)| Boundary {
                batch,
                from: w[0].0,
                to: w[1].0,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: DomainSchedule = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increasing_storm_shape() {
        let s = DomainSchedule::increasing_storm(DEFAULT_SEGMENT_BATCHES);
        let levels: Vec<usize> = s.segments.iter().map(|x| x.0).collect();
        assert_eq!(levels, [0, 1, 2, 3, 4, 5, 4, 3, 2, 1, 0]);
        assert!(s.segments.iter().all(|x| x.1 == 375));
        assert_eq!(s.boundaries().len(), 10);
        assert_eq!(
            s.boundaries()[0],
            Boundary {
                batch: 375,
                from: 0,
                to: 1
            }
        );
        assert_eq!(s.level_at(375 * 5), Some(5));
        assert_eq!(s.level_at(375 * 11), None);
    }

    #[test]
    fn storm_c_starts_hardest() {
        let s = DomainSchedule::storm_c(10);
        assert_eq!(s.level_at(0), Some(LEVELS.len() - 1));
    }

    #[test]
    fn json_round_trip() {
        let s = DomainSchedule::storm_a(7);
        let back = DomainSchedule::from_json(&s.to_json()).unwrap();
        assert_eq!(s, back);
        let raw = r#"{"levels": [0.0, 0.5], "segments": [[0, 3], [1, 2]]}"#;
        let t = DomainSchedule::from_json(raw).unwrap();
        assert_eq!(t.total_batches(), 5);
        assert_eq!(t.corruption, CorruptionKind::Rain);
    }

    #[test]
    fn invalid_schedules_rejected() {
        for raw in [
            r#"{"levels": [0.0], "segments": [[1, 3]]}"#,
            r#"{"levels": [0.0], "segments": [[0, 0]]}"#,
            r#"{"levels": [1.5], "segments": [[0, 1]]}"#,
            r#"{"levels": [0.0], "segments": []}"#,
        ] {
            assert!(DomainSchedule::from_json(raw).is_err(), "{raw}");
        }
        assert!(DomainSchedule::preset("hail", 5).is_err());
    }

    #[test]
    fn presets_resolve() {
        for name in PRESET_NAMES {
            let s = DomainSchedule::preset(name, 30).unwrap();
            assert_eq!(s.name, name);
        }
        assert_eq!(
            DomainSchedule::preset("one_pass", 375).unwrap().segments[0].1,
            125
        );
    }
}
