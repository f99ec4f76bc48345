//! Prior-model switching: how much the static versus dynamic model shapes the pseudo-labels.

use serde::{Deserialize, Serialize};

use crate::detector::{Direction, SwitchEvent};
use crate::error::{OndaError, Result};
use crate::segnet::{promote_dynamic, ModelCheckpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Confidence threshold.
    Cs,
    /// Linear blend between two confidence thresholds.
    Scs,
    /// Direction of the last detected domain change.
    Cds,
    /// Confidence outside a band, change direction inside it.
    Hs,
    StaticOnly,
    DynamicOnly,
}

impl std::str::FromStr for PolicyKind {
    type Err = OndaError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cs" => PolicyKind::Cs,
            "scs" => PolicyKind::Scs,
            "cds" => PolicyKind::Cds,
            "hs" => PolicyKind::Hs,
            "static_only" | "static" => PolicyKind::StaticOnly,
            "dynamic_only" | "dynamic" => PolicyKind::DynamicOnly,
            other => {
                return Err(OndaError::InvalidArgument(format!(
                    "unknown policy '{other}' (cs, scs, cds, hs, static_only, dynamic_only)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub t_c: f64,
    pub t_s: f64,
    pub t_d: f64,
    pub t_ca: f64,
    pub t_cb: f64,
}

impl PolicyConfig {
    /// Thresholds derived from a single confidence level `t_c`.
    pub fn from_base(kind: PolicyKind, t_c: f64) -> Self {
        PolicyConfig {
            kind,
            t_c,
            t_s: t_c,
            t_d: t_c - 0.05,
            t_ca: t_c,
            t_cb: t_c - 0.08,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_s > self.t_d) {
            return Err(OndaError::InvalidArgument(format!(
                "soft switch needs t_s > t_d, got {} and {}",
                self.t_s, self.t_d
            )));
        }
        if !(self.t_ca > self.t_cb) {
            return Err(OndaError::InvalidArgument(format!(
                "hybrid switch needs t_ca > t_cb, got {} and {}",
                self.t_ca, self.t_cb
            )));
        }
        Ok(())
    }
}

pub fn delta_cs(mu: f64, t_c: f64) -> f64 {
    if mu > t_c {
        1.0
    } else {
        0.0
    }
}

pub fn delta_scs(mu: f64, t_s: f64, t_d: f64) -> Result<f64> {
    if !(t_s > t_d) {
        return Err(OndaError::InvalidArgument(format!(
            "soft switch needs t_s > t_d, got {t_s} and {t_d}"
        )));
    }
    Ok(((mu - t_d) / (t_s - t_d)).clamp(0.0, 1.0))
}

/// `indicator` is the sign of the latest validated event, 0 when none arrived this batch.
pub fn delta_cds(indicator: i8, delta_prev: f64) -> f64 {
    match indicator.signum() {
        1 => 1.0,
        -1 => 0.0,
        _ => delta_prev,
    }
}

pub fn delta_hs(mu: f64, indicator: i8, delta_prev: f64, t_ca: f64, t_cb: f64) -> Result<f64> {
    if !(t_ca > t_cb) {
        return Err(OndaError::InvalidArgument(format!(
            "hybrid switch needs t_ca > t_cb, got {t_ca} and {t_cb}"
        )));
    }
    Ok(if mu > t_ca {
        1.0
    } else if mu < t_cb {
        0.0
    } else {
        delta_cds(indicator, delta_prev)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Promotion {
    pub t: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone)]
pub struct PolicyState {
    cfg: PolicyConfig,
    delta_prev: f64,
    /// Direction memory for the change-direction branch.
    cds_prev: f64,
    promotions: Vec<Promotion>,
}

impl PolicyState {
    pub fn new(cfg: PolicyConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PolicyState {
            cfg,
            delta_prev: 1.0,
            cds_prev: 1.0,
            promotions: Vec::new(),
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn delta_prev(&self) -> f64 {
        self.delta_prev
    }

    /// δ for the current batch. `mu` is `None` while the detector warms up, in
    /// which case confidence-based branches fall back to the static model.
    pub fn delta(&mut self, mu: Option<f64>, event: Option<&SwitchEvent>) -> f64 {
        let indicator = event.map_or(0, |e| e.direction.sign());
        self.cds_prev = delta_cds(indicator, self.cds_prev);
        let c = &self.cfg;
        let d = match (c.kind, mu) {
            (PolicyKind::StaticOnly, _) => 1.0,
            (PolicyKind::DynamicOnly, _) => 0.0,
            (PolicyKind::Cds, _) => self.cds_prev,
            (_, None) => 1.0,
            (PolicyKind::Cs, Some(m)) => delta_cs(m, c.t_c),
            (PolicyKind::Scs, Some(m)) => delta_scs(m, c.t_s, c.t_d).expect("validated"),
            (PolicyKind::Hs, Some(m)) => {
                if m > c.t_ca {
                    1.0
                } else if m < c.t_cb {
                    0.0
                } else {
                    self.cds_prev
                }
            }
        };
        self.delta_prev = d;
        d
    }

    /// Promotes `live` into `dynamic` and logs it.
    pub fn on_event(
        &mut self,
        event: &SwitchEvent,
        live: &ModelCheckpoint,
        dynamic: &mut ModelCheckpoint,
    ) {
        promote_dynamic(dynamic, live);
        self.promotions.push(Promotion {
            t: event.t,
            direction: event.direction,
        });
    }

    pub fn promotions(&self) -> &[Promotion] {
        &self.promotions
    }
}
