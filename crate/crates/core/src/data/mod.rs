//! Domain types for the study data and the containers that hold them.

mod csvio;
mod summary;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csvio::{export_dataset, ingest_dataset, DatasetPaths, IngestOptions};
pub use summary::{dataset_summary, DatasetSummary};
pub use synth::{generate_synthetic, SynthConfig};

/// Age used for the plausibility ceiling when none is supplied.
pub const DEFAULT_AGE: u32 = 20;
/// Capture length of one duty-cycle probe.
pub const DEFAULT_CAPTURE_S: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrSample {
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    /// Beats per minute.
    pub hr: f64,
}

/// One duty-cycle capture: a short burst of ~1 Hz heart-rate readings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub probe_id: String,
    pub participant_id: String,
    pub samples: Vec<HrSample>,
}

impl Probe {
    pub fn start(&self) -> f64 {
        self.samples.first().map_or(f64::NAN, |s| s.timestamp)
    }

    pub fn span(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp,
            _ => 0.0,
        }
    }

    /// Checks the probe invariants: non-empty, positive HR, strictly increasing
    /// timestamps and a span no longer than `capture_s`.
    pub fn validate(&self, capture_s: f64) -> std::result::Result<(), String> {
        if self.samples.is_empty() {
            return Err(format!("probe {} has no samples", self.probe_id));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if !(s.hr > 0.0 && s.hr.is_finite()) {
                return Err(format!("probe {}: non-positive hr {}", self.probe_id, s.hr));
            }
            if i > 0 && s.timestamp <= self.samples[i - 1].timestamp {
                return Err(format!(
                    "probe {}: timestamps not strictly increasing at {}",
                    self.probe_id, s.timestamp
                ));
            }
        }
        if self.span() > capture_s {
            return Err(format!(
                "probe {} spans {} s, more than the {} s capture",
                self.probe_id,
                self.span(),
                capture_s
            ));
        }
        Ok(())
    }
}

/// A state-anxiety self-report on a 1..=`scale_max` slider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaResponse {
    pub participant_id: String,
    pub timestamp: f64,
    pub rating: u32,
    pub scale_max: u32,
}

impl EmaResponse {
    pub fn new(
        participant_id: impl Into<String>,
        timestamp: f64,
        rating: u32,
        scale_max: u32,
    ) -> Result<Self> {
        if scale_max < 2 {
            return Err(Error::InvalidInput(format!("scale_max {scale_max} < 2")));
        }
        if rating < 1 || rating > scale_max {
            return Err(Error::InvalidInput(format!(
                "rating {rating} outside [1, {scale_max}]"
            )));
        }
        Ok(EmaResponse {
            participant_id: participant_id.into(),
            timestamp,
            rating,
            scale_max,
        })
    }

    /// Binary state-anxiety class: 0 for "not at all anxious" (rating 1), else 1.
    pub fn label(&self) -> u8 {
        binarize_rating(self.rating)
    }
}

pub fn binarize_rating(rating: u32) -> u8 {
    u8::from(rating > 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScaleId {
    #[serde(rename = "SIAS")]
    Sias,
    #[serde(rename = "BFNE")]
    Bfne,
    #[serde(rename = "DERS")]
    Ders,
    #[serde(rename = "DASS21")]
    Dass21,
    #[serde(rename = "ARSQ")]
    Arsq,
    #[serde(rename = "CDS2")]
    Cds2,
}

impl ScaleId {
    pub const ALL: [ScaleId; 6] = [
        ScaleId::Sias,
        ScaleId::Bfne,
        ScaleId::Ders,
        ScaleId::Dass21,
        ScaleId::Arsq,
        ScaleId::Cds2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleId::Sias => "SIAS",
            ScaleId::Bfne => "BFNE",
            ScaleId::Ders => "DERS",
            ScaleId::Dass21 => "DASS21",
            ScaleId::Arsq => "ARSQ",
            ScaleId::Cds2 => "CDS2",
        }
    }
}

impl fmt::Display for ScaleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScaleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScaleId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::UnknownScale(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleDeclaration {
    pub scale: ScaleId,
    pub item_count: usize,
    pub item_min: i32,
    pub item_max: i32,
}

impl ScaleDeclaration {
    pub fn contains(&self, value: i32) -> bool {
        (self.item_min..=self.item_max).contains(&value)
    }
}

/// Item counts and ranges of the six baseline instruments.
pub fn standard_scales() -> Vec<ScaleDeclaration> {
    let decl = |scale, item_count, item_min, item_max| ScaleDeclaration {
        scale,
        item_count,
        item_min,
        item_max,
    };
    vec![
        decl(ScaleId::Sias, 20, 0, 4),
        decl(ScaleId::Bfne, 12, 1, 5),
        decl(ScaleId::Ders, 36, 1, 5),
        decl(ScaleId::Dass21, 21, 0, 3),
        decl(ScaleId::Arsq, 18, 1, 6),
        decl(ScaleId::Cds2, 2, 0, 4),
    ]
}

/// Reverse-keyed item indices (1-based) of the standard instruments.
pub fn standard_reverse_items(scale: ScaleId) -> &'static [usize] {
    match scale {
        ScaleId::Sias => &[5, 9, 11],
        ScaleId::Bfne => &[2, 4, 7, 10],
        ScaleId::Ders => &[1, 2, 6, 7, 8, 10, 17, 20, 22, 24, 34],
        _ => &[],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraitItemResponse {
    pub participant_id: String,
    pub scale: ScaleId,
    /// 1-based item position within the scale.
    pub item_index: usize,
    pub value: Option<i32>,
    pub reverse_scored: bool,
}

/// Aggregated scale scores for one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitProfile {
    pub participant_id: String,
    pub scores: BTreeMap<ScaleId, f64>,
}

impl TraitProfile {
    pub fn score(&self, scale: ScaleId) -> f64 {
        self.scores.get(&scale).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub id: String,
    pub age: u32,
    /// Set when no age was supplied and [`DEFAULT_AGE`] was used.
    pub age_defaulted: bool,
    pub traits: TraitProfile,
    pub items: Vec<TraitItemResponse>,
    pub probes: Vec<Probe>,
    pub emas: Vec<EmaResponse>,
}

impl Participant {
    /// Age-adjusted maximum heart rate, `220 - age`.
    pub fn hr_ceiling(&self) -> f64 {
        220.0 - f64::from(self.age)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Ingested,
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub participants: Vec<Participant>,
    pub scales: Vec<ScaleDeclaration>,
    pub provenance: Provenance,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

impl Dataset {
    pub fn participant(&self, id: &str) -> Option<&Participant> {
        self.participants.iter().find(|p| p.id == id)
    }

    pub fn scale(&self, scale: ScaleId) -> Option<&ScaleDeclaration> {
        self.scales.iter().find(|d| d.scale == scale)
    }

    pub fn ema_count(&self) -> usize {
        self.participants.iter().map(|p| p.emas.len()).sum()
    }

    /// Checks container-level invariants (unique ids, valid ages).
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.participants {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate participant `{}`", p.id)));
            }
            if p.age == 0 || p.age >= 220 {
                return Err(Error::InvalidInput(format!(
                    "participant `{}`: age {} outside (0, 220)",
                    p.id, p.age
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_binarize_on_both_scales() {
        for scale_max in [5, 10] {
            for rating in 1..=scale_max {
                let ema = EmaResponse::new("p", 0.0, rating, scale_max).unwrap();
                assert_eq!(ema.label(), u8::from(rating > 1));
            }
        }
    }

    #[test]
    fn rating_out_of_range_rejected() {
        assert!(EmaResponse::new("p", 0.0, 0, 10).is_err());
        assert!(EmaResponse::new("p", 0.0, 11, 10).is_err());
        assert!(EmaResponse::new("p", 0.0, 6, 5).is_err());
    }

    #[test]
    fn scale_ids_parse() {
        for id in ScaleId::ALL {
            assert_eq!(id.as_str().parse::<ScaleId>().unwrap(), id);
        }
        assert!(matches!("GAD7".parse::<ScaleId>(), Err(Error::UnknownScale(_))));
    }

    #[test]
    fn probe_validation() {
        let mk = |ts: &[f64]| Probe {
            probe_id: "a".into(),
            participant_id: "p".into(),
            samples: ts.iter().map(|&t| HrSample { timestamp: t, hr: 70.0 }).collect(),
        };
        assert!(mk(&[0.0, 1.0, 59.0]).validate(60.0).is_ok());
        assert!(mk(&[0.0, 61.0]).validate(60.0).is_err());
        assert!(mk(&[0.0, 0.0]).validate(60.0).is_err());
        assert!(mk(&[]).validate(60.0).is_err());
    }
}
