use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::RegionKind;
use crate::perturb::PerturbKind;

pub const REPORT_SCHEMA: &str = "probe/1";

/// How a region's score was obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// A single perturbation, K chunks per side.
    Single(PerturbKind),
    /// K independently perturbed observations (blur kernels or noise draws).
    Sampled { perturbations: Vec<PerturbKind> },
    /// Attribution overlap instead of a perturbation probe.
    Attribution { fraction: f64 },
    /// Every region treated as sensitive without probing.
    Assumed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    /// Region id, `label#instance`.
    pub region: String,
    pub label: String,
    pub kind: RegionKind,
    /// Action deviation in meters-equivalent (or overlap fraction for attribution).
    pub score: f64,
    pub threshold: f64,
    pub sensitive: bool,
    pub perturbation: Perturbation,
    pub samples: usize,
    pub chunk_len: usize,
}

impl ReportEntry {
    pub fn new(
        region: String,
        label: String,
        kind: RegionKind,
        score: f64,
        threshold: f64,
        perturbation: Perturbation,
        samples: usize,
        chunk_len: usize,
    ) -> Self {
        ReportEntry {
            region,
            label,
            kind,
            score,
            threshold,
            sensitive: score >= threshold,
            perturbation,
            samples,
            chunk_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub schema: String,
    pub probed_at: usize,
    pub entries: Vec<ReportEntry>,
}

impl SensitivityReport {
    pub fn new(probed_at: usize, entries: Vec<ReportEntry>) -> Self {
        SensitivityReport {
            schema: REPORT_SCHEMA.to_string(),
            probed_at,
            entries,
        }
    }

    pub fn sensitive(&self) -> impl Iterator<Item = &ReportEntry> {
        self.entries.iter().filter(|e| e.sensitive)
    }

    pub fn is_sensitive(&self, region_id: &str) -> bool {
        self.entries.iter().any(|e| e.region == region_id && e.sensitive)
    }

    /// Checks the schema tag and `sensitive <=> score >= threshold` on every entry.
    pub fn validate(&self) -> Result<()> {
        if self.schema != REPORT_SCHEMA {
            return Err(Error::protocol(
                format!("unsupported report schema `{}`", self.schema),
                "",
            ));
        }
        for e in &self.entries {
            // Assumed-sensitive entries carry no measured score.
            let assumed = matches!(e.perturbation, Perturbation::Assumed);
            if !assumed && e.sensitive != (e.score >= e.threshold) {
                return Err(Error::protocol(
                    format!("entry `{}` flag disagrees with score/threshold", e.region),
                    "",
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: SensitivityReport = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }
}
