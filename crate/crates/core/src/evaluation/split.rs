use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datakit::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::params::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// First session enrolls, later sessions probe.
    Session,
    /// Seeded shuffle of each subject's samples.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub gallery_per_subject: usize,
    pub probe_per_subject: usize,
    pub mode: SplitMode,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            gallery_per_subject: 10,
            probe_per_subject: 10,
            mode: SplitMode::Session,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gallery_per_subject == 0 || self.probe_per_subject == 0 {
            return Err(Error::InvalidConfig("gallery and probe counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub subject_id: String,
    pub gallery: Vec<String>,
    pub probe: Vec<String>,
}

/// A subject whose split differs from the requested counts or mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAdjustment {
    pub subject_id: String,
    pub gallery: usize,
    pub probe: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub subjects: Vec<SubjectSplit>,
    pub adjustments: Vec<SplitAdjustment>,
}

impl SplitPlan {
    pub fn gallery_count(&self) -> usize {
        self.subjects.iter().map(|s| s.gallery.len()).sum()
    }

    pub fn probe_count(&self) -> usize {
        self.subjects.iter().map(|s| s.probe.len()).sum()
    }
}

/// Shrinks (g, p) in proportion when fewer than g + p samples exist.
fn proportional(n: usize, g: usize, p: usize) -> (usize, usize) {
    if n >= g + p {
        return (g, p);
    }
    let g2 = ((n * g) as f64 / (g + p) as f64).round() as usize;
    let g2 = g2.clamp(1, n - 1);
    (g2, n - g2)
}

pub fn make_split(manifest: &DatasetManifest, cfg: &SplitConfig) -> Result<SplitPlan> {
    cfg.validate()?;
    let samples = manifest.samples();
    let mut subjects = Vec::with_capacity(manifest.num_subjects());
    let mut adjustments = Vec::new();
    let (g, p) = (cfg.gallery_per_subject, cfg.probe_per_subject);
    for (s, rec) in manifest.subjects.iter().enumerate() {
        let mine: Vec<_> = samples.iter().filter(|r| r.subject == s).collect();
        if mine.len() < 2 {
            return Err(Error::InsufficientSamples {
                subject: rec.subject_id.clone(),
                available: mine.len(),
                required: 2,
            });
        }
        let mut rng = seeded_rng(cfg.seed, &format!("split/{}", rec.subject_id));
        let mut first: Vec<String> = mine.iter().filter(|r| r.session == 0).map(|r| r.sample_id.clone()).collect();
        let mut later: Vec<String> = mine.iter().filter(|r| r.session > 0).map(|r| r.sample_id.clone()).collect();
        let session_ok = cfg.mode == SplitMode::Session && !first.is_empty() && !later.is_empty();
        let (gallery, probe, reason) = if session_ok {
            let (gn, pn) = (g.min(first.len()), p.min(later.len()));
            first.truncate(gn);
            later.truncate(pn);
            let reason = (gn < g || pn < p).then(|| "session holds fewer samples than requested".to_string());
            (first, later, reason)
        } else {
            let mut all: Vec<String> = mine.iter().map(|r| r.sample_id.clone()).collect();
            all.shuffle(&mut rng);
            let (gn, pn) = proportional(all.len(), g, p);
            let probe = all[gn..gn + pn].to_vec();
            all.truncate(gn);
            let mut reason = Vec::new();
            if cfg.mode == SplitMode::Session {
                reason.push("single session, random fallback");
            }
            if gn < g || pn < p {
                reason.push("proportional reduction");
            }
            (all, probe, (!reason.is_empty()).then(|| reason.join("; ")))
        };
        if let Some(reason) = reason {
            adjustments.push(SplitAdjustment {
                subject_id: rec.subject_id.clone(),
                gallery: gallery.len(),
                probe: probe.len(),
                reason,
            });
        }
        subjects.push(SubjectSplit { subject_id: rec.subject_id.clone(), gallery, probe });
    }
    Ok(SplitPlan { subjects, adjustments })
}
