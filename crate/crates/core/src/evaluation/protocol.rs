use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::split::SplitPlan;
use crate::model::embedding::{dot, l2_norm};
use crate::par;

/// Cosine of the angle between `a` and `b`, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairType {
    Genuine,
    Impostor,
}

impl PairType {
    pub fn as_str(self) -> &'static str {
        match self {
            PairType::Genuine => "genuine",
            PairType::Impostor => "impostor",
        }
    }
}

/// Genuine and impostor similarity scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

/// Gallery and probe entries flattened in plan order, each tagged with its subject.
struct Roster<'a> {
    gallery: Vec<(usize, &'a str)>,
    probe: Vec<(usize, &'a str)>,
}

fn roster(split: &SplitPlan) -> Roster<'_> {
    let mut gallery = Vec::new();
    let mut probe = Vec::new();
    for (s, subj) in split.subjects.iter().enumerate() {
        gallery.extend(subj.gallery.iter().map(|id| (s, id.as_str())));
        probe.extend(subj.probe.iter().map(|id| (s, id.as_str())));
    }
    Roster { gallery, probe }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProtocolCounts {
    pub genuine: u64,
    pub impostor: u64,
}

/// Enumerates every gallery x probe pair descriptor without scoring it.
pub fn count_protocol(split: &SplitPlan) -> ProtocolCounts {
    let r = roster(split);
    let per_probe: Vec<ProtocolCounts> = par::map(&r.probe, |&(ps, _)| {
        let mut c = ProtocolCounts::default();
        for &(gs, _) in &r.gallery {
            if gs == ps {
                c.genuine += 1;
            } else {
                c.impostor += 1;
            }
        }
        c
    });
    per_probe.iter().fold(ProtocolCounts::default(), |a, c| ProtocolCounts {
        genuine: a.genuine + c.genuine,
        impostor: a.impostor + c.impostor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub kind: PairType,
    /// Position in [`ProtocolScores::gallery_ids`].
    pub gallery: u32,
    /// Position in [`ProtocolScores::probe_ids`].
    pub probe: u32,
    pub score: f64,
}

/// Every scored pair of a protocol run, probe-major in plan order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolScores {
    pub gallery_ids: Vec<String>,
    pub probe_ids: Vec<String>,
    pub pairs: Vec<ScoredPair>,
}

impl ProtocolScores {
    pub fn score_set(&self) -> ScoreSet {
        let mut set = ScoreSet::default();
        for p in &self.pairs {
            match p.kind {
                PairType::Genuine => set.genuine.push(p.score),
                PairType::Impostor => set.impostor.push(p.score),
            }
        }
        set
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "pair_type,gallery_id,probe_id,score").map_err(io)?;
        for p in &self.pairs {
            writeln!(
                w,
                "{},{},{},{:?}",
                p.kind.as_str(),
                self.gallery_ids[p.gallery as usize],
                self.probe_ids[p.probe as usize],
                p.score
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Reads a `pair_type,gallery_id,probe_id,score` file.
pub fn read_score_csv(path: &Path) -> Result<ScoreSet> {
    #[derive(Deserialize)]
    struct Row {
        pair_type: PairType,
        #[allow(dead_code)]
        gallery_id: String,
        #[allow(dead_code)]
        probe_id: String,
        score: f64,
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut set = ScoreSet::default();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if !row.score.is_finite() {
            return Err(Error::NonFinite(format!("score in {}", path.display())));
        }
        match row.pair_type {
            PairType::Genuine => set.genuine.push(row.score),
            PairType::Impostor => set.impostor.push(row.score),
        }
    }
    Ok(set)
}

/// Cosine-scores every gallery x probe pair of the split.
pub fn score_protocol(embeddings: &HashMap<String, Vec<f64>>, split: &SplitPlan) -> Result<ProtocolScores> {
    let r = roster(split);
    let unit = |id: &str| -> Result<Vec<f64>> {
        let v = embeddings
            .get(id)
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))?;
        let n = l2_norm(v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(v.iter().map(|x| x / n).collect())
    };
    let gallery: Vec<Vec<f64>> = r.gallery.iter().map(|(_, id)| unit(id)).collect::<Result<_>>()?;
    let probe: Vec<Vec<f64>> = r.probe.iter().map(|(_, id)| unit(id)).collect::<Result<_>>()?;
    let rows: Vec<Vec<ScoredPair>> = par::map_range(probe.len(), |pi| {
        let ps = r.probe[pi].0;
        r.gallery
            .iter()
            .enumerate()
            .map(|(gi, &(gs, _))| ScoredPair {
                kind: if gs == ps { PairType::Genuine } else { PairType::Impostor },
                gallery: gi as u32,
                probe: pi as u32,
                score: dot(&gallery[gi], &probe[pi]).clamp(-1.0, 1.0),
            })
            .collect()
    });
    Ok(ProtocolScores {
        gallery_ids: r.gallery.iter().map(|(_, id)| id.to_string()).collect(),
        probe_ids: r.probe.iter().map(|(_, id)| id.to_string()).collect(),
        pairs: rows.into_iter().flatten().collect(),
    })
}
