//! Triplet objective with online mining over a labeled batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

use super::distance::{cosine_distance, cosine_distance_grad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiningPolicy {
    /// Every label-valid triplet with positive loss.
    BatchAllValid,
    /// Per anchor: farthest positive and closest negative, kept when the
    /// loss is positive.
    BatchHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginSchedule {
    Constant,
    /// Linear ramp from `margin` at the first epoch to `margin_max` at the last.
    LinearRamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletConfig {
    pub margin: f64,
    pub margin_max: f64,
    pub mining: MiningPolicy,
    pub simultaneous_triplets: usize,
    pub margin_schedule: MarginSchedule,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 0.5,
            margin_max: 1.5,
            mining: MiningPolicy::BatchAllValid,
            simultaneous_triplets: 2,
            margin_schedule: MarginSchedule::Constant,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin <= self.margin_max) {
            return Err(Error::InvalidConfig(format!(
                "triplet margin {} must satisfy 0 < margin <= margin_max ({})",
                self.margin, self.margin_max
            )));
        }
        if self.simultaneous_triplets == 0 {
            return Err(Error::InvalidConfig("simultaneous_triplets must be >= 1".into()));
        }
        Ok(())
    }

    /// Margin in effect at `epoch` (0-based) of `total_epochs`.
    pub fn margin_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        match self.margin_schedule {
            MarginSchedule::Constant => self.margin,
            MarginSchedule::LinearRamp => {
                if total_epochs <= 1 {
                    return self.margin;
                }
                let f = epoch.min(total_epochs - 1) as f64 / (total_epochs - 1) as f64;
                self.margin + f * (self.margin_max - self.margin)
            }
        }
    }
}

/// Hinge `max(0, d_ap - d_an + margin)`.
pub fn triplet_loss(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// Pairwise cosine distances, row-major `n x n`.
pub fn distance_matrix(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = embeddings.len();
    let rows: Vec<Result<Vec<f64>>> = par::map_range(n, |i| {
        (0..n)
            .map(|j| cosine_distance(&embeddings[i], &embeddings[j]))
            .collect()
    });
    let mut out = Vec::with_capacity(n * n);
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

/// Triplets selected from the batch, sorted by (anchor, positive, negative).
pub fn mine_triplets(embeddings: &[Vec<f64>], labels: &[usize], cfg: &TripletConfig) -> Result<Vec<Triplet>> {
    mine_with_margin(embeddings, labels, cfg.mining, cfg.margin)
}

pub fn mine_with_margin(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    policy: MiningPolicy,
    margin: f64,
) -> Result<Vec<Triplet>> {
    if embeddings.len() != labels.len() {
        return Err(Error::shape(labels.len(), embeddings.len()));
    }
    let n = labels.len();
    let dist = distance_matrix(embeddings)?;
    let per_anchor: Vec<Vec<Triplet>> = par::map_range(n, |a| {
        let d = &dist[a * n..(a + 1) * n];
        let same = |j: usize| labels[j] == labels[a];
        match policy {
            MiningPolicy::BatchAllValid => {
                let mut out = Vec::new();
                for p in (0..n).filter(|&p| p != a && same(p)) {
                    for q in (0..n).filter(|&q| !same(q)) {
                        if triplet_loss(d[p], d[q], margin) > 0.0 {
                            out.push(Triplet { anchor: a, positive: p, negative: q });
                        }
                    }
                }
                out
            }
            MiningPolicy::BatchHard => {
                let hardest = |pred: &dyn Fn(usize) -> bool, far: bool| {
                    (0..n).filter(|&j| pred(j)).fold(None, |best: Option<usize>, j| match best {
                        Some(b) if (far && d[j] <= d[b]) || (!far && d[j] >= d[b]) => Some(b),
                        _ => Some(j),
                    })
                };
                let pos = hardest(&|j| j != a && same(j), true);
                let neg = hardest(&|j| !same(j), false);
                match (pos, neg) {
                    (Some(p), Some(q)) if triplet_loss(d[p], d[q], margin) > 0.0 => {
                        vec![Triplet { anchor: a, positive: p, negative: q }]
                    }
                    _ => Vec::new(),
                }
            }
        }
    });
    Ok(per_anchor.into_iter().flatten().collect())
}

/// Mean triplet loss over micro-batches of `micro` triplets (mean of the
/// per-micro-batch means) and its gradient with respect to every embedding.
pub fn triplet_batch_loss(
    embeddings: &[Vec<f64>],
    triplets: &[Triplet],
    margin: f64,
    micro: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let dim = embeddings.first().map_or(0, |e| e.len());
    let mut grads = vec![vec![0.0; dim]; embeddings.len()];
    if triplets.is_empty() {
        return Ok((0.0, grads));
    }
    let chunks: Vec<&[Triplet]> = triplets.chunks(micro.max(1)).collect();
    let n_chunks = chunks.len() as f64;
    let mut total = 0.0;
    for chunk in chunks {
        let w = 1.0 / (n_chunks * chunk.len() as f64);
        for t in chunk {
            let (dap, ga, gp) = cosine_distance_grad(&embeddings[t.anchor], &embeddings[t.positive])?;
            let (dan, ga2, gn) = cosine_distance_grad(&embeddings[t.anchor], &embeddings[t.negative])?;
            let l = triplet_loss(dap, dan, margin);
            total += w * l;
            if l > 0.0 {
                for k in 0..dim {
                    grads[t.anchor][k] += w * (ga[k] - ga2[k]);
                    grads[t.positive][k] += w * gp[k];
                    grads[t.negative][k] -= w * gn[k];
                }
            }
        }
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert_eq!(triplet_loss(0.2, 0.9, 0.5), 0.0);
        assert!((triplet_loss(0.8, 0.4, 0.5) - 0.9).abs() < 1e-15);
        assert_eq!(triplet_loss(0.3, 0.3, 0.5), 0.5);
    }

    #[test]
    fn separated_classes_yield_nothing() {
        let e = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let t = mine_triplets(&e, &[0, 0, 1, 1], &TripletConfig::default()).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn identical_embeddings_yield_every_valid_triplet() {
        let e = vec![vec![0.6, 0.8]; 4];
        let labels = [0, 0, 1, 1];
        let t = mine_triplets(&e, &labels, &TripletConfig::default()).unwrap();
        assert_eq!(t.len(), 8);
        let (loss, _) = triplet_batch_loss(&e, &t, 0.5, 2).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
        let mut sorted = t.clone();
        sorted.sort();
        assert_eq!(sorted, t);
    }

    #[test]
    fn batch_hard_picks_extremes() {
        let e = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.1],
            vec![0.0, 1.0],
            vec![0.9, 0.5],
            vec![0.0, -1.0],
        ];
        let labels = [0, 0, 0, 1, 1];
        let cfg = TripletConfig { mining: MiningPolicy::BatchHard, ..Default::default() };
        let t = mine_triplets(&e, &labels, &cfg).unwrap();
        assert!(t.contains(&Triplet { anchor: 0, positive: 2, negative: 3 }));
    }

    #[test]
    fn ramp_schedule() {
        let cfg = TripletConfig { margin_schedule: MarginSchedule::LinearRamp, ..Default::default() };
        assert_eq!(cfg.margin_at(0, 5), 0.5);
        assert!((cfg.margin_at(4, 5) - 1.5).abs() < 1e-12);
        assert!((cfg.margin_at(2, 5) - 1.0).abs() < 1e-12);
        assert_eq!(TripletConfig::default().margin_at(3, 5), 0.5);
    }

    #[test]
    fn invalid_margins_rejected() {
        let cfg = TripletConfig { margin: 2.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = TripletConfig { margin: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
