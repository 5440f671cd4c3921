//! P x K batch sampling.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::params::seeded_rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub persons_per_batch: usize,
    pub images_per_person: usize,
    pub batches_per_epoch: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            persons_per_batch: 100,
            images_per_person: 5,
            batches_per_epoch: 1000,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.persons_per_batch < 2 || self.images_per_person < 2 {
            return Err(Error::InvalidConfig("batches need >= 2 persons and >= 2 images each".into()));
        }
        if self.batches_per_epoch == 0 {
            return Err(Error::InvalidConfig("batches_per_epoch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.persons_per_batch * self.images_per_person
    }
}

/// Flat sample indices with their class labels, grouped person by person.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Draw `persons_per_batch` distinct classes uniformly, then
/// `images_per_person` samples from each (with replacement only when a
/// class holds fewer samples than that).
pub fn sample_indexed(groups: &[Vec<usize>], spec: &BatchSpec, seed: u64) -> Result<Batch> {
    let eligible: Vec<usize> = (0..groups.len()).filter(|&g| !groups[g].is_empty()).collect();
    if eligible.len() < spec.persons_per_batch {
        return Err(Error::InsufficientSubjects {
            available: eligible.len(),
            required: spec.persons_per_batch,
        });
    }
    let mut rng = seeded_rng(seed, "batch");
    let mut chosen: Vec<usize> = index::sample(&mut rng, eligible.len(), spec.persons_per_batch)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    chosen.sort_unstable();
    let k = spec.images_per_person;
    let mut items = Vec::with_capacity(chosen.len() * k);
    let mut labels = Vec::with_capacity(chosen.len() * k);
    for class in chosen {
        let pool = &groups[class];
        if pool.len() >= k {
            let mut picks: Vec<usize> = index::sample(&mut rng, pool.len(), k).into_vec();
            picks.sort_unstable();
            items.extend(picks.into_iter().map(|i| pool[i]));
        } else {
            items.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
        }
        labels.extend(std::iter::repeat_n(class, k));
    }
    Ok(Batch { items, labels })
}

/// Batch over a manifest; labels are subject indices.
pub fn sample_batch(manifest: &DatasetManifest, spec: &BatchSpec, seed: u64) -> Result<Batch> {
    sample_indexed(&manifest.samples_by_subject(), spec, seed)
}

/// Seed for batch `batch` of `epoch` in a run seeded with `run_seed`.
pub fn batch_seed(run_seed: u64, epoch: usize, batch: usize) -> u64 {
    run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(batch as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn groups(subjects: usize, per: usize) -> Vec<Vec<usize>> {
        (0..subjects).map(|s| (s * per..(s + 1) * per).collect()).collect()
    }

    #[test]
    fn default_spec_on_full_population() {
        let b = sample_indexed(&groups(247, 20), &BatchSpec::default(), 1).unwrap();
        assert_eq!(b.items.len(), 500);
        let mut counts = BTreeMap::new();
        for l in &b.labels {
            *counts.entry(*l).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 100);
        assert!(counts.values().all(|&c| c == 5));
        for (item, label) in b.items.iter().zip(&b.labels) {
            assert_eq!(item / 20, *label);
        }
    }

    #[test]
    fn tiny_population() {
        let spec = BatchSpec { persons_per_batch: 2, images_per_person: 3, batches_per_epoch: 1 };
        let b = sample_indexed(&groups(2, 4), &spec, 9).unwrap();
        assert_eq!(b.items.len(), 6);
    }

    #[test]
    fn small_subjects_sample_with_replacement() {
        let g = vec![vec![0, 1], vec![2, 3, 4, 5, 6]];
        let spec = BatchSpec { persons_per_batch: 2, images_per_person: 5, batches_per_epoch: 1 };
        let b = sample_indexed(&g, &spec, 3).unwrap();
        assert_eq!(b.labels.iter().filter(|&&l| l == 0).count(), 5);
        assert!(b.items[..5].iter().all(|i| *i < 2));
    }

    #[test]
    fn deterministic_and_checked() {
        let g = groups(10, 5);
        let spec = BatchSpec { persons_per_batch: 4, images_per_person: 2, batches_per_epoch: 1 };
        assert_eq!(sample_indexed(&g, &spec, 5).unwrap(), sample_indexed(&g, &spec, 5).unwrap());
        let spec = BatchSpec { persons_per_batch: 11, ..spec };
        assert!(matches!(sample_indexed(&g, &spec, 5), Err(Error::InsufficientSubjects { available: 10, required: 11 })));
    }
}
