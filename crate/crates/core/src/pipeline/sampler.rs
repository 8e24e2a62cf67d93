use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::stream;

/// Identity-balanced batches: `p` distinct identities with `k` samples
/// each. Identities with fewer than `k` samples are drawn with replacement.
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_label: BTreeMap<usize, Vec<usize>>,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
}

impl PkSampler {
    pub fn new(labels: &[usize], p: usize, k: usize, seed: u64) -> Result<Self> {
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            by_label.entry(y).or_default().push(i);
        }
        if by_label.len() < p {
            return Err(Error::Data(format!("PK sampling needs {p} identities, found {}", by_label.len())));
        }
        for (y, items) in &by_label {
            if items.len() < k {
                log::warn!("identity {y} has {} samples, fewer than {k}; sampling with replacement", items.len());
            }
        }
        Ok(PkSampler { by_label, p, k, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        let total: usize = self.by_label.values().map(Vec::len).sum();
        (total / (self.p * self.k)).max(1)
    }

    /// Batches of sample indices for one epoch, grouped by identity.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut r = stream(self.seed, "pk", epoch as u64);
        let ids: Vec<usize> = self.by_label.keys().copied().collect();
        (0..self.batches_per_epoch())
            .map(|_| {
                let mut chosen: Vec<usize> = sample(&mut r, ids.len(), self.p).into_vec();
                chosen.sort_unstable();
                chosen
                    .into_iter()
                    .flat_map(|i| {
                        let items = &self.by_label[&ids[i]];
                        if items.len() >= self.k {
                            sample(&mut r, items.len(), self.k).into_iter().map(|j| items[j]).collect::<Vec<_>>()
                        } else {
                            (0..self.k).map(|_| items[r.gen_range(0..items.len())]).collect()
                        }
                    })
                    .collect()
            })
            .collect()
    }
}
