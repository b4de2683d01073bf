//! Identity-balanced (P x K) batch sampling.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::data::Sample;
use crate::error::{Error, Result};

/// Sample indices grouped by identity.
#[derive(Debug, Clone)]
pub struct PkSampler {
    by_id: BTreeMap<usize, Vec<usize>>,
    num_samples: usize,
}

impl PkSampler {
    pub fn new(samples: &[Sample]) -> Self {
        let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_id.entry(s.id).or_default().push(i);
        }
        PkSampler {
            by_id,
            num_samples: samples.len(),
        }
    }

    pub fn identities(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_id.keys().copied()
    }

    pub fn num_identities(&self) -> usize {
        self.by_id.len()
    }

    /// `instances` samples drawn without replacement from each listed identity.
    pub fn batch_for<R: Rng + ?Sized>(&self, identities: &[usize], instances: usize, rng: &mut R) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(identities.len() * instances);
        for id in identities {
            let pool = self
                .by_id
                .get(id)
                .ok_or_else(|| Error::Sampling(format!("identity {id} has no samples")))?;
            if pool.len() < instances {
                return Err(Error::Sampling(format!(
                    "identity {id} has {} samples, {instances} requested",
                    pool.len()
                )));
            }
            out.extend(index::sample(rng, pool.len(), instances).into_iter().map(|j| pool[j]));
        }
        Ok(out)
    }

    /// One batch of `p` distinct random identities with `instances` samples each.
    pub fn pk_batch<R: Rng + ?Sized>(&self, p: usize, instances: usize, rng: &mut R) -> Result<Vec<usize>> {
        let eligible: Vec<usize> = self
            .by_id
            .iter()
            .filter(|(_, v)| v.len() >= instances)
            .map(|(&k, _)| k)
            .collect();
        if p == 0 || instances == 0 {
            return Err(Error::Sampling("P and K must both be positive".into()));
        }
        if eligible.len() < p {
            return Err(Error::Sampling(format!(
                "{} identities have at least {instances} samples, {p} requested",
                eligible.len()
            )));
        }
        let chosen: Vec<usize> = index::sample(rng, eligible.len(), p)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        self.batch_for(&chosen, instances, rng)
    }

    /// Batches per epoch: enough to draw as many samples as the dataset holds.
    pub fn batches_per_epoch(&self, p: usize, instances: usize) -> usize {
        self.num_samples.div_ceil(p * instances).max(1)
    }

    /// One epoch of batches. Identities are visited along a shuffled cycle,
    /// so when `p` divides the identity count every identity appears.
    pub fn epoch<R: Rng + ?Sized>(&self, p: usize, instances: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
        let ids: Vec<usize> = self.identities().collect();
        if p == 0 || instances == 0 {
            return Err(Error::Sampling("P and K must both be positive".into()));
        }
        if ids.len() < p {
            return Err(Error::Sampling(format!(
                "{} identities available, {p} requested per batch",
                ids.len()
            )));
        }
        let mut order = Vec::new();
        let mut batches = Vec::new();
        for _ in 0..self.batches_per_epoch(p, instances) {
            let mut group = Vec::with_capacity(p);
            while group.len() < p {
                if order.is_empty() {
                    order = ids.clone();
                    order.shuffle(rng);
                    order.reverse();
                }
                let next = order.pop().expect("refilled");
                if !group.contains(&next) {
                    group.push(next);
                } else {
                    order.insert(0, next);
                }
            }
            batches.push(self.batch_for(&group, instances, rng)?);
        }
        Ok(batches)
    }
}

/// Free-function form of [`PkSampler::pk_batch`].
pub fn pk_batch<R: Rng + ?Sized>(samples: &[Sample], p: usize, instances: usize, rng: &mut R) -> Result<Vec<usize>> {
    PkSampler::new(samples).pk_batch(p, instances, rng)
}
