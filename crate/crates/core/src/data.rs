//! Synthetic cross-view re-identification data with planted signal tokens.
//!
//! Every identity owns a prototype vector and every view owns an offset
//! shared by all identities. A sample carries `prototype + view offset +
//! N(0, noise_std^2)` in `k_sig` randomly chosen grid slots and pure N(0, 1)
//! noise everywhere else, so identity evidence is confined to a few tokens.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::backbone::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::view::View;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    /// Training identities, labelled `0..num_ids`.
    pub num_ids: usize,
    /// Held-out identities, labelled `num_ids..num_ids + test_ids`.
    pub test_ids: usize,
    pub samples_per_id_per_view: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_dim: usize,
    pub k_sig: usize,
    pub noise_std: f64,
    pub view_offset_scale: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_ids: 32,
            test_ids: 32,
            samples_per_id_per_view: 8,
            grid_rows: 4,
            grid_cols: 4,
            patch_dim: 16,
            k_sig: 3,
            noise_std: 0.3,
            view_offset_scale: 1.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn num_slots(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("GenConfig.num_ids", self.num_ids),
            ("GenConfig.samples_per_id_per_view", self.samples_per_id_per_view),
            ("GenConfig.grid_rows", self.grid_rows),
            ("GenConfig.grid_cols", self.grid_cols),
            ("GenConfig.patch_dim", self.patch_dim),
            ("GenConfig.k_sig", self.k_sig),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.k_sig >= self.num_slots() {
            return Err(Error::Config(format!(
                "GenConfig.k_sig {} must be smaller than the {} grid slots",
                self.k_sig,
                self.num_slots()
            )));
        }
        for (name, v) in [
            ("GenConfig.noise_std", self.noise_std),
            ("GenConfig.view_offset_scale", self.view_offset_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[rows, cols, patch_dim]`.
    pub x: Tensor,
    pub id: usize,
    pub view: View,
    /// Grid indices carrying identity signal, ascending.
    pub signal_slots: Vec<usize>,
}

/// Train and held-out samples drawn from one world (shared view offsets).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Training samples only; identical to `generate_split(cfg)?.train`.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<Sample>> {
    Ok(generate_split(cfg)?.train)
}

/// Samples are grouped by identity, then view (aerial first), then instance.
pub fn generate_split(cfg: &GenConfig) -> Result<SyntheticSplit> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pd = cfg.patch_dim;
    let m = cfg.num_slots();
    let offset_dist = Normal::new(0.0, cfg.view_offset_scale).expect("validated scale");
    let noise_dist = Normal::new(0.0, cfg.noise_std).expect("validated std");
    let offsets: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..pd).map(|_| offset_dist.sample(&mut rng)).collect())
        .collect();
    let total_ids = cfg.num_ids + cfg.test_ids;
    let prototypes: Vec<Vec<f64>> = (0..total_ids)
        .map(|_| (0..pd).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut samples = Vec::with_capacity(total_ids * 2 * cfg.samples_per_id_per_view);
    for (id, proto) in prototypes.iter().enumerate() {
        for view in View::ALL {
            let off = &offsets[view.index()];
            for _ in 0..cfg.samples_per_id_per_view {
                let mut slots = index::sample(&mut rng, m, cfg.k_sig).into_vec();
                slots.sort_unstable();
                let mut data = Vec::with_capacity(m * pd);
                for slot in 0..m {
                    if slots.binary_search(&slot).is_ok() {
                        for j in 0..pd {
                            data.push(proto[j] + off[j] + noise_dist.sample(&mut rng));
                        }
                    } else {
                        for _ in 0..pd {
                            data.push(StandardNormal.sample(&mut rng));
                        }
                    }
                }
                samples.push(Sample {
                    x: Tensor::new(vec![cfg.grid_rows, cfg.grid_cols, pd], data)?,
                    id,
                    view,
                    signal_slots: slots,
                });
            }
        }
    }
    let test = samples.split_off(cfg.num_ids * 2 * cfg.samples_per_id_per_view);
    Ok(SyntheticSplit {
        train: samples,
        test,
    })
}

/// Stacks the selected samples into a model batch.
pub fn make_batch(samples: &[Sample], indices: &[usize]) -> Result<Batch> {
    let first = indices
        .first()
        .map(|&i| &samples[i])
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let grid = first.x.shape().to_vec();
    let mut data = Vec::with_capacity(indices.len() * first.x.numel());
    let mut ids = Vec::with_capacity(indices.len());
    let mut views = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::Contract(format!("sample index {i} out of range")))?;
        if s.x.shape() != grid.as_slice() {
            return Err(Error::Dimension("samples with differing grid shapes".into()));
        }
        data.extend_from_slice(s.x.data());
        ids.push(s.id);
        views.push(s.view);
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(&grid);
    Ok(Batch {
        x: Tensor::new(shape, data)?,
        ids,
        views,
    })
}

/// Mean of the signal-slot patches of one sample.
pub fn signal_mean(sample: &Sample) -> Vec<f64> {
    let pd = sample.x.shape()[2];
    let mut out = vec![0.0; pd];
    for &s in &sample.signal_slots {
        for (o, v) in out.iter_mut().zip(&sample.x.data()[s * pd..(s + 1) * pd]) {
            *o += v;
        }
    }
    let k = sample.signal_slots.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    out
}
