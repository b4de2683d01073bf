//! Training loop: PK batches, forward, weighted loss, backward, SGD with a
//! cosine schedule. Fully determined by the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, SelectionMode};
use crate::data::{make_batch, Sample};
use crate::error::{Error, Result};
use crate::objectives::{objective, LossWeights};
use crate::optim::{sgd_step, SgdState, DEFAULT_MOMENTUM};
use crate::sampler::PkSampler;
use crate::schedule::{cosine_lr, ScheduleConfig, DEFAULT_LR_MAX, DEFAULT_LR_MIN};
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub ids_per_batch: usize,
    pub instances_per_id: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 30,
            ids_per_batch: 32,
            instances_per_id: 4,
            lr_max: DEFAULT_LR_MAX,
            lr_min: DEFAULT_LR_MIN,
            momentum: DEFAULT_MOMENTUM,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub id_loss: f64,
    pub view_loss: f64,
    pub orth_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

pub const LOG_HEADER: &str = "step,epoch,lr,id_loss,view_loss,orth_loss,total";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.epoch, r.lr, r.id_loss, r.view_loss, r.orth_loss, r.total
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<TrainLog> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == LOG_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing training log header".into(),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let err = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(err("expected 7 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            records.push(LogRecord {
                step: f[0].parse().map_err(|_| err("bad step"))?,
                epoch: f[1].parse().map_err(|_| err("bad epoch"))?,
                lr: num(f[2])?,
                id_loss: num(f[3])?,
                view_loss: num(f[4])?,
                orth_loss: num(f[5])?,
                total: num(f[6])?,
            });
        }
        Ok(TrainLog { records })
    }
}

/// Trains `model` in place on `data`.
///
/// The learning rate follows the cosine schedule from `lr_max` at the first
/// step to `lr_min` at the last.
pub fn train_run(
    model: &mut Model,
    data: &[Sample],
    settings: &TrainSettings,
    weights: &LossWeights,
    seed: u64,
) -> Result<TrainLog> {
    weights.validate()?;
    if !(settings.lr_max >= settings.lr_min && settings.lr_min >= 0.0 && settings.lr_max.is_finite()) {
        return Err(Error::Config(format!(
            "learning rates must satisfy lr_max >= lr_min >= 0, got {} and {}",
            settings.lr_max, settings.lr_min
        )));
    }
    if let Some(bad) = data.iter().find(|s| s.id >= model.config.num_identities) {
        return Err(Error::Config(format!(
            "identity {} exceeds the classifier's {} classes",
            bad.id, model.config.num_identities
        )));
    }
    let sampler = PkSampler::new(data);
    let per_epoch = sampler.batches_per_epoch(settings.ids_per_batch, settings.instances_per_id);
    let mut total_steps = settings.epochs * per_epoch;
    if let Some(cap) = settings.max_steps {
        total_steps = total_steps.min(cap);
    }
    let schedule = ScheduleConfig {
        lr_max: settings.lr_max,
        lr_min: settings.lr_min,
        total_steps: total_steps.saturating_sub(1).max(1),
    };
    // Batches and selector noise use separate streams, so models with and
    // without a selector see the same batch sequence.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(2);
    let mut sgd = SgdState::new(settings.lr_max, settings.momentum)?;
    let mut log = TrainLog::default();
    let mut step = 0;
    'outer: for epoch in 0..settings.epochs {
        let batches = sampler.epoch(settings.ids_per_batch, settings.instances_per_id, &mut rng)?;
        for indices in batches {
            if step >= total_steps {
                break 'outer;
            }
            let batch = make_batch(data, &indices)?;
            let lr = cosine_lr(step, &schedule);
            let mut tape = Tape::new();
            let bindings = model.params.bind(&mut tape);
            let out = model.forward(&mut tape, &bindings, &batch, SelectionMode::Sampled(&mut noise_rng))?;
            let views: Vec<usize> = batch.views.iter().map(|v| v.index()).collect();
            let (losses, report) = objective(
                &mut tape,
                out.id_logits,
                out.view_logits,
                out.meta_feature,
                out.view_feature,
                &batch.ids,
                &views,
                weights,
            )
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                other => other,
            })?;
            let grads = tape.backward(losses.total)?;
            model.params.load_grads(&bindings, &grads)?;
            sgd.learning_rate = lr;
            sgd_step(&mut model.params, &mut sgd)?;
            model.params.clear_grads();
            log.records.push(LogRecord {
                step,
                epoch,
                lr,
                id_loss: report.id_loss,
                view_loss: report.view_loss,
                orth_loss: report.orth_loss,
                total: report.total,
            });
            step += 1;
        }
    }
    Ok(log)
}
