//! End-to-end pipelines shared by the `dtst` commands: training a model on a
//! generated split, embedding and scoring it, ablation grids and the
//! per-group gradient check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Batch, Model, ModelConfig, SelectionMode};
use crate::config::{AblationCell, ExperimentConfig};
use crate::data::{make_batch, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate_protocol, Embedded, Protocol, RetrievalReport};
use crate::gradcheck::{numeric_gradient, relative_error, spread_coords, FD_STEP};
use crate::objectives::{cosine, objective, LossWeights};
use crate::records::{read_records, write_records, Record};
use crate::selector::Placement;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{train_run, TrainLog};

/// Items per forward pass when embedding a split.
const EMBED_CHUNK: usize = 256;

/// Parameters drawn from stream 1 of the run seed; training draws from
/// stream 0.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Model::init(config, &mut rng)
}

pub fn train_model(config: ModelConfig, train: &[Sample], exp: &ExperimentConfig) -> Result<(Model, TrainLog)> {
    let mut model = init_model(config, exp.seed)?;
    let log = train_run(&mut model, train, &exp.train, &exp.loss, exp.seed)?;
    Ok((model, log))
}

/// Evaluation-mode identity and view features, `[N, d]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub meta: Tensor,
    pub view: Tensor,
}

pub fn features(model: &Model, samples: &[Sample]) -> Result<Features> {
    if samples.is_empty() {
        return Err(Error::Contract("no samples to embed".into()));
    }
    let d = model.config.embed_dim;
    let (mut meta, mut view) = (Vec::new(), Vec::new());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(EMBED_CHUNK) {
        let batch = make_batch(samples, chunk)?;
        let mut tape = Tape::new();
        let bindings = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bindings, &batch, SelectionMode::Deterministic)?;
        meta.extend_from_slice(tape.value(out.meta_feature).data());
        view.extend_from_slice(tape.value(out.view_feature).data());
    }
    Ok(Features {
        meta: Tensor::new(vec![samples.len(), d], meta)?,
        view: Tensor::new(vec![samples.len(), d], view)?,
    })
}

pub fn embed_samples(model: &Model, samples: &[Sample]) -> Result<Vec<Embedded>> {
    let f = features(model, samples)?;
    let d = f.meta.shape()[1];
    Ok(samples
        .iter()
        .zip(f.meta.data().chunks(d))
        .map(|(s, row)| Embedded {
            feature: row.to_vec(),
            id: s.id,
            view: s.view,
        })
        .collect())
}

/// Mean `|cos(meta, view)|` over all rows.
pub fn meta_view_alignment(f: &Features) -> f64 {
    let d = f.meta.shape()[1];
    let n = f.meta.shape()[0];
    let total: f64 = f
        .meta
        .data()
        .chunks(d)
        .zip(f.view.data().chunks(d))
        .map(|(m, v)| cosine(m, v).abs())
        .sum();
    total / n as f64
}

pub fn evaluate(items: &[Embedded], protocols: &[Protocol]) -> Result<Vec<RetrievalReport>> {
    protocols.iter().map(|&p| evaluate_protocol(items, p)).collect()
}

pub fn embeddings_to_text(items: &[Embedded]) -> String {
    let recs: Vec<Record> = items
        .iter()
        .map(|e| Record {
            id: e.id,
            view: e.view,
            slots: None,
            shape: vec![e.feature.len()],
            data: e.feature.clone(),
        })
        .collect();
    write_records(&recs)
}

pub fn embeddings_from_text(text: &str) -> Result<Vec<Embedded>> {
    read_records(text)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.shape.len() != 1 {
                return Err(Error::Format(format!(
                    "embedding record {} has shape of rank {}, expected 1",
                    i + 1,
                    r.shape.len()
                )));
            }
            Ok(Embedded {
                feature: r.data,
                id: r.id,
                view: r.view,
            })
        })
        .collect()
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(json_err)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Metric differences `a - b` for one protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub protocol: Protocol,
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mINP")]
    pub minp: f64,
}

pub fn compare(a: &[RetrievalReport], b: &[RetrievalReport]) -> Result<Vec<Comparison>> {
    a.iter()
        .map(|ra| {
            let rb = b
                .iter()
                .find(|r| r.protocol == ra.protocol)
                .ok_or_else(|| Error::Protocol(format!("{} missing from the compared reports", ra.protocol)))?;
            Ok(Comparison {
                protocol: ra.protocol,
                rank1: ra.rank1 - rb.rank1,
                map: ra.map - rb.map,
                minp: ra.minp - rb.minp,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub heads: usize,
    pub k: usize,
    pub position: Placement,
    pub rank1: f64,
    pub map: f64,
    pub minp: f64,
}

pub const ABLATION_HEADER: &str = "heads,k,position,rank1,mAP,mINP";

pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.heads, r.k, r.position, r.rank1, r.map, r.minp
        ));
    }
    out
}

pub fn ablation_from_csv(text: &str) -> Result<Vec<AblationRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(ABLATION_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {ABLATION_HEADER:?}"),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let err = |m: String| Error::Parse { line: i + 2, message: m };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 fields, got {}", f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad integer {s:?}")));
            let real = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
            Ok(AblationRow {
                heads: int(f[0])?,
                k: int(f[1])?,
                position: f[2].parse().map_err(|e: Error| err(e.to_string()))?,
                rank1: real(f[3])?,
                map: real(f[4])?,
                minp: real(f[5])?,
            })
        })
        .collect()
}

/// Trains and scores one grid cell under the cross-view protocol.
pub fn run_cell(exp: &ExperimentConfig, cell: AblationCell, train: &[Sample], test: &[Sample]) -> Result<AblationRow> {
    let (model, _) = train_model(exp.cell_model_config(cell), train, exp)?;
    let report = evaluate_protocol(&embed_samples(&model, test)?, Protocol::AerialGround)?;
    Ok(AblationRow {
        heads: cell.heads,
        k: cell.k,
        position: cell.position,
        rank1: report.rank1,
        map: report.map,
        minp: report.minp,
    })
}

/// Every cell on the same data, rows in grid order.
pub fn run_ablation(exp: &ExperimentConfig, train: &[Sample], test: &[Sample]) -> Result<Vec<AblationRow>> {
    exp.ablation
        .cells()
        .into_par_iter()
        .map(|cell| run_cell(exp, cell, train, test))
        .collect()
}

/// Pass threshold on the relative error of each parameter group.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
/// Coordinates probed per parameter tensor.
const GRADCHECK_COORDS: usize = 6;
/// Batch items used by the gradient check.
const GRADCHECK_BATCH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub group: String,
    pub params: usize,
    pub coords: usize,
    pub rel_error: f64,
    pub passed: bool,
}

pub const GRADCHECK_HEADER: &str = "group,params,coords,rel_error,pass";

pub fn gradcheck_to_csv(rows: &[GradcheckRow]) -> String {
    let mut out = format!("{GRADCHECK_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:e},{}\n",
            r.group, r.params, r.coords, r.rel_error, r.passed
        ));
    }
    out
}

/// Parameter group of a parameter name.
pub fn param_group(name: &str) -> String {
    match name.split('.').next().unwrap_or(name) {
        "patch" | "pos" => "embed".to_string(),
        "meta" | "view" => "tokens".to_string(),
        "head" => name.rsplit_once('.').map_or(name, |(g, _)| g).to_string(),
        other => other.to_string(),
    }
}

fn frozen_loss(model: &Model, batch: &Batch, trace: Option<&crate::backbone::SelectionTrace>, weights: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let bindings = model.params.bind(&mut tape);
    let mode = match trace {
        Some(t) => SelectionMode::Frozen(t),
        None => SelectionMode::Deterministic,
    };
    let out = model.forward(&mut tape, &bindings, batch, mode)?;
    let views: Vec<usize> = batch.views.iter().map(|v| v.index()).collect();
    let (_, report) = objective(
        &mut tape,
        out.id_logits,
        out.view_logits,
        out.meta_feature,
        out.view_feature,
        &batch.ids,
        &views,
        weights,
    )?;
    Ok(report.total)
}

/// Central differences against the analytic gradient of the total loss,
/// per parameter group. Selector noise and indices are recorded once and
/// held fixed.
pub fn gradcheck(model: &Model, samples: &[Sample], weights: &LossWeights, seed: u64) -> Result<Vec<GradcheckRow>> {
    if samples.len() < GRADCHECK_BATCH {
        return Err(Error::Sampling(format!(
            "gradient check needs {GRADCHECK_BATCH} samples, got {}",
            samples.len()
        )));
    }
    let step = samples.len() / GRADCHECK_BATCH;
    let idx: Vec<usize> = (0..GRADCHECK_BATCH).map(|i| i * step).collect();
    let batch = make_batch(samples, &idx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut tape = Tape::new();
    let bindings = model.params.bind(&mut tape);
    let out = model.forward(&mut tape, &bindings, &batch, SelectionMode::Sampled(&mut rng))?;
    let trace = out.selection.clone();
    drop(tape);

    let mut tape = Tape::new();
    let bindings = model.params.bind(&mut tape);
    let mode = match &trace {
        Some(t) => SelectionMode::Frozen(t),
        None => SelectionMode::Deterministic,
    };
    let out = model.forward(&mut tape, &bindings, &batch, mode)?;
    let views: Vec<usize> = batch.views.iter().map(|v| v.index()).collect();
    let (losses, _) = objective(
        &mut tape,
        out.id_logits,
        out.view_logits,
        out.meta_feature,
        out.view_feature,
        &batch.ids,
        &views,
        weights,
    )?;
    let grads = tape.backward(losses.total)?;

    let mut groups: indexmap::IndexMap<String, (usize, Vec<f64>, Vec<f64>)> = indexmap::IndexMap::new();
    let mut probe = model.clone();
    for (name, var) in bindings.iter() {
        let analytic = grads.require(var, name)?;
        let x = model.params.get(name).expect("bound parameter").data().to_vec();
        let coords = spread_coords(x.len(), GRADCHECK_COORDS);
        let mut failure = None;
        let numeric = numeric_gradient(
            |v| {
                probe.params.get_mut(name).expect("bound parameter").data_mut().copy_from_slice(v);
                frozen_loss(&probe, &batch, trace.as_ref(), weights).unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
            },
            &x,
            &coords,
            FD_STEP,
        );
        probe.params.get_mut(name).expect("bound parameter").data_mut().copy_from_slice(&x);
        if let Some(e) = failure {
            return Err(e);
        }
        let entry = groups.entry(param_group(name)).or_default();
        entry.0 += 1;
        entry.1.extend(coords.iter().map(|&c| analytic[c]));
        entry.2.extend(numeric);
    }
    Ok(groups
        .into_iter()
        .map(|(group, (params, a, n))| {
            let rel_error = relative_error(&a, &n);
            GradcheckRow {
                group,
                params,
                coords: a.len(),
                rel_error,
                passed: rel_error < GRADCHECK_TOLERANCE,
            }
        })
        .collect())
}
