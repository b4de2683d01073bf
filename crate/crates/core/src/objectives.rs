//! Identity/view classification losses, the meta-view orthogonality penalty,
//! and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{shape_str, Error, Result};
use crate::tape::{softmax_in_place, Backward, Tape, Var};
use crate::tensor::Tensor;

/// Floor for feature norms in the cosine.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub view: f64,
    pub orth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { view: 1.0, orth: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("LossWeights.view", self.view), ("LossWeights.orth", self.orth)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub id_loss: f64,
    pub view_loss: f64,
    pub orth_loss: f64,
    pub total: f64,
}

struct CrossEntropy {
    labels: Vec<usize>,
    probs: Vec<f64>,
}

impl Backward for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, g: &[f64], _inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Vec<f64>>> {
        let b = self.labels.len();
        let c = self.probs.len() / b;
        let scale = g[0] / b as f64;
        let mut d = self.probs.clone();
        for (i, &y) in self.labels.iter().enumerate() {
            d[i * c + y] -= 1.0;
        }
        d.iter_mut().for_each(|v| *v *= scale);
        vec![Some(d)]
    }
}

/// Batch mean of `-ln softmax(logits)[label]`.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let t = tape.value(logits);
    let s = t.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "cross_entropy: logits {} for {} labels",
            shape_str(s),
            labels.len()
        )));
    }
    let c = s[1];
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Domain(format!("label {bad} outside [0, {c})")));
    }
    let mut probs = t.data().to_vec();
    let mut loss = 0.0;
    for (row, (&y, logit_row)) in probs.chunks_mut(c).zip(labels.iter().zip(t.data().chunks(c))) {
        let max = logit_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logit_row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - logit_row[y];
        softmax_in_place(row);
    }
    loss /= labels.len() as f64;
    Ok(tape.custom(
        &[logits],
        Tensor::scalar(loss),
        Box::new(CrossEntropy {
            labels: labels.to_vec(),
            probs,
        }),
    ))
}

struct OrthogonalLoss;

fn row_stats(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let ra = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (ra.max(NORM_EPS), rb.max(NORM_EPS));
    (dot, ra, rb, na, nb)
}

impl Backward for OrthogonalLoss {
    fn name(&self) -> &'static str {
        "orthogonal_loss"
    }

    fn backward(&self, g: &[f64], inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Vec<f64>>> {
        let (ta, tb) = (inputs[0], inputs[1]);
        let d = ta.last_dim();
        let rows = ta.numel() / d;
        let scale = g[0] / rows as f64;
        let mut da = vec![0.0; ta.numel()];
        let mut db = vec![0.0; tb.numel()];
        for r in 0..rows {
            let (a, b) = (&ta.data()[r * d..(r + 1) * d], &tb.data()[r * d..(r + 1) * d]);
            let (dot, ra, rb, na, nb) = row_stats(a, b);
            let cos = dot / (na * nb);
            let coef = 2.0 * cos * scale;
            for j in 0..d {
                let mut ga = b[j] / (na * nb);
                let mut gb = a[j] / (na * nb);
                if ra > NORM_EPS {
                    ga -= cos * a[j] / (na * na);
                }
                if rb > NORM_EPS {
                    gb -= cos * b[j] / (nb * nb);
                }
                da[r * d + j] = coef * ga;
                db[r * d + j] = coef * gb;
            }
        }
        vec![Some(da), Some(db)]
    }
}

/// Batch mean of the squared cosine between paired rows of `meta` and `view`.
pub fn orthogonal_loss(tape: &mut Tape, meta: Var, view: Var) -> Result<Var> {
    let (ta, tb) = (tape.value(meta), tape.value(view));
    if ta.shape() != tb.shape() || ta.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "orthogonal_loss: {} vs {}",
            shape_str(ta.shape()),
            shape_str(tb.shape())
        )));
    }
    let d = ta.last_dim();
    let rows = ta.numel() / d;
    let mut sum = 0.0;
    for r in 0..rows {
        let (dot, _, _, na, nb) = row_stats(&ta.data()[r * d..(r + 1) * d], &tb.data()[r * d..(r + 1) * d]);
        let cos = dot / (na * nb);
        sum += cos * cos;
    }
    Ok(tape.custom(&[meta, view], Tensor::scalar(sum / rows as f64), Box::new(OrthogonalLoss)))
}

/// Cosine similarity of two plain vectors with norms floored at [`NORM_EPS`].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (dot, _, _, na, nb) = row_stats(a, b);
    dot / (na * nb)
}

/// `id + view_w * view + orth_w * orth`, rejecting non-finite components.
pub fn total_loss(id_loss: f64, view_loss: f64, orth_loss: f64, weights: &LossWeights) -> Result<LossReport> {
    for (name, v) in [("id_loss", id_loss), ("view_loss", view_loss), ("orth_loss", orth_loss)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite ({v})")));
        }
    }
    Ok(LossReport {
        id_loss,
        view_loss,
        orth_loss,
        total: id_loss + weights.view * view_loss + weights.orth * orth_loss,
    })
}

/// Loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub id: Var,
    pub view: Var,
    pub orth: Var,
    pub total: Var,
}

/// Records all three terms and their weighted sum, with the same arithmetic
/// order as [`total_loss`].
#[allow(clippy::too_many_arguments)]
pub fn objective(
    tape: &mut Tape,
    id_logits: Var,
    view_logits: Var,
    meta_feature: Var,
    view_feature: Var,
    ids: &[usize],
    views: &[usize],
    weights: &LossWeights,
) -> Result<(LossVars, LossReport)> {
    let id = cross_entropy_loss(tape, id_logits, ids)?;
    let view = cross_entropy_loss(tape, view_logits, views)?;
    let orth = orthogonal_loss(tape, meta_feature, view_feature)?;
    let report = total_loss(
        tape.value(id).data()[0],
        tape.value(view).data()[0],
        tape.value(orth).data()[0],
        weights,
    )?;
    let wv = tape.scale(view, weights.view);
    let wo = tape.scale(orth, weights.orth);
    let partial = tape.add(id, wv)?;
    let total = tape.add(partial, wo)?;
    Ok((LossVars { id, view, orth, total }, report))
}
