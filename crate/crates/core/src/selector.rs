//! Visual token selector: attention-style importance scores over patch
//! tokens, hard top-k, and the Gumbel-perturbed relaxation whose gradient is
//! routed straight through the hard selection.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};

use crate::backbone::{TokenSequence, META_SLOT, SPECIAL_SLOTS, VIEW_SLOT};
use crate::error::{shape_str, Error, Result};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

/// Floor applied to scores before taking logarithms.
pub const SCORE_EPS: f64 = 1e-12;

/// Where the selector sits in an `N`-block stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    /// After block `N`; the reduced sequence feeds the heads directly.
    Last,
    /// After block `N - 1`; the final block runs on the reduced sequence.
    SecondToLast,
}

impl Placement {
    /// Number of blocks whose output the selector reduces: `N` for the last
    /// layer, `N - 1` for the one before it.
    pub fn block_index(self, num_blocks: usize) -> usize {
        match self {
            Placement::Last => num_blocks,
            Placement::SecondToLast => num_blocks.saturating_sub(1),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Placement::Last => "last",
            Placement::SecondToLast => "second_to_last",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Placement::Last),
            "second_to_last" | "penultimate" => Ok(Placement::SecondToLast),
            other => Err(Error::Config(format!(
                "SelectorConfig.position must be last or second_to_last, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorConfig {
    pub k: usize,
    pub temperature: f64,
    pub num_heads: usize,
    pub position: Placement,
    pub noise_enabled: bool,
}

impl Default for SelectorConfig {
    /// Two heads, two tokens, after the final block.
    fn default() -> Self {
        SelectorConfig {
            k: 2,
            temperature: 1.0,
            num_heads: 2,
            position: Placement::Last,
            noise_enabled: true,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self, num_patches: usize, embed_dim: usize) -> Result<()> {
        if self.k == 0 || self.k > num_patches {
            return Err(Error::Config(format!(
                "SelectorConfig.K must lie in [1, {num_patches}], got {}",
                self.k
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "SelectorConfig.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.num_heads == 0 || !embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "SelectorConfig.num_heads {} does not divide embed_dim {embed_dim}",
                self.num_heads
            )));
        }
        Ok(())
    }
}

/// Learnable query/key projections of the selector, both `[d, d]`.
#[derive(Debug, Clone, Copy)]
pub struct SelectorParams {
    pub w_q: Var,
    pub w_k: Var,
}

/// Importance scores of one batch of patch tokens.
#[derive(Debug, Clone, Copy)]
pub struct ScoreVector {
    /// `[B, M]`, each row a probability vector.
    pub scores: Var,
    /// Relaxed weights `[B, M]`, once perturbed.
    pub perturbed: Option<Var>,
}

/// Per-token scores `softmax_i(t_i^T W_q W_k^T t_i / sqrt(d_h))` averaged over
/// `heads` column slices of width `d_h = d / heads`.
pub fn score_tokens(tape: &mut Tape, patch_tokens: Var, params: &SelectorParams, heads: usize) -> Result<ScoreVector> {
    let s = tape.shape(patch_tokens).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("score_tokens on {}", shape_str(&s))));
    }
    let (b, m, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "SelectorConfig.num_heads {heads} does not divide token width {d}"
        )));
    }
    for w in [params.w_q, params.w_k] {
        if tape.shape(w) != [d, d] {
            return Err(Error::Dimension(format!(
                "selector projection {} for token width {d}",
                shape_str(tape.shape(w))
            )));
        }
    }
    let dh = d / heads;
    let q = tape.matmul(patch_tokens, params.w_q)?;
    let k = tape.matmul(patch_tokens, params.w_k)?;
    let qk = tape.mul(q, k)?;
    let per_head = tape.reshape(qk, &[b, m, heads, dh])?;
    let per_head = tape.sum_last(per_head);
    let raw = tape.mean_last(per_head);
    let raw = tape.scale(raw, 1.0 / (dh as f64).sqrt());
    let raw = tape.reshape(raw, &[b, m])?;
    let scores = tape.softmax(raw)?;
    Ok(ScoreVector {
        scores,
        perturbed: None,
    })
}

/// Indices of the `k` largest scores, ties toward the lower index, returned
/// in ascending index order.
pub fn hard_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!(
            "top-k with K = {k} exceeds {} candidates",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// One standard Gumbel sample `-ln(-ln u)`, `u ~ U(0, 1)`.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let mut u: f64 = rng.random();
    while u <= 0.0 {
        u = rng.random();
    }
    -(-u.ln()).ln()
}

/// Source of the Gumbel perturbation.
pub enum Noise<'a> {
    /// No perturbation, regardless of the configuration.
    Off,
    /// Fresh draws from `rng` when the configuration enables noise.
    Sample(&'a mut dyn RngCore),
    /// Replays previously drawn noise of shape `[B, M]`.
    Fixed(&'a Tensor),
}

/// Output of [`perturbed_topk`].
#[derive(Debug, Clone)]
pub struct Perturbed {
    /// Hard top-K per item, ascending.
    pub indices: Vec<Vec<usize>>,
    /// Relaxed weights `softmax((ln s + g) / tau)`, `[B, M]`.
    pub soft: Var,
    /// The noise actually applied, if any.
    pub noise: Option<Tensor>,
}

/// Gumbel-perturbed top-K. The forward pass uses hard indices of the
/// perturbed log-scores; gradients flow only through `soft`.
pub fn perturbed_topk(tape: &mut Tape, scores: &mut ScoreVector, cfg: &SelectorConfig, noise: Noise<'_>) -> Result<Perturbed> {
    let shape = tape.shape(scores.scores).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("perturbed_topk on {}", shape_str(&shape))));
    }
    let (b, m) = (shape[0], shape[1]);
    let noise = match noise {
        Noise::Off => None,
        _ if !cfg.noise_enabled => None,
        Noise::Sample(rng) => Some(Tensor::from_fn(&[b, m], |_| gumbel(rng))),
        Noise::Fixed(t) => {
            if t.shape() != [b, m] {
                return Err(Error::Dimension(format!(
                    "replayed noise {} for scores {}",
                    shape_str(t.shape()),
                    shape_str(&shape)
                )));
            }
            Some(t.clone())
        }
    };
    let log_s = tape.log_clamped(scores.scores, SCORE_EPS);
    let perturbed = match &noise {
        Some(n) => {
            let g = tape.constant(n.clone());
            tape.add(log_s, g)?
        }
        None => log_s,
    };
    let logits = tape.scale(perturbed, 1.0 / cfg.temperature);
    let soft = tape.softmax(logits)?;
    scores.perturbed = Some(soft);

    let ranking = if noise.is_some() { logits } else { scores.scores };
    let values = tape.value(ranking).data().to_vec();
    let indices = values
        .chunks(m)
        .map(|row| hard_topk(row, cfg.k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Perturbed {
        indices,
        soft,
        noise,
    })
}

struct StraightThrough {
    indices: Vec<Vec<usize>>,
    dim: usize,
    candidates: usize,
}

impl Backward for StraightThrough {
    fn name(&self) -> &'static str {
        "straight_through"
    }

    fn backward(&self, g: &[f64], inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Vec<f64>>> {
        let tokens = inputs[0].data();
        let (d, m) = (self.dim, self.candidates);
        let k = self.indices.first().map_or(0, Vec::len);
        let mut dtok = vec![0.0; tokens.len()];
        let mut dsoft = vec![0.0; self.indices.len() * m];
        for (bi, row) in self.indices.iter().enumerate() {
            // Every output slot carries the same soft mixture, so only the
            // summed slot gradient matters for it.
            let mut total = vec![0.0; d];
            for (ki, &idx) in row.iter().enumerate() {
                let go = &g[(bi * k + ki) * d..][..d];
                let dst = &mut dtok[(bi * m + idx) * d..][..d];
                for j in 0..d {
                    dst[j] += go[j];
                    total[j] += go[j];
                }
            }
            for i in 0..m {
                let t = &tokens[(bi * m + i) * d..][..d];
                dsoft[bi * m + i] = total.iter().zip(t).map(|(a, b)| a * b).sum();
            }
        }
        vec![Some(dtok), Some(dsoft)]
    }
}

/// Gathers the `indices` rows of `candidates` `[B, M, d]` into `[B, K, d]`.
///
/// The backward pass treats every output slot as if it also held
/// `sum_i (w_i - stopgrad(w_i)) stopgrad(t_i)`, the soft weights applied to
/// all candidates. That term is zero going forward, so the hard selection is
/// unchanged, while every candidate receives a score gradient. Tokens only
/// receive the gradient of the hard gather.
pub fn straight_through(tape: &mut Tape, candidates: Var, soft: Var, indices: &[Vec<usize>]) -> Result<Var> {
    let (cs, sw) = (tape.shape(candidates).to_vec(), tape.shape(soft).to_vec());
    if cs.len() != 3 || sw.len() != 2 || cs[0] != sw[0] || cs[1] != sw[1] || cs[0] != indices.len() {
        return Err(Error::Dimension(format!(
            "straight_through: candidates {} with weights {}",
            shape_str(&cs),
            shape_str(&sw)
        )));
    }
    let indices = normalize_indices(indices, cs[0], cs[1])?;
    let picked = tape.gather_tokens(candidates, indices.clone())?;
    let out = tape.value(picked).clone();
    Ok(tape.custom(
        &[candidates, soft],
        out,
        Box::new(StraightThrough {
            indices,
            dim: cs[2],
            candidates: cs[1],
        }),
    ))
}

/// Validates and sorts selection indices against `num_patches` candidates.
pub fn normalize_indices(indices: &[Vec<usize>], batch: usize, num_patches: usize) -> Result<Vec<Vec<usize>>> {
    if indices.len() != batch {
        return Err(Error::Contract(format!(
            "{} index lists for a batch of {batch}",
            indices.len()
        )));
    }
    let k = indices.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(batch);
    for row in indices {
        if row.len() != k || k == 0 {
            return Err(Error::Contract("selection rows must be nonempty and equally long".into()));
        }
        let mut sorted = row.clone();
        sorted.sort_unstable();
        if let Some(&bad) = sorted.iter().find(|&&i| i >= num_patches) {
            return Err(Error::Contract(format!(
                "selection index {bad} out of range for {num_patches} patch tokens"
            )));
        }
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!("duplicate selection index in {row:?}")));
        }
        out.push(sorted);
    }
    Ok(out)
}

/// Keeps the meta and view slots plus the chosen patch slots in original order.
///
/// With `soft`, the kept patch tokens pass through [`straight_through`].
pub fn select_tokens(tape: &mut Tape, seq: &TokenSequence, indices: &[Vec<usize>], soft: Option<Var>) -> Result<TokenSequence> {
    let b = seq.batch();
    let indices = normalize_indices(indices, b, seq.num_patches())?;
    let rows: Vec<Vec<usize>> = indices
        .iter()
        .map(|r| r.iter().map(|i| i + SPECIAL_SLOTS).collect())
        .collect();
    let chosen = match soft {
        Some(w) => {
            let slots: Vec<usize> = (SPECIAL_SLOTS..seq.len()).collect();
            let candidates = tape.gather_tokens(seq.tokens, vec![slots; b])?;
            straight_through(tape, candidates, w, &indices)?
        }
        None => tape.gather_tokens(seq.tokens, rows)?,
    };
    let specials = tape.gather_tokens(seq.tokens, vec![vec![META_SLOT, VIEW_SLOT]; b])?;
    let tokens = tape.concat_tokens(&[specials, chosen])?;
    let origin_index = indices
        .iter()
        .zip(&seq.origin_index)
        .map(|(row, origin)| row.iter().map(|&i| origin[i]).collect())
        .collect();
    Ok(TokenSequence {
        tokens,
        view_labels: seq.view_labels.clone(),
        origin_index,
    })
}
