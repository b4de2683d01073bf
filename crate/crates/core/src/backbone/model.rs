//! Parameter initialisation and the full forward pass.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, Uniform};

use super::{
    attach_special_tokens, encoder_block, patch_embed, vdt_decouple, BlockParams, ModelConfig,
    TokenSequence, LN_EPS, META_SLOT, MLP_RATIO, NUM_VIEWS, SPECIAL_SLOTS, VIEW_SLOT,
};
use crate::error::{shape_str, Error, Result};
use crate::params::{Bindings, ParamSet};
use crate::selector::{self, Noise, SelectorParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::view::View;

/// Standard deviation of the learned token and position embeddings at init.
const EMBED_INIT_STD: f64 = 0.02;

/// Model input.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, rows, cols, patch_dim]`.
    pub x: Tensor,
    pub ids: Vec<usize>,
    pub views: Vec<View>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// How the selector chooses tokens during a forward pass.
pub enum SelectionMode<'a> {
    /// No noise: hard top-K of the clean scores.
    Deterministic,
    /// Gumbel noise from `rng` when the selector enables it.
    Sampled(&'a mut dyn RngCore),
    /// Replays a recorded selection with indices and noise held fixed. Soft
    /// weights enter through an explicit `sum_i (w_i - w_ref_i) t_i` term
    /// added to each kept token, which makes the loss a smooth function of
    /// the selector parameters.
    Frozen(&'a SelectionTrace),
}

/// Record of one selector application.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionTrace {
    pub indices: Vec<Vec<usize>>,
    pub scores: Tensor,
    pub soft: Tensor,
    pub noise: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, d]` identity (retrieval) feature.
    pub meta_feature: Var,
    /// `[B, d]` view feature.
    pub view_feature: Var,
    pub id_logits: Var,
    pub view_logits: Var,
    pub sequence: TokenSequence,
    pub selection: Option<SelectionTrace>,
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut dyn RngCore) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn normal(shape: &[usize], std: f64, rng: &mut dyn RngCore) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

impl Model {
    /// Projections ~ U(-1/sqrt(d), 1/sqrt(d)), embeddings ~ N(0, 0.02^2),
    /// biases zero, layer norms identity.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Model> {
        config.validate()?;
        let rng: &mut dyn RngCore = rng;
        let d = config.embed_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let hidden = MLP_RATIO * d;
        let mut p = ParamSet::new();
        p.insert("patch.w", uniform(&[config.patch_dim, d], bound, rng));
        p.insert("patch.b", Tensor::zeros(&[d]));
        p.insert("pos", normal(&[config.num_patches(), d], EMBED_INIT_STD, rng));
        p.insert("meta", normal(&[1, d], EMBED_INIT_STD, rng));
        p.insert("view", normal(&[NUM_VIEWS, d], EMBED_INIT_STD, rng));
        for i in 0..config.num_blocks {
            let n = |s: &str| format!("block{i}.{s}");
            p.insert(n("ln1.g"), Tensor::full(&[d], 1.0));
            p.insert(n("ln1.b"), Tensor::zeros(&[d]));
            for w in ["q", "k", "v", "o"] {
                p.insert(n(&format!("attn.w{w}")), uniform(&[d, d], bound, rng));
                p.insert(n(&format!("attn.b{w}")), Tensor::zeros(&[d]));
            }
            p.insert(n("ln2.g"), Tensor::full(&[d], 1.0));
            p.insert(n("ln2.b"), Tensor::zeros(&[d]));
            p.insert(n("mlp.w1"), uniform(&[d, hidden], bound, rng));
            p.insert(n("mlp.b1"), Tensor::zeros(&[hidden]));
            p.insert(n("mlp.w2"), uniform(&[hidden, d], bound, rng));
            p.insert(n("mlp.b2"), Tensor::zeros(&[d]));
        }
        p.insert("norm.g", Tensor::full(&[d], 1.0));
        p.insert("norm.b", Tensor::zeros(&[d]));
        p.insert("head.id.w", uniform(&[d, config.num_identities], bound, rng));
        p.insert("head.id.b", Tensor::zeros(&[config.num_identities]));
        p.insert("head.view.w", uniform(&[d, NUM_VIEWS], bound, rng));
        p.insert("head.view.b", Tensor::zeros(&[NUM_VIEWS]));
        // Drawn last so a selector-free model with the same seed shares
        // every other initial value.
        if config.selector.is_some() {
            p.insert("selector.w_q", uniform(&[d, d], bound, rng));
            p.insert("selector.w_k", uniform(&[d, d], bound, rng));
        }
        Ok(Model { config, params: p })
    }

    /// Forward pass with parameters already bound on `tape`.
    ///
    /// Each block is followed by the meta-minus-view subtraction. The
    /// selector, if configured, reduces the output of block `p` (its
    /// placement) to the meta and view slots plus K patch slots; later blocks
    /// attend over the kept tokens only. The identity (retrieval) feature is
    /// the final meta slot and the view feature the final view slot, both
    /// after the closing layer norm. With the selector after the last block
    /// the features do not depend on it.
    pub fn forward(&self, tape: &mut Tape, bindings: &Bindings, batch: &Batch, mode: SelectionMode<'_>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let xs = batch.x.shape();
        if xs.len() != 4 || xs[0] != batch.len() || xs[1] != cfg.grid_rows || xs[2] != cfg.grid_cols || xs[3] != cfg.patch_dim {
            return Err(Error::Dimension(format!(
                "batch grid {} does not match model grid [{}x{}x{}] for {} items",
                shape_str(xs),
                cfg.grid_rows,
                cfg.grid_cols,
                cfg.patch_dim,
                batch.len()
            )));
        }
        if batch.views.len() != batch.len() {
            return Err(Error::Contract("one view label per batch item is required".into()));
        }
        let b = batch.len();
        let d = cfg.embed_dim;
        let x = tape.constant(batch.x.clone());
        let patches = patch_embed(tape, x, bindings.get("patch.w")?, bindings.get("patch.b")?, bindings.get("pos")?)?;
        let mut seq = attach_special_tokens(tape, patches, &batch.views, bindings.get("meta")?, bindings.get("view")?)?;

        let select_at = cfg.selector.as_ref().map(|s| s.position.block_index(cfg.num_blocks));
        let mut mode = mode;
        let mut trace = None;
        for i in 0..=cfg.num_blocks {
            if select_at == Some(i) {
                let (s, t) = self.apply_selector(tape, bindings, &seq, &mut mode)?;
                seq = s;
                trace = Some(t);
            }
            if i == cfg.num_blocks {
                break;
            }
            let p = BlockParams::bind(bindings, &format!("block{i}"))?;
            seq = encoder_block(tape, &seq, &p, cfg.num_attn_heads)?;
            seq = vdt_decouple(tape, &seq)?;
        }

        let normed = tape.layer_norm(seq.tokens, bindings.get("norm.g")?, bindings.get("norm.b")?, LN_EPS)?;
        let meta = tape.gather_tokens(normed, vec![vec![META_SLOT]; b])?;
        let meta_feature = tape.reshape(meta, &[b, d])?;
        let view = tape.gather_tokens(normed, vec![vec![VIEW_SLOT]; b])?;
        let view_feature = tape.reshape(view, &[b, d])?;

        let id_logits = tape.matmul(meta_feature, bindings.get("head.id.w")?)?;
        let id_logits = tape.add_broadcast(id_logits, bindings.get("head.id.b")?)?;
        let view_logits = tape.matmul(view_feature, bindings.get("head.view.w")?)?;
        let view_logits = tape.add_broadcast(view_logits, bindings.get("head.view.b")?)?;
        Ok(ForwardOutput {
            meta_feature,
            view_feature,
            id_logits,
            view_logits,
            sequence: TokenSequence { tokens: normed, ..seq },
            selection: trace,
        })
    }

    fn apply_selector(
        &self,
        tape: &mut Tape,
        bindings: &Bindings,
        seq: &TokenSequence,
        mode: &mut SelectionMode<'_>,
    ) -> Result<(TokenSequence, SelectionTrace)> {
        let cfg = self.config.selector.as_ref().expect("selector configured");
        let b = seq.batch();
        let params = SelectorParams {
            w_q: bindings.get("selector.w_q")?,
            w_k: bindings.get("selector.w_k")?,
        };
        let slots: Vec<usize> = (SPECIAL_SLOTS..seq.len()).collect();
        let patches = tape.gather_tokens(seq.tokens, vec![slots; b])?;
        let mut scores = selector::score_tokens(tape, patches, &params, cfg.num_heads)?;
        let noise = match mode {
            SelectionMode::Deterministic => Noise::Off,
            SelectionMode::Sampled(rng) => Noise::Sample(&mut **rng),
            SelectionMode::Frozen(trace) => match &trace.noise {
                Some(n) => Noise::Fixed(n),
                None => Noise::Off,
            },
        };
        let pert = selector::perturbed_topk(tape, &mut scores, cfg, noise)?;
        let (next, indices) = match mode {
            SelectionMode::Frozen(trace) => {
                let next = frozen_surrogate(tape, seq, &trace.indices, pert.soft, &trace.soft)?;
                (next, trace.indices.clone())
            }
            _ => {
                let next = selector::select_tokens(tape, seq, &pert.indices, Some(pert.soft))?;
                (next, pert.indices)
            }
        };
        let trace = SelectionTrace {
            indices,
            scores: tape.value(scores.scores).clone(),
            soft: tape.value(pert.soft).clone(),
            noise: pert.noise,
        };
        Ok((next, trace))
    }

    /// Evaluation-mode features `[B, d]` for retrieval (no selector noise).
    pub fn embed(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bindings = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &bindings, batch, SelectionMode::Deterministic)?;
        Ok(tape.value(out.meta_feature).clone())
    }
}

/// Selected tokens plus `sum_i (w_i - w_ref_i) t_i` over all (detached)
/// candidates,
/// with fixed indices, built from ordinary differentiable ops.
fn frozen_surrogate(
    tape: &mut Tape,
    seq: &TokenSequence,
    indices: &[Vec<usize>],
    soft: Var,
    reference: &Tensor,
) -> Result<TokenSequence> {
    let b = seq.batch();
    let m = tape.shape(soft)[1];
    let plain = selector::select_tokens(tape, seq, indices, None)?;
    let k = plain.num_patches();
    let rows: Vec<Vec<usize>> = vec![(SPECIAL_SLOTS..plain.len()).collect(); b];
    let chosen = tape.gather_tokens(plain.tokens, rows)?;
    let w_ref = tape.constant(reference.clone());
    let delta = tape.sub(soft, w_ref)?;
    let delta = tape.reshape(delta, &[b, 1, m])?;
    let ones = tape.constant(Tensor::full(&[b, k, 1], 1.0));
    let mix = tape.bmm(ones, delta)?;
    let slots: Vec<usize> = (SPECIAL_SLOTS..seq.len()).collect();
    let candidates = tape.gather_tokens(seq.tokens, vec![slots; b])?;
    let candidates = tape.detach(candidates);
    let extra = tape.bmm(mix, candidates)?;
    let chosen = tape.add(chosen, extra)?;
    let specials = tape.gather_tokens(seq.tokens, vec![vec![META_SLOT, VIEW_SLOT]; b])?;
    let tokens = tape.concat_tokens(&[specials, chosen])?;
    Ok(TokenSequence { tokens, ..plain })
}
