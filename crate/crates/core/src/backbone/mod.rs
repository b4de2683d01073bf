//! View-decoupled transformer backbone.
//!
//! Token layout of every sequence: slot 0 is the meta token, slot 1 the view
//! token, slots `2..` the patch tokens in their original grid order.

pub mod checkpoint;
pub mod model;

use crate::error::{shape_str, Error, Result};
use crate::params::Bindings;
use crate::selector::SelectorConfig;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;
use crate::view::View;

pub use model::{Batch, ForwardOutput, Model, SelectionMode, SelectionTrace};

/// Number of special (non-patch) slots at the head of every sequence.
pub const SPECIAL_SLOTS: usize = 2;
pub const META_SLOT: usize = 0;
pub const VIEW_SLOT: usize = 1;
pub const NUM_VIEWS: usize = 2;
pub const LN_EPS: f64 = 1e-6;
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub num_attn_heads: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_dim: usize,
    pub num_identities: usize,
    pub selector: Option<SelectorConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_blocks: 4,
            embed_dim: 32,
            num_attn_heads: 2,
            grid_rows: 4,
            grid_cols: 4,
            patch_dim: 16,
            num_identities: 32,
            selector: Some(SelectorConfig::default()),
        }
    }
}

impl ModelConfig {
    /// Number of patch tokens `M`.
    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_attn_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ModelConfig.num_blocks", self.num_blocks),
            ("ModelConfig.embed_dim", self.embed_dim),
            ("ModelConfig.num_attn_heads", self.num_attn_heads),
            ("ModelConfig.grid_rows", self.grid_rows),
            ("ModelConfig.grid_cols", self.grid_cols),
            ("ModelConfig.patch_dim", self.patch_dim),
            ("ModelConfig.num_identities", self.num_identities),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.num_attn_heads) {
            return Err(Error::Config(format!(
                "ModelConfig.num_attn_heads {} does not divide embed_dim {}",
                self.num_attn_heads, self.embed_dim
            )));
        }
        if let Some(sel) = &self.selector {
            sel.validate(self.num_patches(), self.embed_dim)?;
        }
        Ok(())
    }

    /// Same architecture without a token selector.
    pub fn without_selector(&self) -> ModelConfig {
        ModelConfig {
            selector: None,
            ..self.clone()
        }
    }
}

/// Batch of token sequences recorded on a tape.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `[B, 2 + M, d]`.
    pub tokens: Var,
    pub view_labels: Vec<View>,
    /// Original grid index of every patch slot, per item.
    pub origin_index: Vec<Vec<usize>>,
}

impl TokenSequence {
    pub fn batch(&self) -> usize {
        self.view_labels.len()
    }

    /// Number of patch slots currently present.
    pub fn num_patches(&self) -> usize {
        self.origin_index.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.num_patches() + SPECIAL_SLOTS
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `x [B, rows, cols, patch_dim]` -> `[B, M, d]`: a shared linear map per
/// patch plus a learned positional embedding per grid index.
pub fn patch_embed(tape: &mut Tape, x: Var, w: Var, b: Var, pos: Var) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let (sw, sp) = (tape.shape(w).to_vec(), tape.shape(pos).to_vec());
    if sx.len() != 4 || sw.len() != 2 || sw[0] != sx[3] || sp.len() != 2 || sp[0] != sx[1] * sx[2] || sp[1] != sw[1] {
        return Err(Error::Dimension(format!(
            "patch_embed: grid {} with projection {} and positions {}",
            shape_str(&sx),
            shape_str(&sw),
            shape_str(&sp)
        )));
    }
    let m = sx[1] * sx[2];
    let flat = tape.reshape(x, &[sx[0], m, sx[3]])?;
    let proj = tape.matmul(flat, w)?;
    let biased = tape.add_broadcast(proj, b)?;
    tape.add_broadcast(biased, pos)
}

/// Prepends the meta token and the per-item view token to `patches [B, M, d]`.
///
/// `view_table` holds one row per view, aerial first.
pub fn attach_special_tokens(
    tape: &mut Tape,
    patches: Var,
    view_labels: &[View],
    meta_init: Var,
    view_table: Var,
) -> Result<TokenSequence> {
    let s = tape.shape(patches).to_vec();
    if s.len() != 3 || s[0] != view_labels.len() {
        return Err(Error::Contract(format!(
            "{} view labels for patch tokens {}",
            view_labels.len(),
            shape_str(&s)
        )));
    }
    if tape.shape(view_table)[0] != NUM_VIEWS {
        return Err(Error::Domain(format!(
            "view table has {} rows, expected {NUM_VIEWS}",
            tape.shape(view_table)[0]
        )));
    }
    let (b, m, d) = (s[0], s[1], s[2]);
    let meta = tape.embedding(meta_init, &vec![0; b])?;
    let meta = tape.reshape(meta, &[b, 1, d])?;
    let rows: Vec<usize> = view_labels.iter().map(|v| v.index()).collect();
    let view = tape.embedding(view_table, &rows)?;
    let view = tape.reshape(view, &[b, 1, d])?;
    let tokens = tape.concat_tokens(&[meta, view, patches])?;
    Ok(TokenSequence {
        tokens,
        view_labels: view_labels.to_vec(),
        origin_index: vec![(0..m).collect(); b],
    })
}

/// Tape handles of one encoder block.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BlockParams {
    pub const NAMES: [&'static str; 16] = [
        "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
        "attn.wo", "attn.bo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
    ];

    pub fn bind(bindings: &Bindings, prefix: &str) -> Result<Self> {
        let g = |n: &str| bindings.get(&format!("{prefix}.{n}"));
        Ok(BlockParams {
            ln1_g: g("ln1.g")?,
            ln1_b: g("ln1.b")?,
            wq: g("attn.wq")?,
            bq: g("attn.bq")?,
            wk: g("attn.wk")?,
            bk: g("attn.bk")?,
            wv: g("attn.wv")?,
            bv: g("attn.bv")?,
            wo: g("attn.wo")?,
            bo: g("attn.bo")?,
            ln2_g: g("ln2.g")?,
            ln2_b: g("ln2.b")?,
            w1: g("mlp.w1")?,
            b1: g("mlp.b1")?,
            w2: g("mlp.w2")?,
            b2: g("mlp.b2")?,
        })
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(y, b)
}

/// Multi-head scaled dot-product self-attention over `x [B, T, d]`.
pub fn multi_head_attention(tape: &mut Tape, x: Var, p: &BlockParams, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Dimension(format!("{heads} attention heads for width {d}")));
    }
    let dh = d / heads;
    let q = linear(tape, x, p.wq, p.bq)?;
    let k = linear(tape, x, p.wk, p.bk)?;
    let v = linear(tape, x, p.wv, p.bv)?;
    let split = |tape: &mut Tape, y: Var, axes: &[usize], out: [usize; 3]| -> Result<Var> {
        let r = tape.reshape(y, &[b, t, heads, dh])?;
        let r = tape.permute(r, axes)?;
        tape.reshape(r, &out)
    };
    let q = split(tape, q, &[0, 2, 1, 3], [b * heads, t, dh])?;
    let kt = split(tape, k, &[0, 2, 3, 1], [b * heads, dh, t])?;
    let v = split(tape, v, &[0, 2, 1, 3], [b * heads, t, dh])?;
    let logits = tape.bmm(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax(logits)?;
    let ctx = tape.bmm(attn, v)?;
    let ctx = tape.reshape(ctx, &[b, heads, t, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, t, d])?;
    linear(tape, ctx, p.wo, p.bo)
}

/// Pre-norm transformer encoder block: attention and GELU MLP, each with a residual.
pub fn encoder_block(tape: &mut Tape, seq: &TokenSequence, p: &BlockParams, heads: usize) -> Result<TokenSequence> {
    let x = seq.tokens;
    let h = tape.layer_norm(x, p.ln1_g, p.ln1_b, LN_EPS)?;
    let a = multi_head_attention(tape, h, p, heads)?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, p.ln2_g, p.ln2_b, LN_EPS)?;
    let h = linear(tape, h, p.w1, p.b1)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, p.w2, p.b2)?;
    let x = tape.add(x, h)?;
    Ok(TokenSequence {
        tokens: x,
        ..seq.clone()
    })
}

struct MetaMinusView {
    tokens: usize,
    dim: usize,
}

impl Backward for MetaMinusView {
    fn name(&self) -> &'static str {
        "meta_minus_view"
    }

    fn backward(&self, g: &[f64], _inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Vec<f64>>> {
        let (t, d) = (self.tokens, self.dim);
        let mut dx = g.to_vec();
        for item in dx.chunks_mut(t * d) {
            for j in 0..d {
                item[VIEW_SLOT * d + j] -= item[META_SLOT * d + j];
            }
        }
        vec![Some(dx)]
    }
}

/// Replaces the meta slot by `meta - view`; all other slots pass through.
pub fn vdt_decouple(tape: &mut Tape, seq: &TokenSequence) -> Result<TokenSequence> {
    let x = tape.value(seq.tokens);
    let s = x.shape().to_vec();
    if s.len() != 3 || s[1] < SPECIAL_SLOTS {
        return Err(Error::Dimension(format!("vdt_decouple on {}", shape_str(&s))));
    }
    let (t, d) = (s[1], s[2]);
    let mut out = x.data().to_vec();
    for item in out.chunks_mut(t * d) {
        for j in 0..d {
            item[META_SLOT * d + j] -= item[VIEW_SLOT * d + j];
        }
    }
    let out = Tensor::new(s, out)?;
    let tokens = tape.custom(&[seq.tokens], out, Box::new(MetaMinusView { tokens: t, dim: d }));
    Ok(TokenSequence {
        tokens,
        ..seq.clone()
    })
}
