//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; inputs always precede the
//! node that consumes them, so a single reverse sweep visits each node once.
//! The tape is rebuilt for every forward pass.

use crate::error::{shape_str, Error, Result};
use crate::tensor::{strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for an operation defined outside this module.
pub trait Backward: Send {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` marks an
    /// input that receives no contribution.
    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], output: &Tensor)
        -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    LogClamped(Var, f64),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    MeanLast(Var),
    GatherTokens(Var, Vec<Vec<usize>>),
    ConcatTokens(Vec<Var>),
    Embedding(Var, Vec<usize>),
    Custom(Vec<Var>, Box<dyn Backward>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or an error naming `what` if none was recorded.
    pub fn require(&self, var: Var, what: &str) -> Result<&[f64]> {
        self.get(var)
            .ok_or_else(|| Error::Contract(format!("no gradient recorded for {what}")))
    }
}

/// `c = a * b (+ beta * c)` where `a` is logically m x k and `b` is k x n.
/// Transposed operands are read through strides, so no copies are made.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: slice lengths are checked above and the strides address only
    // elements inside each buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {} and {}", shape_str(a), shape_str(b)))
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    (out_shape, out)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records `tensor` as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let mut value = tensor;
        value.clear_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.data().to_vec());
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut value = tensor;
        value.clear_grad();
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `var` cut off from the gradient flow.
    pub fn detach(&mut self, var: Var) -> Var {
        let v = self.value(var).clone();
        self.constant(v)
    }

    /// Matrix product of `a [.., k]` (leading dims flattened into rows) with `b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg))
    }

    /// Batched product `[bt, m, k] x [bt, k, n] -> [bt, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err("bmm", &sa, &sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![bt, m, n], out), Op::BatchMatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `a + b` where the shape of `b` is a suffix of the shape of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err("add_broadcast", sa, sb));
        }
        let inner = tb.numel();
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % inner])
            .collect();
        let v = Tensor::from_parts(sa.to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::AddBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let v = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect());
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Softmax over the trailing dimension, stabilised by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.last_dim();
        if ta.ndim() == 0 || n == 0 {
            return Err(Error::Dimension("softmax over an empty dimension".into()));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let v = Tensor::from_parts(ta.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Softmax(a), rg))
    }

    /// Layer normalisation over the trailing dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let tx = self.value(x);
        let n = tx.last_dim();
        if n == 0 {
            return Err(Error::Dimension("layer_norm over an empty dimension".into()));
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(dim_err("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / n;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let v = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let v = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| gelu(x)).collect());
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let v = Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| x.max(eps).ln()).collect(),
        );
        let rg = self.rg(&[a]);
        self.push(v, Op::LogClamped(a, eps), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let rank = ta.ndim();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::Dimension(format!(
                "permute: {axes:?} is not a permutation of {} axes",
                rank
            )));
        }
        let (shape, data) = permute_data(ta.data(), ta.shape(), axes);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    fn reduce_last_shape(shape: &[usize]) -> Vec<usize> {
        if shape.len() <= 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        }
    }

    /// Sum over the trailing dimension.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let data = t.data().chunks(n).map(|c| c.iter().sum()).collect();
        let v = Tensor::from_parts(Self::reduce_last_shape(t.shape()), data);
        let rg = self.rg(&[a]);
        self.push(v, Op::SumLast(a), rg)
    }

    /// Mean over the trailing dimension.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let data = t
            .data()
            .chunks(n)
            .map(|c| c.iter().sum::<f64>() / n as f64)
            .collect();
        let v = Tensor::from_parts(Self::reduce_last_shape(t.shape()), data);
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanLast(a), rg)
    }

    /// Selects rows along axis 1 of `a [B, T, d]`; `indices[b]` lists the rows
    /// kept for item `b` and all lists must share one length.
    pub fn gather_tokens(&mut self, a: Var, indices: Vec<Vec<usize>>) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() != 3 || indices.len() != s[0] {
            return Err(Error::Dimension(format!(
                "gather_tokens: {} index lists for tensor {}",
                indices.len(),
                shape_str(s)
            )));
        }
        let (b, tl, d) = (s[0], s[1], s[2]);
        let k = indices.first().map_or(0, |v| v.len());
        if k == 0 || indices.iter().any(|v| v.len() != k) {
            return Err(Error::Contract("gather_tokens: ragged or empty index lists".into()));
        }
        if let Some(bad) = indices.iter().flatten().find(|&&i| i >= tl) {
            return Err(Error::Contract(format!(
                "gather_tokens: index {bad} out of range for {tl} tokens"
            )));
        }
        let mut out = Vec::with_capacity(b * k * d);
        for (bi, row) in indices.iter().enumerate() {
            for &i in row {
                let off = (bi * tl + i) * d;
                out.extend_from_slice(&t.data()[off..off + d]);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![b, k, d], out), Op::GatherTokens(a, indices), rg))
    }

    /// Concatenates `[B, T_i, d]` tensors along axis 1.
    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| {
            Error::Contract("concat_tokens: no inputs".into())
        })?)
        .to_vec();
        if first.len() != 3 {
            return Err(Error::Dimension(format!("concat_tokens: rank of {}", shape_str(&first))));
        }
        let (b, d) = (first[0], first[2]);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != b || s[2] != d {
                return Err(dim_err("concat_tokens", &first, s));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[1] * d;
                out.extend_from_slice(&t.data()[bi * len..(bi + 1) * len]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![b, total, d], out),
            Op::ConcatTokens(parts.to_vec()),
            rg,
        ))
    }

    /// Row lookup: `table [n, d]`, `rows [L]` -> `[L, d]`.
    pub fn embedding(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("embedding table of shape {}", shape_str(s))));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Contract(format!("embedding row {bad} out of range for {n} rows")));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), d], out),
            Op::Embedding(table, rows.to_vec()),
            rg,
        ))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, backward: Box<dyn Backward>) -> Var {
        let rg = self.rg(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), backward), rg)
    }

    /// Reverse sweep from a scalar `root`. Every trainable leaf receives a
    /// gradient; leaves that do not reach `root` receive zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {}",
                shape_str(root_val.shape())
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let k = tb.shape()[0];
                let n = tb.shape()[1];
                let m = ta.numel() / k;
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tb.data(), true, &mut da, 0.0);
                    accumulate(&mut grads[a.0], da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g, false, &mut db, 0.0);
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (bt, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                if needs(*a) {
                    let mut da = vec![0.0; bt * m * k];
                    for i in 0..bt {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            true,
                            &mut da[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; bt * k * n];
                    for i in 0..bt {
                        gemm(
                            k,
                            m,
                            n,
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut db[i * k * n..(i + 1) * k * n],
                            0.0,
                        );
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], d);
                }
                if needs(*b) {
                    let d = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::AddBroadcast(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if needs(*b) {
                    let inner = val(*b).numel();
                    let mut db = vec![0.0; inner];
                    for chunk in g.chunks(inner) {
                        for (d, x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.iter().map(|x| x * c).collect());
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = node.value.last_dim();
                let gam = val(*gamma).data();
                if needs(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            dx[r * n + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if needs(*gamma) {
                    let mut dg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(&mut grads[gamma.0], dg);
                }
                if needs(*beta) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        for j in 0..n {
                            db[j] += gr[j];
                        }
                    }
                    accumulate(&mut grads[beta.0], db);
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let d = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(q, &x)| q * gelu_grad(x))
                        .collect();
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::LogClamped(a, eps) => {
                if needs(*a) {
                    let d = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(q, &x)| if x > *eps { q / x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Permute(a, axes) => {
                if needs(*a) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (_, d) = permute_data(g, node.value.shape(), &inverse);
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], vec![g[0]; val(*a).numel()]);
                }
            }
            Op::MeanAll(a) => {
                if needs(*a) {
                    let n = val(*a).numel();
                    accumulate(&mut grads[a.0], vec![g[0] / n as f64; n]);
                }
            }
            Op::SumLast(a) | Op::MeanLast(a) => {
                if needs(*a) {
                    let n = val(*a).last_dim();
                    let scale = if matches!(node.op, Op::MeanLast(_)) {
                        1.0 / n as f64
                    } else {
                        1.0
                    };
                    let d = g
                        .iter()
                        .flat_map(|&q| std::iter::repeat_n(q * scale, n))
                        .collect();
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::GatherTokens(a, indices) => {
                if needs(*a) {
                    let s = val(*a).shape();
                    let (tl, d) = (s[1], s[2]);
                    let mut da = vec![0.0; val(*a).numel()];
                    let k = indices[0].len();
                    for (bi, row) in indices.iter().enumerate() {
                        for (ki, &i) in row.iter().enumerate() {
                            let src = (bi * k + ki) * d;
                            let dst = (bi * tl + i) * d;
                            for j in 0..d {
                                da[dst + j] += g[src + j];
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::ConcatTokens(parts) => {
                let s = node.value.shape();
                let (b, total, d) = (s[0], s[1], s[2]);
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[1];
                    if needs(p) {
                        let mut dp = Vec::with_capacity(b * len * d);
                        for bi in 0..b {
                            let off = (bi * total + start) * d;
                            dp.extend_from_slice(&g[off..off + len * d]);
                        }
                        accumulate(&mut grads[p.0], dp);
                    }
                    start += len;
                }
            }
            Op::Embedding(table, rows) => {
                if needs(*table) {
                    let d = val(*table).shape()[1];
                    let mut dt = vec![0.0; val(*table).numel()];
                    for (li, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            dt[r * d + j] += g[li * d + j];
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
            }
            Op::Custom(inputs, bw) => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let outs = bw.backward(g, &tensors, &node.value);
                if outs.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        bw.name(),
                        outs.len(),
                        inputs.len()
                    )));
                }
                for (v, d) in inputs.iter().zip(outs) {
                    if let Some(d) = d {
                        if needs(*v) {
                            accumulate(&mut grads[v.0], d);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax of one slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
