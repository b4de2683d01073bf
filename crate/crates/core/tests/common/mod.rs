#![allow(dead_code)]

use dtst::backbone::{vdt_decouple, Batch, Model, ModelConfig, SelectionMode, TokenSequence};
use dtst::gradcheck::{numeric_gradient, relative_error, FD_STEP};
use dtst::objectives::{cross_entropy_loss, objective, orthogonal_loss, LossWeights};
use dtst::selector::{Placement, SelectorConfig};
use dtst::{Result, Tape, Tensor, Var, View};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn positive_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0))
}

/// Weighted sum of `f(inputs)` with fixed random weights, so every output
/// entry matters for the gradient.
fn weighted_loss(
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    weights: Option<&Tensor>,
    track: bool,
) -> (Tape, Vec<Var>, Var, Tensor) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if track { tape.param(t) } else { tape.constant(t.clone()) })
        .collect();
    let out = f(&mut tape, &vars).expect("op under test");
    let w = match weights {
        Some(w) => w.clone(),
        None => {
            let n = tape.value(out).numel();
            Tensor::from_fn(tape.shape(out), |i| 0.3 + ((i * 37 + 11) % n.max(7)) as f64 / n.max(7) as f64)
        }
    };
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv).expect("weights match output");
    let loss = tape.sum(prod);
    (tape, vars, loss, w)
}

/// Relative error between analytic and central-difference gradients, taken
/// jointly over every input of `f` (a single input may have an exactly zero
/// gradient, e.g. attention key biases).
pub fn fd_error(f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> f64 {
    let (tape, vars, loss, w) = weighted_loss(&f, inputs, None, true);
    let grads = tape.backward(loss).expect("backward");
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").to_vec();
        let x = inputs[k].data().to_vec();
        let coords: Vec<usize> = (0..x.len()).collect();
        let numeric = numeric_gradient(
            |v| {
                let mut probe = inputs.to_vec();
                probe[k] = Tensor::new(inputs[k].shape().to_vec(), v.to_vec()).unwrap();
                let (t, _, l, _) = weighted_loss(&f, &probe, Some(&w), false);
                t.value(l).data()[0]
            },
            &x,
            &coords,
            FD_STEP,
        );
        all_a.extend(analytic);
        all_n.extend(numeric);
    }
    relative_error(&all_a, &all_n)
}

// Model fixtures.

pub fn small_config(blocks: usize, d: usize, heads: usize, selector: Option<SelectorConfig>) -> ModelConfig {
    ModelConfig {
        num_blocks: blocks,
        embed_dim: d,
        num_attn_heads: heads,
        grid_rows: 2,
        grid_cols: 3,
        patch_dim: 5,
        num_identities: 4,
        selector,
    }
}

/// Model with every parameter (gains and biases included) drawn at random.
pub fn random_model(cfg: ModelConfig, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::init(cfg, &mut rng).unwrap();
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    model
}

pub fn random_batch(cfg: &ModelConfig, b: usize, rng: &mut ChaCha8Rng) -> Batch {
    Batch {
        x: random_tensor(&[b, cfg.grid_rows, cfg.grid_cols, cfg.patch_dim], rng),
        ids: (0..b).map(|_| rng.random_range(0..cfg.num_identities)).collect(),
        views: (0..b).map(|i| View::ALL[i % 2]).collect(),
    }
}

pub fn forward_values(model: &Model, batch: &Batch) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let bindings = model.params.bind(&mut tape);
    let out = model.forward(&mut tape, &bindings, batch, SelectionMode::Deterministic).unwrap();
    [out.meta_feature, out.view_feature, out.id_logits, out.view_logits]
        .iter()
        .map(|v| tape.value(*v).data().to_vec())
        .collect()
}

pub fn tokens(tape: &mut Tape, x: dtst::Var, b: usize) -> TokenSequence {
    let m = tape.shape(x)[1] - 2;
    TokenSequence {
        tokens: x,
        view_labels: vec![View::Aerial; b],
        origin_index: vec![(0..m).collect(); b],
    }
}

/// Worst relative error of each differentiable operation over `trials`
/// random small shapes.
pub fn op_fd_errors(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(e) => e.1 = e.1.max(err),
        None => worst.push((name, err)),
    };
    for _ in 0..trials {
        let b = rng.random_range(1..3);
        let m = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let n = rng.random_range(1..4);
        let r = &mut rng;

        record("matmul", fd_error(|tp, v| tp.matmul(v[0], v[1]), &[random_tensor(&[b, m, k], r), random_tensor(&[k, n], r)]));
        record("bmm", fd_error(|tp, v| tp.bmm(v[0], v[1]), &[random_tensor(&[b, m, k], r), random_tensor(&[b, k, n], r)]));
        let s = [b, m, n];
        record("add", fd_error(|tp, v| tp.add(v[0], v[1]), &[random_tensor(&s, r), random_tensor(&s, r)]));
        record("sub", fd_error(|tp, v| tp.sub(v[0], v[1]), &[random_tensor(&s, r), random_tensor(&s, r)]));
        record("mul", fd_error(|tp, v| tp.mul(v[0], v[1]), &[random_tensor(&s, r), random_tensor(&s, r)]));
        record("add_broadcast", fd_error(|tp, v| tp.add_broadcast(v[0], v[1]), &[random_tensor(&s, r), random_tensor(&[m, n], r)]));
        let c: f64 = r.random_range(-2.0..2.0);
        record("scale", fd_error(|tp, v| Ok(tp.scale(v[0], c)), &[random_tensor(&s, r)]));
        record("softmax", fd_error(|tp, v| tp.softmax(v[0]), &[random_tensor(&s, r)]));
        let d = n + 1;
        record(
            "layer_norm",
            fd_error(|tp, v| tp.layer_norm(v[0], v[1], v[2], 1e-6), &[random_tensor(&[b, m, d], r), random_tensor(&[d], r), random_tensor(&[d], r)]),
        );
        record("gelu", fd_error(|tp, v| Ok(tp.gelu(v[0])), &[random_tensor(&s, r)]));
        record("log_clamped", fd_error(|tp, v| Ok(tp.log_clamped(v[0], 1e-12)), &[positive_tensor(&s, r)]));
        record("permute", fd_error(|tp, v| tp.permute(v[0], &[2, 0, 1]), &[random_tensor(&s, r)]));
        record("reshape", fd_error(|tp, v| tp.reshape(v[0], &[b * m, n]), &[random_tensor(&s, r)]));
        record("sum", fd_error(|tp, v| Ok(tp.sum(v[0])), &[random_tensor(&s, r)]));
        record("mean", fd_error(|tp, v| Ok(tp.mean(v[0])), &[random_tensor(&s, r)]));
        record("sum_last", fd_error(|tp, v| Ok(tp.sum_last(v[0])), &[random_tensor(&s, r)]));
        record("mean_last", fd_error(|tp, v| Ok(tp.mean_last(v[0])), &[random_tensor(&s, r)]));
        let rows: Vec<Vec<usize>> = (0..b).map(|_| (0..2).map(|_| r.random_range(0..m)).collect()).collect();
        record("gather_tokens", fd_error(|tp, v| tp.gather_tokens(v[0], rows.clone()), &[random_tensor(&s, r)]));
        record(
            "concat_tokens",
            fd_error(|tp, v| tp.concat_tokens(&[v[0], v[1]]), &[random_tensor(&s, r), random_tensor(&[b, k, n], r)]),
        );
        let lookup: Vec<usize> = (0..3).map(|_| r.random_range(0..m)).collect();
        record("embedding", fd_error(|tp, v| tp.embedding(v[0], &lookup), &[random_tensor(&[m, n], r)]));
        record(
            "vdt_decouple",
            fd_error(
                |tp, v| {
                    let seq = tokens(tp, v[0], b);
                    Ok(vdt_decouple(tp, &seq)?.tokens)
                },
                &[random_tensor(&[b, m + 2, n], r)],
            ),
        );
        let labels: Vec<usize> = (0..b * m).map(|_| r.random_range(0..n)).collect();
        record(
            "cross_entropy",
            fd_error(|tp, v| cross_entropy_loss(tp, v[0], &labels), &[random_tensor(&[b * m, n], r)]),
        );
        record(
            "orthogonal_loss",
            fd_error(|tp, v| orthogonal_loss(tp, v[0], v[1]), &[random_tensor(&[b, d], r), random_tensor(&[b, d], r)]),
        );
    }
    worst
}

/// Largest output deviation between a keep-everything, noise-off selector
/// and the same model without one, over `trials` random configurations.
pub fn full_retention_max_diff(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let heads = [1, 2][trial % 2];
        let d = [4, 6, 8][trial % 3];
        let blocks = 1 + trial % 3;
        let mut cfg = small_config(blocks, d, heads, None);
        cfg.grid_rows = rng.random_range(1..4);
        cfg.grid_cols = rng.random_range(1..4);
        let sel = SelectorConfig {
            k: cfg.num_patches(),
            temperature: rng.random_range(0.1..2.0),
            num_heads: heads,
            position: [Placement::Last, Placement::SecondToLast][trial % 2],
            noise_enabled: false,
        };
        let with = random_model(ModelConfig { selector: Some(sel), ..cfg.clone() }, 1000 + trial as u64);
        let mut without = with.clone();
        without.config = cfg.clone();
        without.params = dtst::params::ParamSet::new();
        for (name, t) in with.params.iter().filter(|(n, _)| !n.starts_with("selector.")) {
            without.params.insert(name, t.clone());
        }
        let batch = random_batch(&cfg, 3, &mut rng);
        let (a, b) = (forward_values(&with, &batch), forward_values(&without, &batch));
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.iter().zip(y) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    worst
}

/// Relative error of the end-to-end loss gradient per parameter group
/// (B=2, d=8, two blocks), with whether the group gradient is nonzero.
pub fn end_to_end_group_errors() -> Vec<(String, f64, bool)> {
    let sel = SelectorConfig {
        k: 3,
        num_heads: 2,
        position: Placement::SecondToLast,
        ..SelectorConfig::default()
    };
    let mut cfg = small_config(2, 8, 2, Some(sel));
    cfg.grid_rows = 2;
    cfg.grid_cols = 2;
    let model = random_model(cfg.clone(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut batch = random_batch(&cfg, 2, &mut rng);
    batch.ids = vec![1, 3];
    let weights = LossWeights::default();

    let mut tape = Tape::new();
    let bindings = model.params.bind(&mut tape);
    let trace = model
        .forward(&mut tape, &bindings, &batch, SelectionMode::Sampled(&mut rng))
        .unwrap()
        .selection
        .unwrap();
    assert!(trace.noise.is_some());

    let loss_of = |m: &Model| -> (Tape, dtst::params::Bindings, dtst::Var) {
        let mut tape = Tape::new();
        let bindings = m.params.bind(&mut tape);
        let out = m.forward(&mut tape, &bindings, &batch, SelectionMode::Frozen(&trace)).unwrap();
        let views: Vec<usize> = batch.views.iter().map(|v| v.index()).collect();
        let (l, _) = objective(
            &mut tape,
            out.id_logits,
            out.view_logits,
            out.meta_feature,
            out.view_feature,
            &batch.ids,
            &views,
            &weights,
        )
        .unwrap();
        (tape, bindings, l.total)
    };
    let (tape, bindings, total) = loss_of(&model);
    let grads = tape.backward(total).unwrap();

    let mut groups: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut probe = model.clone();
    for (name, var) in bindings.iter() {
        let analytic = grads.get(var).unwrap().to_vec();
        let x = model.params.get(name).unwrap().data().to_vec();
        let numeric = numeric_gradient(
            |v| {
                probe.params.get_mut(name).unwrap().data_mut().copy_from_slice(v);
                let (t, _, l) = loss_of(&probe);
                t.value(l).data()[0]
            },
            &x,
            &(0..x.len()).collect::<Vec<_>>(),
            FD_STEP,
        );
        probe.params.get_mut(name).unwrap().data_mut().copy_from_slice(&x);
        let group = name.split('.').next().unwrap().to_string();
        match groups.iter_mut().find(|g| g.0 == group) {
            Some(g) => {
                g.1.extend(analytic);
                g.2.extend(numeric);
            }
            None => groups.push((group, analytic, numeric)),
        }
    }
    groups
        .into_iter()
        .map(|(g, a, n)| {
            let nonzero = a.iter().any(|v| v.abs() > 1e-8);
            (g, relative_error(&a, &n), nonzero)
        })
        .collect()
}

// Brute-force retrieval oracles written from the definitions.

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na.max(1e-12) * nb.max(1e-12))
}

/// Position of each gallery item = number of items that beat it pairwise.
pub fn brute_flags(query: &[f64], qid: usize, gallery: &[(Vec<f64>, usize)]) -> Vec<bool> {
    let sims: Vec<f64> = gallery.iter().map(|(g, _)| cos(query, g)).collect();
    let mut flags = vec![false; gallery.len()];
    for j in 0..gallery.len() {
        let beaten_by = (0..gallery.len())
            .filter(|&i| sims[i] > sims[j] || (sims[i] == sims[j] && i < j))
            .count();
        flags[beaten_by] = gallery[j].1 == qid;
    }
    flags
}

/// Precision at every match position, recounted from scratch each time.
pub fn brute_ap(flags: &[bool]) -> Option<f64> {
    let total = flags.iter().filter(|&&f| f).count();
    if total == 0 {
        return None;
    }
    let mut sum = 0.0;
    for r in 1..=flags.len() {
        if flags[r - 1] {
            let hits = flags[..r].iter().filter(|&&f| f).count();
            sum += hits as f64 / r as f64;
        }
    }
    Some(sum / total as f64)
}

pub fn brute_inp(flags: &[bool]) -> Option<f64> {
    let total = flags.iter().filter(|&&f| f).count();
    let last = (1..=flags.len()).filter(|&r| flags[r - 1]).max()?;
    Some(total as f64 / last as f64)
}

/// (rank1, mAP, mINP, scored queries) of one query/gallery view filter, each
/// query ranked against the filtered pool minus itself.
pub fn brute_direction(
    items: &[dtst::eval::Embedded],
    query_view: Option<dtst::View>,
    gallery_view: Option<dtst::View>,
) -> Option<(f64, f64, f64, usize)> {
    let (mut r1, mut ap, mut inp, mut n) = (0.0, 0.0, 0.0, 0usize);
    let mut per_query = Vec::new();
    for (qi, q) in items.iter().enumerate() {
        if query_view.is_some_and(|v| v != q.view) {
            continue;
        }
        let gallery: Vec<(Vec<f64>, usize)> = items
            .iter()
            .enumerate()
            .filter(|(gi, g)| *gi != qi && gallery_view.is_none_or(|v| v == g.view))
            .map(|(_, g)| (g.feature.clone(), g.id))
            .collect();
        let flags = brute_flags(&q.feature, q.id, &gallery);
        if let (Some(a), Some(i)) = (brute_ap(&flags), brute_inp(&flags)) {
            per_query.push((if flags[0] { 1.0 } else { 0.0 }, a, i));
        }
    }
    for (t, a, i) in &per_query {
        r1 += t;
        ap += a;
        inp += i;
        n += 1;
    }
    (n > 0).then(|| (r1 / n as f64, ap / n as f64, inp / n as f64, n))
}
