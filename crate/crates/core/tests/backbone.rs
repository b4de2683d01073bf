mod common;

use common::{
    end_to_end_group_errors, fd_error, forward_values, full_retention_max_diff, random_batch, random_model, random_tensor,
    small_config,
};
use dtst::backbone::{
    attach_special_tokens, encoder_block, patch_embed, vdt_decouple, BlockParams, Model,
    SelectionMode, TokenSequence, LN_EPS,
};
use dtst::selector::{Placement, SelectorConfig};
use dtst::{Tape, Tensor, View};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seq_of(x: dtst::Var, b: usize, m: usize) -> TokenSequence {
    TokenSequence {
        tokens: x,
        view_labels: vec![View::Ground; b],
        origin_index: vec![(0..m).collect(); b],
    }
}

#[test]
fn patch_embed_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[2, 4, 2, 3], &mut rng));
    let w = tape.constant(random_tensor(&[3, 6], &mut rng));
    let b = tape.constant(Tensor::zeros(&[6]));
    let pos_t = random_tensor(&[8, 6], &mut rng);
    let pos = tape.constant(pos_t.clone());
    let out = patch_embed(&mut tape, x, w, b, pos).unwrap();
    assert_eq!(tape.shape(out), &[2, 8, 6]);

    let zero = tape.constant(Tensor::zeros(&[1, 4, 2, 3]));
    let out = patch_embed(&mut tape, zero, w, b, pos).unwrap();
    assert_eq!(tape.value(out).data(), pos_t.data());

    let bad = tape.constant(Tensor::zeros(&[1, 3, 2, 3]));
    assert!(matches!(patch_embed(&mut tape, bad, w, b, pos), Err(dtst::Error::Dimension(_))));

    let xin = random_tensor(&[2, 2, 2, 3], &mut rng);
    let err = fd_error(
        |tp, v| {
            let x = tp.constant(xin.clone());
            patch_embed(tp, x, v[0], v[1], v[2])
        },
        &[random_tensor(&[3, 4], &mut rng), random_tensor(&[4], &mut rng), random_tensor(&[4, 4], &mut rng)],
    );
    assert!(err < 1e-5, "{err}");
}

#[test]
fn special_tokens_are_attached() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let patches = tape.constant(random_tensor(&[2, 8, 3], &mut rng));
    let meta_t = random_tensor(&[1, 3], &mut rng);
    let views_t = random_tensor(&[2, 3], &mut rng);
    let meta = tape.constant(meta_t.clone());
    let views = tape.constant(views_t.clone());
    let seq = attach_special_tokens(&mut tape, patches, &[View::Aerial, View::Ground], meta, views).unwrap();
    assert_eq!(tape.shape(seq.tokens), &[2, 10, 3]);
    assert_eq!(seq.origin_index, vec![(0..8).collect::<Vec<_>>(); 2]);
    let tok = tape.value(seq.tokens);
    for b in 0..2 {
        for j in 0..3 {
            assert_eq!(tok.at(&[b, 0, j]), meta_t.at(&[0, j]));
            assert_eq!(tok.at(&[b, 1, j]), views_t.at(&[b, j]));
        }
    }
    assert!(attach_special_tokens(&mut tape, patches, &[View::Aerial], meta, views).is_err());
}

fn block_fixture(seed: u64, d: usize) -> (Model, ChaCha8Rng) {
    let cfg = small_config(1, d, 2, None);
    (random_model(cfg, seed), ChaCha8Rng::seed_from_u64(seed + 100))
}

#[test]
fn block_is_permutation_equivariant() {
    let (model, mut rng) = block_fixture(3, 6);
    let (b, t, d) = (2, 7, 6);
    let x = random_tensor(&[b, t, d], &mut rng);
    // keep slots 0 and 1, reverse-rotate the patch slots
    let perm: Vec<usize> = [0, 1].into_iter().chain([5, 2, 6, 4, 3]).collect();
    let px = Tensor::from_fn(&[b, t, d], |i| {
        let (bi, rest) = (i / (t * d), i % (t * d));
        x.data()[bi * t * d + perm[rest / d] * d + rest % d]
    });
    let mut tape = Tape::new();
    let bindings = model.params.bind(&mut tape);
    let p = BlockParams::bind(&bindings, "block0").unwrap();
    let xv = tape.constant(x);
    let pxv = tape.constant(px);
    let y = encoder_block(&mut tape, &seq_of(xv, b, t - 2), &p, 2).unwrap().tokens;
    let py = encoder_block(&mut tape, &seq_of(pxv, b, t - 2), &p, 2).unwrap().tokens;
    assert_eq!(tape.shape(y), &[b, t, d]);
    let (y, py) = (tape.value(y), tape.value(py));
    for bi in 0..b {
        for s in 0..t {
            for j in 0..d {
                assert!((py.at(&[bi, s, j]) - y.at(&[bi, perm[s], j])).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn block_gradient_matches_finite_differences() {
    let (model, mut rng) = block_fixture(4, 4);
    let names: Vec<String> = BlockParams::NAMES.iter().map(|n| format!("block0.{n}")).collect();
    let mut inputs = vec![random_tensor(&[2, 5, 4], &mut rng)];
    inputs.extend(names.iter().map(|n| model.params.get(n).unwrap().clone()));
    let err = fd_error(
        |tp, v| {
            let p = BlockParams {
                ln1_g: v[1],
                ln1_b: v[2],
                wq: v[3],
                bq: v[4],
                wk: v[5],
                bk: v[6],
                wv: v[7],
                bv: v[8],
                wo: v[9],
                bo: v[10],
                ln2_g: v[11],
                ln2_b: v[12],
                w1: v[13],
                b1: v[14],
                w2: v[15],
                b2: v[16],
            };
            Ok(encoder_block(tp, &seq_of(v[0], 2, 3), &p, 2)?.tokens)
        },
        &inputs,
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn decouple_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let x = random_tensor(&[2, 4, 3], &mut rng);
    let xv = tape.constant(x.clone());
    let once = vdt_decouple(&mut tape, &seq_of(xv, 2, 2)).unwrap();
    let twice = vdt_decouple(&mut tape, &once).unwrap();
    let (o, t) = (tape.value(once.tokens), tape.value(twice.tokens));
    for b in 0..2 {
        for j in 0..3 {
            assert_eq!(o.at(&[b, 0, j]), x.at(&[b, 0, j]) - x.at(&[b, 1, j]));
            assert_eq!(t.at(&[b, 0, j]), o.at(&[b, 0, j]) - x.at(&[b, 1, j]));
            for s in 1..4 {
                assert_eq!(o.at(&[b, s, j]), x.at(&[b, s, j]));
            }
        }
    }

    // meta == view gives zero, zero view leaves meta alone
    let same = Tensor::from_fn(&[1, 3, 2], |i| if i < 4 { [0.5, -1.5][i % 2] } else { 9.0 });
    let sv = tape.constant(same);
    let out = vdt_decouple(&mut tape, &seq_of(sv, 1, 1)).unwrap();
    assert_eq!(&tape.value(out.tokens).data()[..2], &[0.0, 0.0]);
    let zero_view = Tensor::from_fn(&[1, 3, 2], |i| if (2..4).contains(&i) { 0.0 } else { i as f64 });
    let zv = tape.constant(zero_view.clone());
    let out = vdt_decouple(&mut tape, &seq_of(zv, 1, 1)).unwrap();
    assert_eq!(tape.value(out.tokens).data(), zero_view.data());
}

#[test]
fn output_shapes_and_kept_length() {
    let sel = SelectorConfig {
        k: 3,
        position: Placement::SecondToLast,
        ..SelectorConfig::default()
    };
    let cfg = small_config(2, 8, 2, Some(sel));
    let model = random_model(cfg.clone(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = random_batch(&cfg, 3, &mut rng);
    let mut tape = Tape::new();
    let bindings = model.params.bind(&mut tape);
    let out = model.forward(&mut tape, &bindings, &batch, SelectionMode::Deterministic).unwrap();
    assert_eq!(tape.shape(out.meta_feature), &[3, 8]);
    assert_eq!(tape.shape(out.view_feature), &[3, 8]);
    assert_eq!(tape.shape(out.id_logits), &[3, 4]);
    assert_eq!(tape.shape(out.view_logits), &[3, 2]);
    assert_eq!(out.sequence.len(), 3 + 2);
    for row in &out.sequence.origin_index {
        assert!(row.windows(2).all(|w| w[0] < w[1]));
    }
}

/// K = M without noise keeps every token in order, so the selector must be
/// invisible.
#[test]
fn full_retention_matches_selector_free_model() {
    let worst = full_retention_max_diff(20, 7);
    assert!(worst <= 1e-12, "largest deviation {worst:e}");
}

// Plain-loop reimplementation of the forward pass for one item.

type Mat = Vec<Vec<f64>>;

fn param(model: &Model, name: &str) -> Mat {
    let t = model.params.get(name).unwrap();
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn row(model: &Model, name: &str) -> Vec<f64> {
    model.params.get(name).unwrap().data().to_vec()
}

fn affine(x: &[f64], w: &Mat, b: Option<&[f64]>) -> Vec<f64> {
    let n = w[0].len();
    (0..n)
        .map(|j| x.iter().zip(w).map(|(xi, wr)| xi * wr[j]).sum::<f64>() + b.map_or(0.0, |b| b[j]))
        .collect()
}

fn norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * g[j] + b[j]).collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn straight_line(model: &Model, x: &Tensor, view: View) -> Vec<Vec<f64>> {
    let cfg = &model.config;
    let d = cfg.embed_dim;
    let m = cfg.num_patches();
    let pd = cfg.patch_dim;
    let pos = param(model, "pos");
    let mut seq: Mat = vec![row(model, "meta"), param(model, "view")[view.index()].clone()];
    for i in 0..m {
        let mut t = affine(&x.data()[i * pd..(i + 1) * pd], &param(model, "patch.w"), Some(&row(model, "patch.b")));
        for j in 0..d {
            t[j] += pos[i][j];
        }
        seq.push(t);
    }
    for blk in 0..=cfg.num_blocks {
        if let Some(sel) = &cfg.selector {
            if sel.position.block_index(cfg.num_blocks) == blk {
                let dh = d / sel.num_heads;
                let raw: Vec<f64> = seq[2..]
                    .iter()
                    .map(|t| {
                        let q = affine(t, &param(model, "selector.w_q"), None);
                        let k = affine(t, &param(model, "selector.w_k"), None);
                        let per: f64 = (0..sel.num_heads)
                            .map(|h| (h * dh..(h + 1) * dh).map(|j| q[j] * k[j]).sum::<f64>())
                            .sum();
                        per / sel.num_heads as f64 / (dh as f64).sqrt()
                    })
                    .collect();
                let s = softmax(&raw);
                let mut order: Vec<usize> = (0..s.len()).collect();
                order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
                let mut keep = order[..sel.k].to_vec();
                keep.sort();
                let kept: Mat = keep.iter().map(|&i| seq[2 + i].clone()).collect();
                seq.truncate(2);
                seq.extend(kept);
            }
        }
        if blk == cfg.num_blocks {
            break;
        }
        let p = |n: &str| format!("block{blk}.{n}");
        let heads = cfg.num_attn_heads;
        let dh = d / heads;
        let h: Mat = seq.iter().map(|t| norm(t, &row(model, &p("ln1.g")), &row(model, &p("ln1.b")))).collect();
        let proj = |w: &str, b: &str| -> Mat {
            h.iter().map(|t| affine(t, &param(model, &p(w)), Some(&row(model, &p(b))))).collect()
        };
        let (q, k, v) = (proj("attn.wq", "attn.bq"), proj("attn.wk", "attn.bk"), proj("attn.wv", "attn.bv"));
        let n = seq.len();
        let mut ctx = vec![vec![0.0; d]; n];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let a = softmax(&logits);
                for c in cols.clone() {
                    ctx[i][c] = (0..n).map(|j| a[j] * v[j][c]).sum();
                }
            }
        }
        for i in 0..n {
            let o = affine(&ctx[i], &param(model, &p("attn.wo")), Some(&row(model, &p("attn.bo"))));
            for j in 0..d {
                seq[i][j] += o[j];
            }
            let h2 = norm(&seq[i], &row(model, &p("ln2.g")), &row(model, &p("ln2.b")));
            let hid: Vec<f64> = affine(&h2, &param(model, &p("mlp.w1")), Some(&row(model, &p("mlp.b1"))))
                .into_iter()
                .map(|z| 0.5 * z * (1.0 + libm::erf(z / std::f64::consts::SQRT_2)))
                .collect();
            let out = affine(&hid, &param(model, &p("mlp.w2")), Some(&row(model, &p("mlp.b2"))));
            for j in 0..d {
                seq[i][j] += out[j];
            }
        }
        for j in 0..d {
            seq[0][j] -= seq[1][j];
        }
    }
    let meta = norm(&seq[0], &row(model, "norm.g"), &row(model, "norm.b"));
    let view_f = norm(&seq[1], &row(model, "norm.g"), &row(model, "norm.b"));
    let id = affine(&meta, &param(model, "head.id.w"), Some(&row(model, "head.id.b")));
    let vl = affine(&view_f, &param(model, "head.view.w"), Some(&row(model, "head.view.b")));
    vec![meta, view_f, id, vl]
}

#[test]
fn forward_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let variants = [
        None,
        Some(SelectorConfig {
            k: 2,
            num_heads: 2,
            position: Placement::SecondToLast,
            noise_enabled: false,
            temperature: 1.0,
        }),
        Some(SelectorConfig {
            k: 4,
            num_heads: 1,
            position: Placement::Last,
            noise_enabled: true,
            temperature: 0.5,
        }),
    ];
    for (vi, sel) in variants.into_iter().enumerate() {
        let cfg = small_config(1, 4, 2, sel);
        let model = random_model(cfg.clone(), 20 + vi as u64);
        for view in View::ALL {
            let mut batch = random_batch(&cfg, 1, &mut rng);
            batch.views = vec![view];
            let got = forward_values(&model, &batch);
            let want = straight_line(&model, &batch.x, view);
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.len(), w.len());
                for (a, b) in g.iter().zip(w) {
                    assert!((a - b).abs() < 1e-10, "variant {vi}: {a} vs {b}");
                }
            }
        }
    }
}

/// Total loss with selector indices and noise frozen, so it is a smooth
/// function of every parameter, against central differences on each group.
#[test]
fn end_to_end_gradient_per_group() {
    let groups = end_to_end_group_errors();
    let sel = groups.iter().find(|g| g.0 == "selector").unwrap();
    assert!(sel.2, "selector receives no gradient");
    for (group, err, _) in &groups {
        assert!(*err < 1e-3, "{group}: {err:e}");
    }
}
