mod common;

use common::{fd_error, op_fd_errors, random_tensor};
use dtst::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let i = tape.constant(Tensor::eye(2));
    let ab = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
    let ia = tape.matmul(i, a).unwrap();
    assert_eq!(tape.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);

    // triple loop on a random product
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, y) = (random_tensor(&[3, 4], &mut rng), random_tensor(&[4, 5], &mut rng));
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let xy = tape.matmul(xv, yv).unwrap();
    for r in 0..3 {
        for c in 0..5 {
            let want: f64 = (0..4).map(|k| x.at(&[r, k]) * y.at(&[k, c])).sum();
            assert!((tape.value(xy).at(&[r, c]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 2]));
    match tape.matmul(a, b) {
        Err(Error::Dimension(m)) => assert!(m.contains("[2x3]") && m.contains("[2x2]"), "{m}"),
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn sum_of_matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 2], &mut rng);
    let mut tape = Tape::new();
    let (av, bv) = (tape.param(&a), tape.constant(b.clone()));
    let p = tape.matmul(av, bv).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    // d sum(AB) / dA[i,k] = sum_j B[k,j]
    let want: Vec<f64> = (0..3).flat_map(|_| (0..4).map(|k| b.at(&[k, 0]) + b.at(&[k, 1]))).collect();
    let got = g.get(av).unwrap();
    let fd = dtst::gradcheck::numeric_gradient(
        |x| {
            let mut tp = Tape::new();
            let xa = tp.constant(t(&[3, 4], x));
            let xb = tp.constant(b.clone());
            let p = tp.matmul(xa, xb).unwrap();
            let s = tp.sum(p);
            tp.value(s).data()[0]
        },
        a.data(),
        &(0..12).collect::<Vec<_>>(),
        1e-5,
    );
    assert!(dtst::gradcheck::relative_error(got, &fd) < 1e-6);
    assert!(dtst::gradcheck::relative_error(got, &want) < 1e-12);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[2]));
    let s = tape.softmax(z).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
    let xv = tape.constant(t(&[5], &x));
    let s = tape.softmax(xv).unwrap();
    let denom: f64 = x.iter().map(|v| v.exp()).sum();
    for (got, xi) in tape.value(s).data().iter().zip(&x) {
        assert!((got - xi.exp() / denom).abs() < 1e-12);
    }
    assert!((tape.value(s).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let shifted: Vec<f64> = x.iter().map(|v| v + 17.25).collect();
    let sv = tape.constant(t(&[5], &shifted));
    let s2 = tape.softmax(sv).unwrap();
    assert!(tape.value(s).max_abs_diff(tape.value(s2)) < 1e-12);

    let e = tape.constant(Tensor::zeros(&[2, 0]));
    assert!(matches!(tape.softmax(e), Err(Error::Dimension(_))));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let x = tape.constant(t(&[1, 3], &[3.0, 3.0, 3.0]));
    let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = tape.constant(Tensor::full(&[8], 1.0));
    let b = tape.constant(Tensor::zeros(&[8]));
    // spread well above eps, which would otherwise shave the variance
    let x = random_tensor(&[4, 8], &mut rng);
    let x = tape.constant(Tensor::from_fn(&[4, 8], |i| 10.0 * x.data()[i]));
    let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
    for row in tape.value(y).data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
    let x = random_tensor(&[3, 6], &mut rng);
    let (gm, bt) = (random_tensor(&[6], &mut rng), random_tensor(&[6], &mut rng));
    let err = fd_error(|tp, v| tp.layer_norm(v[0], v[1], v[2], 1e-6), &[x, gm, bt]);
    assert!(err < 1e-5, "layer norm rel err {err}");
}

#[test]
fn backward_contracts() {
    let mut tape = Tape::new();
    let x = tape.param(&t(&[3], &[1.0, -2.0, 0.5]));
    let unused = tape.param(&t(&[2], &[4.0, 5.0]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    assert_eq!(g.get(unused).unwrap(), &[0.0, 0.0]);
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn composite_matmul_softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 5], &mut rng);
    let err = fd_error(
        |tp, v| {
            let p = tp.matmul(v[0], v[1])?;
            tp.softmax(p)
        },
        &[a, b],
    );
    assert!(err < 1e-5, "composite rel err {err}");
}

/// Every differentiable operation on random small shapes, 100 trials.
#[test]
fn every_op_matches_finite_differences() {
    let worst = op_fd_errors(100, 2024);
    for (name, err) in &worst {
        assert!(*err < 1e-4, "{name}: worst relative error {err:e}");
    }
    assert_eq!(worst.len(), 23);
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(&t(&[2], &[1.0, 2.0]));
    let d = tape.detach(x);
    let y = tape.mul(x, d).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = random_tensor(&[4, 6], &mut rng);
        let w = random_tensor(&[6, 3], &mut rng);
        let mut tape = Tape::new();
        let (av, wv) = (tape.param(&a), tape.param(&w));
        let p = tape.matmul(av, wv).unwrap();
        let p = tape.gelu(p);
        let s = tape.softmax(p).unwrap();
        let l = tape.log_clamped(s, 1e-12);
        let l = tape.mean(l);
        let g = tape.backward(l).unwrap();
        (tape.value(l).data().to_vec(), g.get(wv).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
