mod common;

use common::{gradcheck, primitive_cases, random_tensor, rng};
use decoupled_mae::tensor::{Tape, Tensor, Var};
use decoupled_mae::Error;
use proptest::prelude::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let y = tape.matmul(id, col).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 4.0]);

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);

    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { detail, .. }) => assert!(detail.contains("3 vs 4"), "{detail}"),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_broadcasts_leading_batch_axes() {
    let mut r = rng(3);
    let a = random_tensor(&mut r, &[2, 3, 4], 1.0);
    let b = random_tensor(&mut r, &[1, 4, 5], 1.0);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let y = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 5]);
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let expect: f64 = (0..4).map(|p| a.at(&[bi, i, p]) * b.at(&[0, p, j])).sum();
                assert!((tape.value(y).at(&[bi, i, j]) - expect).abs() < 1e-12);
            }
        }
    }
    let bad = tape.constant(Tensor::zeros(&[3, 4, 5]));
    assert!(tape.matmul(va, bad).is_err());
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let cases: [(&[f64], &[f64]); 3] = [
        (&[0.0, 0.0], &[0.5, 0.5]),
        (&[1f64.ln(), 3f64.ln()], &[0.25, 0.75]),
        (&[1000.0, 1000.0], &[0.5, 0.5]),
    ];
    for (input, expect) in cases {
        let x = tape.constant(t(&[2], input));
        let y = tape.softmax_last(x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
    assert!(matches!(tape.softmax_last(x), Err(Error::NonFinite(_))));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let one = |tape: &mut Tape<f64>, n| tape.constant(Tensor::full(&[n], 1.0));
    let zero = |tape: &mut Tape<f64>, n| tape.constant(Tensor::zeros(&[n]));

    let x = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
    let (g, b) = (one(&mut tape, 3), zero(&mut tape, 3));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

    let x = tape.constant(t(&[2], &[1.0, 3.0]));
    let (g, b) = (one(&mut tape, 2), zero(&mut tape, 2));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

    let g3 = one(&mut tape, 3);
    assert!(tape.layer_norm(x, g3, b, 1e-5).is_err());
    assert!(matches!(tape.layer_norm(x, g, b, 0.0), Err(Error::InvalidArgument(_))));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(t(&[3], &[0.3, -1.0, 2.0]));
    let s = tape.sum(w);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0]);

    assert!(matches!(tape.backward(sq), Err(Error::Shape { .. })));
}

#[test]
fn random_composite_graph_matches_finite_differences() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let inputs = vec![
            random_tensor(&mut r, &[3, 4], 1.0),
            random_tensor(&mut r, &[4, 2], 1.0),
            random_tensor(&mut r, &[2], 1.0),
        ];
        // matmul -> add bias -> gelu -> weighted sum
        let f = |tape: &mut Tape<f64>, v: &[Var]| {
            let y = tape.matmul(v[0], v[1])?;
            let y = tape.add(y, v[2])?;
            let y = tape.gelu(y);
            let y = tape.mul(y, y)?;
            Ok(tape.sum(y))
        };
        let err = gradcheck(&inputs, &f);
        assert!(err < 1e-4, "seed {seed}: rel error {err}");
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, shapes, f) in primitive_cases() {
        let mut r = rng(11);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut r, s, 1.0)).collect();
        let err = gradcheck(&inputs, f.as_ref());
        assert!(err < 1e-4, "{name}: rel error {err}");
    }
}

#[test]
fn fan_out_gradients_accumulate() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(t(&[2], &[1.5, -0.5]));
    let a = tape.scale(w, 2.0);
    let b = tape.scale(w, 3.0);
    let c = tape.add(a, b).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[5.0, 5.0]);
}

#[test]
fn evaluation_is_bitwise_deterministic() {
    let build = || {
        let mut r = rng(42);
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(random_tensor(&mut r, &[4, 8, 16], 1.0).cast());
        let b = tape.constant(random_tensor(&mut r, &[16, 8], 1.0).cast());
        let y = tape.matmul(a, b).unwrap();
        let y = tape.softmax_last(y).unwrap();
        tape.value(y).clone()
    };
    let (x, y) = (build(), build());
    assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..40), width in 1usize..6) {
        let rows = values.len() / width;
        prop_assume!(rows > 0);
        let data = values[..rows * width].to_vec();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![rows, width], data).unwrap());
        let y = tape.softmax_last(x).unwrap();
        for row in tape.value(y).data().chunks(width) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(values in prop::collection::vec(-100.0f64..100.0, 8..64)) {
        let width = 8;
        let rows = values.len() / width;
        let data = values[..rows * width].to_vec();
        let spread = data.chunks(width).all(|r| {
            let m = r.iter().sum::<f64>() / width as f64;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / width as f64 > 1e-2
        });
        prop_assume!(spread);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![rows, width], data).unwrap());
        let g = tape.constant(Tensor::full(&[width], 1.0));
        let b = tape.constant(Tensor::zeros(&[width]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(width) {
            let m = row.iter().sum::<f64>() / width as f64;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / width as f64;
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((v - 1.0).abs() < 1e-5);
        }
    }
}
