use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries bounded away from zero, so ReLU kinks stay out of the eps window.
fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Projects a node onto a fixed random direction so gradients are non-trivial.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(v));
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 2]));
    let y = tape.softmax(x, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn tanh_of_zero_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([2, 3]));
    let y = tape.tanh(x);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([3, 4]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 4]);

    let bad = tape.constant(Tensor::zeros([2, 3]));
    let err = tape.matmul(a, bad).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_matches_naive_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 5]);
    let b = random(&mut rng, &[5, 2]);
    let mut tape = Tape::<f64>::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let expect: f64 = (0..5).map(|k| a.at(&[i, k]) * b.at(&[k, j])).sum();
            assert!((tape.value(c).at(&[i, j]) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn grad_of_sum_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full([2, 3, 2], 0.7), true);
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn grad_of_sum_of_squares_is_twice_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = random(&mut rng, &[4, 3]);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(x0.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    for (gv, xv) in g.get(x).unwrap().iter().zip(x0.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros([2]), true);
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarRoot(_))));
}

#[test]
fn fan_out_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap(), true);
    let y = tape.add(x, x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn three_layer_composition_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 4;
    let params = vec![
        random(&mut rng, &[2, d]),
        random(&mut rng, &[d, d]),
        random(&mut rng, &[d, d]),
        random(&mut rng, &[d, 3]),
        random(&mut rng, &[d]),
    ];
    let err = grad_check(
        |t, p| {
            let h1 = t.matmul(p[0], p[1])?;
            let h1 = t.add(h1, p[4])?;
            let h1 = t.tanh(h1);
            let h2 = t.matmul(h1, p[2])?;
            let h2 = t.sigmoid(h2);
            let h3 = t.matmul(h2, p[3])?;
            let h3 = t.softmax(h3, 1)?;
            project(t, h3, 5)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn grad_check_tanh_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = random(&mut rng, &[3, 3]);
    let x = random(&mut rng, &[3, 1]);
    let err = grad_check(
        |t, p| {
            let vx = t.matmul(p[0], p[1])?;
            let z = t.tanh(vx);
            Ok(t.sum(z))
        },
        &[v, x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_of_constant_function_is_zero() {
    let err = grad_check(
        |t, _p| Ok(t.constant(Tensor::scalar(3.0))),
        &[Tensor::<f64>::full([2, 2], 1.0)],
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

/// Squares its input on the forward pass but reports `x` instead of `2x`
/// as the derivative.
struct WrongSquare;

impl CustomBackward<f64> for WrongSquare {
    fn backward(&self, inputs: &[&Tensor<f64>], _output: &Tensor<f64>, g: &[f64]) -> Vec<Vec<f64>> {
        vec![inputs[0].data().iter().zip(g).map(|(x, g)| x * g).collect()]
    }
}

#[test]
fn grad_check_detects_a_wrong_backward_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_away_from_zero(&mut rng, &[3, 2]);
    let err = grad_check(
        |t, p| {
            let xv = t.value(p[0]).clone();
            let sq = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * v).collect())?;
            let y = t.custom(&[p[0]], sq, Box::new(WrongSquare));
            Ok(t.sum(y))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err > 1e-2, "{err}");
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[5, 8]);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full([8], 1.0));
    let b = tape.constant(Tensor::zeros([8]));
    let y = tape.layer_norm(xv, g, b, 1e-12).unwrap();
    let y = tape.value(y);
    for r in 0..5 {
        let row = y.row(r);
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "mean {mean} var {var}");
    }
}

#[test]
fn masked_softmax_ignores_negative_infinity() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64([1, 3], &[0.3, f64::NEG_INFINITY, 0.3]).unwrap(), true);
    let y = tape.softmax(x, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.0, 0.5]);
    let s = project(&mut tape, y, 1).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().iter().all(|v| v.is_finite()));
    assert_eq!(g.get(x).unwrap()[1], 0.0);
}

#[test]
fn fused_masked_softmax_matches_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[4, 3, 5]);
    // two groups of two batch entries; the second hides keys 1 and 4
    let keys = [true, true, true, true, true, true, false, true, true, false];
    let mut bias = Vec::new();
    for bi in 0..4 {
        for _ in 0..3 {
            bias.extend(keys[(bi / 2) * 5..(bi / 2 + 1) * 5].iter().map(|&k| if k { 0.0 } else { f64::NEG_INFINITY }));
        }
    }
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(x.clone(), true);
    let fused = tape.masked_softmax(a, 0.7, &keys).unwrap();
    let scaled = tape.mul_scalar(a, 0.7);
    let m = tape.constant(Tensor::new([4, 3, 5], bias).unwrap());
    let shifted = tape.add(scaled, m).unwrap();
    let plain = tape.softmax(shifted, 2).unwrap();
    for (p, q) in tape.value(fused).data().iter().zip(tape.value(plain).data()) {
        assert!((p - q).abs() < 1e-12);
    }

    let err = grad_check(
        |t, v| {
            let y = t.masked_softmax(v[0], 0.7, &keys)?;
            project(t, y, 3)
        },
        &[x],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::from_f64([1, 1, 2], &[0.1, 0.2]).unwrap(), false);
    let y = tape.masked_softmax(a, 1.0, &[false, false]).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    assert!(tape.masked_softmax(a, 1.0, &[true; 3]).is_err());
}

#[test]
fn permute_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 3, 4, 2]);
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(x.clone());
    let p = tape.permute(v, &[0, 2, 1, 3]).unwrap();
    assert_eq!(tape.shape(p), &[2, 4, 3, 2]);
    assert_eq!(tape.value(p).at(&[1, 3, 2, 1]), x.at(&[1, 2, 3, 1]));
    let back = tape.permute(p, &[0, 2, 1, 3]).unwrap();
    assert_eq!(tape.value(back), &x);
}

#[test]
fn embedding_rejects_out_of_range_ids() {
    let mut tape = Tape::<f64>::new();
    let t = tape.constant(Tensor::zeros([4, 2]));
    assert!(matches!(tape.embedding(t, &[1, 4]), Err(TensorError::IndexOutOfRange { index: 4, len: 4 })));
}

/// Every primitive's backward rule, on shapes drawn from `dims`.
fn primitive_errors(seed: u64, r: usize, c: usize) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let mut out = Vec::new();
    let mut check = |name: &'static str, params: Vec<Tensor<f64>>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>| {
        let err = grad_check(|t, p| f(t, p), &params, eps).unwrap();
        out.push((name, err));
    };

    let k = 1 + (seed as usize % 5);
    check("matmul", vec![random(&mut rng, &[r, k]), random(&mut rng, &[k, c])], &|t, p| {
        let y = t.matmul(p[0], p[1])?;
        project(t, y, 1)
    });
    check("bmm", vec![random(&mut rng, &[2, r, k]), random(&mut rng, &[2, k, c])], &|t, p| {
        let y = t.matmul(p[0], p[1])?;
        project(t, y, 2)
    });
    check("bmm_shared_rhs", vec![random(&mut rng, &[2, r, k]), random(&mut rng, &[k, c])], &|t, p| {
        let y = t.matmul(p[0], p[1])?;
        project(t, y, 3)
    });
    check("add_broadcast", vec![random(&mut rng, &[r, c]), random(&mut rng, &[c])], &|t, p| {
        let y = t.add(p[0], p[1])?;
        let y = t.tanh(y);
        project(t, y, 4)
    });
    check("sub_mul", vec![random(&mut rng, &[r, c]), random(&mut rng, &[r, c])], &|t, p| {
        let d = t.sub(p[0], p[1])?;
        let y = t.mul(d, p[0])?;
        project(t, y, 5)
    });
    check("mul_broadcast", vec![random(&mut rng, &[2, r, c]), random(&mut rng, &[r, c])], &|t, p| {
        let y = t.mul(p[0], p[1])?;
        project(t, y, 15)
    });
    check("mul_scalar", vec![random(&mut rng, &[r, c])], &|t, p| {
        let y = t.mul_scalar(p[0], -1.7);
        project(t, y, 6)
    });
    check("tanh", vec![random(&mut rng, &[r, c])], &|t, p| {
        let y = t.tanh(p[0]);
        project(t, y, 7)
    });
    check("relu", vec![random_away_from_zero(&mut rng, &[r, c])], &|t, p| {
        let y = t.relu(p[0]);
        project(t, y, 8)
    });
    check("sigmoid", vec![random(&mut rng, &[r, c])], &|t, p| {
        let y = t.sigmoid(p[0]);
        project(t, y, 9)
    });
    for axis in 0..2 {
        check("softmax", vec![random(&mut rng, &[r, c])], &move |t, p| {
            let y = t.softmax(p[0], axis)?;
            project(t, y, 10)
        });
    }
    check(
        "layer_norm",
        vec![random(&mut rng, &[r, c + 2]), random(&mut rng, &[c + 2]), random(&mut rng, &[c + 2])],
        &|t, p| {
            let y = t.layer_norm(p[0], p[1], p[2], 1e-5)?;
            project(t, y, 11)
        },
    );
    check("embedding", vec![random(&mut rng, &[5, c])], &move |t, p| {
        let ids: Vec<usize> = (0..r).map(|i| (i * 3) % 5).collect();
        let y = t.embedding(p[0], &ids)?;
        project(t, y, 12)
    });
    check("concat_slice", vec![random(&mut rng, &[r, c]), random(&mut rng, &[r, c])], &move |t, p| {
        let y = t.concat(&[p[0], p[1], p[0]], 1)?;
        let y = t.slice(y, 1, c / 2, c + 1)?;
        project(t, y, 13)
    });
    check("transpose_reshape", vec![random(&mut rng, &[r, c])], &move |t, p| {
        let y = t.transpose(p[0])?;
        let y = t.reshape(y, &[r * c])?;
        project(t, y, 14)
    });
    check("permute", vec![random(&mut rng, &[2, r, c])], &|t, p| {
        let y = t.permute(p[0], &[2, 0, 1])?;
        project(t, y, 15)
    });
    for axis in 0..2 {
        check("reduce_sum_mean", vec![random(&mut rng, &[r, c])], &move |t, p| {
            let s = t.reduce_sum(p[0], axis)?;
            let m = t.reduce_mean(p[0], axis)?;
            let y = t.mul(s, m)?;
            project(t, y, 16)
        });
    }
    // well-separated entries keep the maximum stable under perturbation
    let spread: Vec<f64> = {
        let mut v: Vec<f64> = (0..r * c).map(|i| i as f64 * 0.1).collect();
        for i in (1..v.len()).rev() {
            v.swap(i, rng.random_range(0..=i));
        }
        v
    };
    check("reduce_max", vec![Tensor::new([r, c], spread).unwrap()], &|t, p| {
        let y = t.reduce_max(p[0], 0)?;
        project(t, y, 17)
    });
    check("mean_all", vec![random(&mut rng, &[r, c])], &|t, p| {
        let y = t.tanh(p[0]);
        Ok(t.mean(y))
    });
    let targets = Tensor::new([r, c], (0..r * c).map(|i| (i % 2) as f64).collect()).unwrap();
    check("bce_with_logits", vec![random(&mut rng, &[r, c])], &move |t, p| t.bce_with_logits(p[0], &targets));
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn primitives_pass_grad_check(seed in 0u64..10_000, r in 1usize..=8, c in 1usize..=8) {
        for (name, err) in primitive_errors(seed, r, c) {
            prop_assert!(err < 1e-4, "{} relative error {}", name, err);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..10_000, r in 1usize..=8, c in 1usize..=8, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let x = random(&mut rng, &[r, c]);
        let x = Tensor::new([r, c], x.data().iter().map(|v| v * scale).collect()).unwrap();
        let v = tape.constant(x);
        let y = tape.softmax(v, 1).unwrap();
        let y = tape.value(y);
        for i in 0..r {
            let row = y.row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fan_out_doubles_contribution(seed in 0u64..10_000, n in 1usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(&mut rng, &[n]);
        let single = {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(x0.clone(), true);
            let y = tape.tanh(x);
            let s = project(&mut tape, y, seed).unwrap();
            tape.backward(s).unwrap().get(x).unwrap().to_vec()
        };
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone(), true);
        let y = tape.tanh(x);
        let y2 = tape.add(y, y).unwrap();
        let s = project(&mut tape, y2, seed).unwrap();
        let doubled = tape.backward(s).unwrap().get(x).unwrap().to_vec();
        for (a, b) in single.iter().zip(&doubled) {
            prop_assert!((2.0 * a - b).abs() < 1e-12);
        }
    }
}
