use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces any tensor to a scalar through a fixed random projection, so every output coordinate
/// contributes to the checked gradient.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let prod = tape.hadamard(v, w)?;
    Ok(tape.sum_all(prod))
}

fn check<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let points: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let err = grad_check(|t, v| { let y = f(t, v)?; project(t, y, 7) }, &points, 1e-5).unwrap();
        assert!(err < 1e-4, "{name}: relative error {err} at seed {seed}");
    }
}

#[test]
fn analytic_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let g = tape.gelu(x);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(g).data(), &[0.0, 0.0]);
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

    let ones = tape.constant(Tensor::filled(&[1, 3], 1.0));
    let sm = tape.softmax_last(ones);
    for &p in tape.value(sm).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    let logits = tape.constant(Tensor::zeros(&[3, 7]));
    let ce = tape.cross_entropy(logits, &[0, 3, 6]).unwrap();
    assert!((tape.value(ce).item() - 7f64.ln()).abs() < 1e-12);
    assert!((7f64.ln() - 1.9459).abs() < 1e-4);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    assert!(matches!(tape.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(a), Err(AutodiffError::NotScalar(_))));
}

#[test]
fn gradient_of_squared_norm_is_twice_x() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[6]);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let sq = tape.hadamard(v, v).unwrap();
    let loss = tape.sum_all(sq);
    let g = tape.backward(loss).unwrap().get(v);
    for (gi, xi) in g.data().iter().zip(x.data()) {
        assert!((gi - 2.0 * xi).abs() < 1e-14);
    }
}

#[test]
fn gradient_of_trace_product_is_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 3]);
    let mut tape = Tape::new();
    let va = tape.leaf(a);
    let vb = tape.constant(b.clone());
    let ab = tape.matmul(va, vb).unwrap();
    let eye = tape.constant(Tensor::eye(3));
    let diag = tape.hadamard(ab, eye).unwrap();
    let tr = tape.sum_all(diag);
    let g = tape.backward(tr).unwrap().get(va);
    for i in 0..3 {
        for j in 0..4 {
            assert!((g.data()[i * 4 + j] - b.data()[j * 3 + i]).abs() < 1e-14);
        }
    }
}

#[test]
fn unreachable_leaves_get_zero_gradient() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::filled(&[2], 1.0));
    let unused = tape.leaf(Tensor::filled(&[3], 1.0));
    let loss = tape.sum_all(a);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(unused).data(), &[0.0, 0.0, 0.0]);
    assert!(g.get_ref(unused).is_none());
}

#[test]
fn linear_function_is_exact() {
    let w = Tensor::new(&[3], vec![0.5, -2.0, 3.0]).unwrap();
    let err = grad_check(
        |t, v| {
            let c = t.constant(w.clone());
            let p = t.hadamard(v[0], c)?;
            Ok(t.sum_all(p))
        },
        &[Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn every_primitive_passes_grad_check() {
    check("matmul", &[&[2, 3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]));
    check("bmm", &[&[2, 3, 4], &[2, 4, 2]], |t, v| t.bmm(v[0], v[1]));
    check("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]));
    check("sub", &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1]));
    check("hadamard", &[&[3, 4], &[3, 4]], |t, v| t.hadamard(v[0], v[1]));
    check("add_bias", &[&[2, 3, 4], &[3, 4]], |t, v| t.add_bias(v[0], v[1]));
    check("transpose", &[&[2, 3, 4]], |t, v| t.transpose(v[0]));
    check("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]));
    check("concat_last", &[&[2, 3], &[2, 2]], |t, v| t.concat_last(&[v[0], v[1]]));
    check("stack", &[&[2, 3], &[2, 3]], |t, v| t.stack(&[v[0], v[1]], 1));
    check("repeat", &[&[2, 3]], |t, v| t.repeat(v[0], 1, 4));
    check("slice_last", &[&[3, 5]], |t, v| t.slice_last(v[0], 1, 3));
    check("reduce_mean", &[&[2, 3, 4]], |t, v| t.reduce_mean(v[0], 1));
    check("reduce_sum", &[&[2, 3, 4]], |t, v| t.reduce_sum(v[0], 2));
    check("scale", &[&[3, 2]], |t, v| Ok(t.scale(v[0], -1.7)));
    check("add_scalar", &[&[3, 2]], |t, v| Ok(t.add_scalar(v[0], 0.3)));
    check("scale_by", &[&[3, 2], &[1]], |t, v| t.scale_by(v[0], v[1]));
    check("gelu", &[&[4, 3]], |t, v| Ok(t.gelu(v[0])));
    check("sigmoid", &[&[4, 3]], |t, v| Ok(t.sigmoid(v[0])));
    check("tanh", &[&[4, 3]], |t, v| Ok(t.tanh(v[0])));
    check("softmax_last", &[&[3, 5]], |t, v| Ok(t.softmax_last(v[0])));
    check("layernorm", &[&[4, 5], &[5], &[5]], |t, v| t.layernorm(v[0], v[1], v[2]));
    check("batchnorm_train", &[&[6, 3], &[3], &[3]], |t, v| {
        Ok(t.batchnorm(v[0], v[1], v[2], Mode::Train, &RunningStats::new(3))?.0)
    });
    check("batchnorm_eval", &[&[6, 3], &[3], &[3]], |t, v| {
        let running = RunningStats {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.5, 1.5, 2.0],
        };
        Ok(t.batchnorm(v[0], v[1], v[2], Mode::Eval, &running)?.0)
    });
    check("dropout", &[&[4, 4]], |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Ok(t.dropout(v[0], 0.3, Mode::Train, &mut rng))
    });
    check("cross_entropy", &[&[3, 4]], |t, v| t.cross_entropy(v[0], &[0, 2, 3]));
    check("frobenius_norm", &[&[3, 2, 2]], |t, v| Ok(t.frobenius_norm(v[0])));
    check("max_reduce", &[&[3, 4]], |t, v| Ok(t.max_reduce(v[0])));
    check("div_leading", &[&[3, 4]], |t, v| {
        // keep the divisor away from zero
        let n = t.frobenius_norm(v[0]);
        let d = t.add_scalar(n, 1.0);
        t.div_leading(v[0], d)
    });
    check("sum_all/mean_all", &[&[3, 4]], |t, v| {
        let s = t.sum_all(v[0]);
        let m = t.mean_all(v[0]);
        let sq = t.hadamard(s, m)?;
        Ok(sq)
    });
}

#[test]
fn softmax_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[20, 9], |_| rng.random_range(-5.0..5.0)));
    let y = tape.softmax_last(x);
    for row in tape.value(y).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn batchnorm_eval_is_affine() {
    let running = RunningStats {
        mean: vec![0.4, -1.0],
        var: vec![2.0, 0.25],
    };
    let f = |x: Vec<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(&[2, 2], x).unwrap());
        let g = tape.constant(Tensor::new(&[2], vec![1.5, -0.5]).unwrap());
        let b = tape.constant(Tensor::new(&[2], vec![0.1, 0.2]).unwrap());
        let (y, stats) = tape.batchnorm(xv, g, b, Mode::Eval, &running).unwrap();
        assert!(stats.is_none());
        tape.value(y).data().to_vec()
    };
    let x1 = vec![0.3, 1.2, -0.7, 2.0];
    let x2 = vec![1.1, -0.4, 0.9, 0.0];
    let f0 = f(vec![0.0; 4]);
    let (a, b) = (f(x1.clone()), f(x2.clone()));
    let sum: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| 2.0 * p + 3.0 * q).collect();
    let fs = f(sum);
    for i in 0..4 {
        // f(2x + 3y) - f(0) = 2(f(x) - f(0)) + 3(f(y) - f(0))
        let lhs = fs[i] - f0[i];
        let rhs = 2.0 * (a[i] - f0[i]) + 3.0 * (b[i] - f0[i]);
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn dropout_identity_cases_and_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::filled(&[100_000], 2.0));
    let same = tape.dropout(x, 0.0, Mode::Train, &mut rng);
    assert_eq!(same, x);
    let eval = tape.dropout(x, 0.5, Mode::Eval, &mut rng);
    assert_eq!(eval, x);
    let d = tape.dropout(x, 0.3, Mode::Train, &mut rng);
    let mean = tape.value(d).sum() / 100_000.0;
    assert!((mean - 2.0).abs() < 1e-2 * 2.0, "{mean}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let w = rand_tensor(&mut rng, &[3, 2]);
    let build = |which: u8| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let h = tape.matmul(xv, wv).unwrap();
        let l1 = {
            let g = tape.gelu(h);
            tape.sum_all(g)
        };
        let l2 = {
            let s = tape.softmax_last(h);
            let sq = tape.hadamard(s, s).unwrap();
            tape.mean_all(sq)
        };
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => tape.add(l1, l2).unwrap(),
        };
        tape.backward(loss).unwrap().get(wv)
    };
    let (g1, g2, g12) = (build(0), build(1), build(2));
    for i in 0..g12.len() {
        assert!((g12.data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-12);
    }
}
