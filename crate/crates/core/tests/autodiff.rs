use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rematch::autodiff::{AttentionPlan, SeqBlock, SeqMask, Tape, Var};
use rematch::mask::AttentionMask;
use rematch::{Error, Tensor};

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central differences of `f` around every input coordinate, compared against
/// the tape gradient. `f` builds a scalar from the leaves it is given.
fn check_op(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let h = 1e-3;
    let eval = |vals: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            assert!(
                (a - numeric).abs() <= 1e-6 + 1e-4 * numeric.abs(),
                "input {i} coord {j}: analytic {a} numeric {numeric} (output {})", tape.value(out).item()
            );
        }
    }
}

/// Weighted sum so every output coordinate carries a distinct gradient.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.shape(v));
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[5, 7]).cast::<f32>();
    let b = rand_tensor(&mut rng, &[7, 3]).cast::<f32>();
    let mut tape = Tape::<f32>::new();
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let mut acc = 0.0f64;
            for k in 0..7 {
                acc += a.row(i)[k] as f64 * b.row(k)[j] as f64;
            }
            let got = tape.value(c).row(i)[j] as f64;
            assert!((got - acc).abs() <= 1e-6 * acc.abs().max(1.0));
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_cases() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::vector(vec![0.0; 4]));
    let s = tape.softmax(x);
    assert_eq!(tape.value(s).data(), &[0.25; 4]);

    let x = tape.leaf(Tensor::vector(vec![1000.0, 0.0]));
    let s = tape.softmax(x);
    let v = tape.value(s).data();
    assert!((v[0] - 1.0).abs() <= 1e-6 && v[1].abs() <= 1e-6);

    let raw = [0.3f32, -2.0, 4.5, 1.25, -0.75];
    let x = tape.leaf(Tensor::vector(raw.to_vec()));
    let s = tape.softmax(x);
    let z: f64 = raw.iter().map(|&r| (r as f64).exp()).sum();
    for (got, &r) in tape.value(s).data().iter().zip(&raw) {
        assert!((*got as f64 - (r as f64).exp() / z).abs() <= 1e-6);
    }
}

#[test]
fn layer_norm_cases() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::full(&[2, 4], 3.0));
    let g = tape.leaf(Tensor::full(&[4], 1.0));
    let b = tape.leaf(Tensor::zeros(&[4]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, 3.0]).unwrap());
    let g = tape.leaf(Tensor::zeros(&[3]));
    let b = tape.leaf(Tensor::vector(vec![0.1, 0.2, 0.3]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
}

#[test]
fn layer_norm_gradient_at_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[3, 6]).cast::<f32>();
    let g = rand_tensor(&mut rng, &[6]).cast::<f32>();
    let b = rand_tensor(&mut rng, &[6]).cast::<f32>();
    let w = rand_tensor(&mut rng, &[3, 6]).cast::<f32>();
    let eval = |x: &Tensor<f32>| {
        let mut tape = Tape::<f32>::new();
        let (vx, vg, vb, vw) = (tape.leaf(x.clone()), tape.leaf(g.clone()), tape.leaf(b.clone()), tape.constant(w.clone()));
        let y = tape.layer_norm(vx, vg, vb, 1e-5).unwrap();
        let p = tape.mul(y, vw).unwrap();
        let s = tape.sum(p);
        (tape, vx, s)
    };
    let (tape, vx, s) = eval(&x);
    let grads = tape.backward(s).unwrap();
    let analytic = grads.of(vx).unwrap();
    let h = 1e-2f32;
    for j in 0..x.numel() {
        let mut p = x.clone();
        p.data_mut()[j] += h;
        let mut m = x.clone();
        m.data_mut()[j] -= h;
        let (tp, _, sp) = eval(&p);
        let (tm, _, sm) = eval(&m);
        let numeric = (tp.value(sp).item() - tm.value(sm).item()) / (2.0 * h);
        let a = analytic.data()[j];
        assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2) <= 1e-3, "{a} vs {numeric}");
    }
}

#[test]
fn backward_simple_losses() {
    let mut tape = Tape::<f32>::new();
    let w = tape.leaf(Tensor::vector(vec![1.5, -2.0, 0.25]));
    let s = tape.sum(w);
    assert_eq!(tape.backward(s).unwrap().of(w).unwrap().data(), &[1.0; 3]);

    let mut tape = Tape::<f32>::new();
    let w = tape.leaf(Tensor::vector(vec![1.5, -2.0, 0.25]));
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    assert_eq!(tape.backward(half).unwrap().of(w).unwrap().data(), &[1.5, -2.0, 0.25]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f32>::new();
    let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let e = tape.exp(w);
    assert!(matches!(tape.backward(e), Err(Error::Contract(_))));
}

#[test]
fn param_gradients_cover_exactly_registered_params() {
    let mut tape = Tape::<f32>::new();
    let a = tape.param("a", Tensor::vector(vec![1.0, 2.0]));
    let _unused = tape.param("b", Tensor::vector(vec![3.0]));
    let s = tape.sum(a);
    let grads = tape.backward(s).unwrap().into_params();
    assert_eq!(grads.names().collect::<Vec<_>>(), vec!["a", "b"]);
    assert_eq!(grads.get("b").unwrap().data(), &[0.0]);
}

#[test]
fn fan_out_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::vector(vec![2.0]));
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let s = tape.sum(z);
    assert_eq!(tape.backward(s).unwrap().of(x).unwrap().data(), &[5.0]);
}

#[test]
fn gradcheck_elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    let bt = rand_tensor(&mut rng, &[5, 4]);
    let row = rand_tensor(&mut rng, &[4]);
    check_op(vec![a.clone(), b], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        project(t, c, 1)
    });
    check_op(vec![a.clone(), bt], |t, v| {
        let c = t.matmul_nt(v[0], v[1]).unwrap();
        project(t, c, 2)
    });
    check_op(vec![a.clone(), row], |t, v| {
        let c = t.add_row(v[0], v[1]).unwrap();
        project(t, c, 3)
    });
    check_op(vec![a.clone(), a.map(|x| x * 0.5 + 0.1)], |t, v| {
        let c = t.mul(v[0], v[1]).unwrap();
        let d = t.add(c, v[0]).unwrap();
        project(t, d, 4)
    });
    check_op(vec![a.clone()], |t, v| {
        let c = t.gelu(v[0]);
        project(t, c, 5)
    });
    check_op(vec![a.clone()], |t, v| {
        let c = t.exp(v[0]);
        project(t, c, 6)
    });
    check_op(vec![a.map(|x| x.abs() + 0.5)], |t, v| {
        let c = t.log(v[0]).unwrap();
        project(t, c, 7)
    });
    check_op(vec![a.map(|x| 3.0 * x)], |t, v| {
        let c = t.softmax(v[0]);
        project(t, c, 8)
    });
    check_op(vec![a.map(|x| 3.0 * x)], |t, v| {
        let c = t.log_softmax(v[0]);
        project(t, c, 9)
    });
    check_op(vec![a.clone()], |t, v| {
        let c = t.mean_rows(v[0], 3).unwrap();
        project(t, c, 10)
    });
    check_op(vec![a.clone()], |t, v| {
        let c = t.l2_normalize_rows(v[0]).unwrap();
        project(t, c, 11)
    });
    check_op(vec![a.clone()], |t, v| {
        let c = t.gather_rows(v[0], vec![2, 0, 2, 1]).unwrap();
        project(t, c, 12)
    });
    check_op(vec![a.clone(), rand_tensor(&mut rng, &[2, 4])], |t, v| {
        let c = t.concat_rows(&[v[0], v[1]]).unwrap();
        let s = t.slice_rows(c, 1, 3).unwrap();
        project(t, s, 13)
    });
    check_op(vec![a.clone()], |t, v| {
        let c = t.pick(v[0], vec![1, 3, 0]).unwrap();
        project(t, c, 14)
    });
    check_op(vec![rand_tensor(&mut rng, &[6]), rand_tensor(&mut rng, &[6])], |t, v| t.cosine(v[0], v[1]).unwrap());
    check_op(
        vec![rand_tensor(&mut rng, &[2, 5]), rand_tensor(&mut rng, &[5]), rand_tensor(&mut rng, &[5])],
        |t, v| {
            let c = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            project(t, c, 15)
        },
    );
}

#[test]
fn gradcheck_attention_with_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 4;
    let explicit = AttentionMask::from_fn(4, |i, j| j == i || (i == 3 && j == 0) || (i == 2 && j == 1)).unwrap();
    let plan = Arc::new(AttentionPlan {
        n_heads: 2,
        blocks: vec![
            SeqBlock { start: 0, len: 3, mask: SeqMask::Causal },
            SeqBlock { start: 3, len: 4, mask: SeqMask::Explicit(Arc::new(explicit)) },
        ],
    });
    let inputs: Vec<_> = (0..3).map(|_| rand_tensor(&mut rng, &[7, d])).collect();
    check_op(inputs, |t, v| {
        let o = t.attention(v[0], v[1], v[2], plan.clone()).unwrap();
        project(t, o, 16)
    });
}

#[test]
fn replay_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(rand_tensor(&mut rng, &[6, 8]).cast());
    let w = tape.leaf(rand_tensor(&mut rng, &[8, 8]).cast());
    let g = tape.leaf(Tensor::full(&[8], 1.0));
    let b = tape.leaf(Tensor::zeros(&[8]));
    let h = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let q = tape.matmul(h, w).unwrap();
    let plan = Arc::new(AttentionPlan {
        n_heads: 2,
        blocks: vec![SeqBlock { start: 0, len: 6, mask: SeqMask::Causal }],
    });
    let a = tape.attention(q, q, h, plan).unwrap();
    let a = tape.gelu(a);
    let n = tape.l2_normalize_rows(a).unwrap();
    let m = tape.mean_rows(n, 3).unwrap();
    let l = tape.log_softmax(m);
    let _ = tape.sum(l);
    let replayed = tape.replay();
    assert_eq!(replayed.len(), tape.len());
    for (i, r) in replayed.iter().enumerate() {
        let orig = tape.value(tape.var(i).unwrap());
        assert!(orig.data().iter().zip(r.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn degenerate_inputs() {
    let mut tape = Tape::<f32>::new();
    let z = tape.leaf(Tensor::zeros(&[4]));
    let v = tape.leaf(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]));
    assert!(matches!(tape.cosine(z, v), Err(Error::DegenerateVector(_))));
    let z2 = tape.leaf(Tensor::zeros(&[1, 4]));
    assert!(matches!(tape.l2_normalize_rows(z2), Err(Error::DegenerateVector(_))));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in proptest::collection::vec(-50.0f32..50.0, 1..40), cols in 1usize..8) {
        let rows = data.len() / cols;
        prop_assume!(rows > 0);
        let t = Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap();
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t);
        let s = tape.softmax(x);
        let out = tape.value(s);
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn ops_are_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[4, 6]).cast::<f32>();
        let b = rand_tensor(&mut rng, &[6, 6]).cast::<f32>();
        let run = || {
            let mut tape = Tape::<f32>::new();
            let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
            let c = tape.matmul(va, vb).unwrap();
            let d = tape.gelu(c);
            let e = tape.softmax(d);
            let s = tape.sum(e);
            let g = tape.backward(s).unwrap();
            (tape.value(e).clone(), g.of(va).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }
}
