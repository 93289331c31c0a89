use proptest::prelude::*;

use super::*;
use crate::rng::{stream, uniform_tensor};

fn rand_tensor(seed: u64, rows: usize, cols: usize) -> Tensor {
    uniform_tensor(&mut stream(seed, "autodiff-test"), rows, cols, -1.5, 1.5)
}

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_identity_and_unit_selection() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::identity(2));
    let m = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t(&[&[1.0, 0.0]]));
    let b = tape.constant(t(&[&[2.0], &[3.0]]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[2.0]);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(2, 3));
    let b = tape.constant(Tensor::zeros(2, 3));
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let b = rand_tensor(1, 4, 2);
    let err = finite_diff_check(
        |tape, a| {
            let bv = tape.constant(b.clone());
            let p = tape.matmul(a, bv)?;
            Ok(tape.sum(p))
        },
        &rand_tensor(2, 3, 4),
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn sigmoid_values_and_slope() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::row(&[0.0, 40.0]));
    let y = tape.sigmoid(x);
    assert_eq!(tape.value(y).data()[0], 0.5);
    assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-12);
    let first = tape.slice_cols(y, 0, 1).unwrap();
    let g = tape.backward(first).unwrap().get(x);
    assert_eq!(g.data()[0], 0.25);
}

#[test]
fn elementwise_rejects_incompatible_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(2, 3));
    let b = tape.constant(Tensor::zeros(3, 2));
    assert!(tape.add(a, b).is_err());
    let col = tape.constant(Tensor::zeros(2, 1));
    assert!(tape.mul(a, col).is_err(), "column broadcast is not supported");
}

#[test]
fn broadcast_gradients_reduce_onto_small_operand() {
    let m = rand_tensor(3, 3, 4);
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        let row_err = finite_diff_check(
            |tape, r| {
                let mv = tape.constant(m.clone());
                let r = tape.add_scalar(r, 3.0);
                let y = tape.binary(op, mv, r)?;
                let y = tape.tanh(y);
                Ok(tape.sum(y))
            },
            &rand_tensor(4, 1, 4),
            1e-4,
        )
        .unwrap();
        assert!(row_err < 1e-5, "{op:?} row broadcast error {row_err}");
        let scalar_err = finite_diff_check(
            |tape, s| {
                let mv = tape.constant(m.clone());
                let s = tape.add_scalar(s, 3.0);
                let y = tape.binary(op, s, mv)?;
                let y = tape.tanh(y);
                Ok(tape.sum(y))
            },
            &rand_tensor(5, 1, 1),
            1e-4,
        )
        .unwrap();
        assert!(scalar_err < 1e-5, "{op:?} scalar broadcast error {scalar_err}");
    }
}

#[test]
fn softmax_uniform_row_and_normalization() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(1, 3));
    let y = tape.softmax_rows(x);
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let r = tape.constant(rand_tensor(6, 5, 7).map(|v| v * 10.0));
    let y = tape.softmax_rows(r);
    let yv = tape.value(y);
    for row in 0..5 {
        let s: f64 = yv.row_slice(row).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(yv.row_slice(row).iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let w = rand_tensor(7, 3, 4);
    let err = finite_diff_check(
        |tape, x| {
            let y = tape.softmax_rows(x);
            let wv = tape.constant(w.clone());
            let y = tape.mul(y, wv)?;
            Ok(tape.sum(y))
        },
        &rand_tensor(8, 3, 4),
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn layer_norm_constant_row_and_centering() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::filled(1, 4, 1.0));
    let b = tape.constant(Tensor::zeros(1, 4));
    let x = tape.constant(Tensor::filled(1, 4, 2.5));
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(rand_tensor(9, 3, 4));
    let y = tape.layer_norm(x, g, b).unwrap();
    for row in 0..3 {
        let mean: f64 = tape.value(y).row_slice(row).iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6);
    }
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let gain = rand_tensor(10, 1, 5).map(|v| v + 1.0);
    let bias = rand_tensor(11, 1, 5);
    let w = rand_tensor(12, 4, 5);
    let x0 = rand_tensor(13, 4, 5);
    let loss = |tape: &mut Tape, x: Var, g: Var, b: Var| -> Result<Var> {
        let y = tape.layer_norm(x, g, b)?;
        let wv = tape.constant(w.clone());
        let y = tape.mul(y, wv)?;
        let y = tape.tanh(y);
        Ok(tape.sum(y))
    };
    let ex = finite_diff_check(
        |tape, x| {
            let g = tape.constant(gain.clone());
            let b = tape.constant(bias.clone());
            loss(tape, x, g, b)
        },
        &x0,
        1e-4,
    )
    .unwrap();
    let eg = finite_diff_check(
        |tape, g| {
            let x = tape.constant(x0.clone());
            let b = tape.constant(bias.clone());
            loss(tape, x, g, b)
        },
        &gain,
        1e-4,
    )
    .unwrap();
    assert!(ex < 1e-4 && eg < 1e-4, "x {ex}, gain {eg}");
}

#[test]
fn layer_norm_rejects_wrong_affine_width() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(2, 4));
    let g = tape.constant(Tensor::zeros(1, 3));
    assert!(tape.layer_norm(x, g, g).is_err());
}

#[test]
fn detach_keeps_values_and_blocks_gradient() {
    let x0 = rand_tensor(14, 2, 3);
    let y0 = rand_tensor(15, 2, 3);
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let y = tape.constant(y0);
    let d = tape.detach(x);
    assert_eq!(tape.value(d), &x0);
    let p = tape.mul(d, y).unwrap();
    let loss = tape.sum(p);
    let g = tape.backward(loss).unwrap().get(x);
    assert!(g.data().iter().all(|&v| v == 0.0));

    // Only the live factor of x * detach(x) contributes.
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let d = tape.detach(x);
    let p = tape.mul(x, d).unwrap();
    let loss = tape.sum(p);
    let g = tape.backward(loss).unwrap().get(x);
    assert_eq!(g, x0);
}

#[test]
fn backward_simple_cases() {
    let w0 = rand_tensor(16, 2, 2);
    let mut tape = Tape::new();
    let w = tape.param(w0.clone());
    let s = tape.sum(w);
    assert_eq!(tape.backward(s).unwrap().get(w), Tensor::filled(2, 2, 1.0));

    let mut tape = Tape::new();
    let w = tape.param(w0);
    let l = tape.mse(w, w).unwrap();
    assert!(tape.backward(l).unwrap().get(w).data().iter().all(|&v| v == 0.0));

    assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::filled(1, 3, 2.0));
    let unused = tape.param(Tensor::filled(2, 2, 1.0));
    let s = tape.sum(w);
    let grads = tape.backward(s).unwrap();
    assert!(!grads.has_path(unused));
    assert_eq!(grads.get(unused), Tensor::zeros(2, 2));
}

#[test]
fn leaf_used_twice_accumulates_both_paths() {
    // loss = sum(x*x) + sum(3x)  =>  dloss/dx = 2x + 3
    let x0 = Tensor::row(&[1.0, -2.0, 0.5]);
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let lin = tape.scale(x, 3.0);
    let a = tape.sum(sq);
    let b = tape.sum(lin);
    let loss = tape.add(a, b).unwrap();
    let g = tape.backward(loss).unwrap().get(x);
    assert_eq!(g, x0.map(|v| 2.0 * v + 3.0));
}

#[test]
fn backward_is_bitwise_deterministic() {
    let x0 = rand_tensor(17, 3, 4);
    let w0 = rand_tensor(18, 4, 4);
    let run = || {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let w = tape.param(w0.clone());
        let h = tape.matmul(x, w).unwrap();
        let h = tape.softmax_rows(h);
        let h = tape.matmul(h, w).unwrap();
        let loss = tape.mean(h);
        let g = tape.backward(loss).unwrap();
        (g.get(x), g.get(w))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn finite_diff_check_reference_cases() {
    let x = Tensor::row(&[1.0, 2.0]);
    let err = finite_diff_check(
        |tape, x| {
            let sq = tape.mul(x, x)?;
            Ok(tape.sum(sq))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-6);

    let err = finite_diff_check(|tape, _| Ok(tape.constant(Tensor::scalar(4.0))), &x, 1e-4).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn structural_ops_route_gradients() {
    let x0 = rand_tensor(19, 4, 6);
    let w = rand_tensor(20, 9, 3);
    let err = finite_diff_check(
        |tape, x| {
            let top = tape.slice_rows(x, 0, 2)?;
            let right = tape.slice_cols(x, 3, 3)?;
            let picked = tape.select_rows(right, &[3, 1, 3])?;
            let stacked = tape.concat_rows(&[top, x])?;
            let flipped = tape.transpose(stacked);
            let head = tape.slice_rows(flipped, 0, 3)?;
            let wide = tape.concat_cols(&[head, picked])?;
            let wv = tape.constant(w.clone());
            let p = tape.matmul(wide, wv)?;
            let p = tape.tanh(p);
            Ok(tape.mean(p))
        },
        &x0,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn kron_gradient_matches_finite_differences() {
    let b = rand_tensor(21, 2, 3);
    let w = rand_tensor(22, 4, 9);
    let err = finite_diff_check(
        |tape, a| {
            let bv = tape.constant(b.clone());
            let k = tape.kron(a, bv);
            let wv = tape.constant(w.clone());
            let k = tape.mul(k, wv)?;
            let k = tape.sigmoid(k);
            Ok(tape.sum(k))
        },
        &rand_tensor(23, 2, 3),
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn cross_entropy_and_mse_gradients() {
    let targets = [2usize, 0, 1];
    let err = finite_diff_check(
        |tape, x| tape.cross_entropy(x, &targets),
        &rand_tensor(24, 3, 4),
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-5);
    let other = rand_tensor(25, 3, 4);
    let err = finite_diff_check(
        |tape, x| {
            let o = tape.constant(other.clone());
            tape.mse(o, x)
        },
        &rand_tensor(26, 3, 4),
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-5);
}

#[test]
fn mse_shape_mismatch_is_contract_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(1, 2));
    let b = tape.constant(Tensor::zeros(2, 1));
    assert!(matches!(tape.mse(a, b), Err(Error::Contract(_))));
}

fn attention_loss(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    prompt: Option<(Var, Var)>,
    lay: AttentionLayout,
    w: &Tensor,
) -> Result<Var> {
    let out = tape.attention(q, k, v, prompt, lay)?;
    let wv = tape.constant(w.clone());
    let out = tape.mul(out, wv)?;
    Ok(tape.sum(out))
}

#[test]
fn attention_gradients_match_finite_differences() {
    let lay = AttentionLayout {
        batch: 2,
        seq: 3,
        heads: 2,
        prompt_len: 2,
        width: 4,
    };
    let tensors: Vec<Tensor> = (0..5)
        .map(|i| {
            let rows = if i < 3 { 6 } else { 4 };
            rand_tensor(30 + i, rows, 4)
        })
        .collect();
    let w = rand_tensor(40, 6, 4);
    for target in 0..5 {
        let err = finite_diff_check(
            |tape, x| {
                let mut vars = Vec::new();
                for (i, t) in tensors.iter().enumerate() {
                    vars.push(if i == target { x } else { tape.constant(t.clone()) });
                }
                attention_loss(tape, vars[0], vars[1], vars[2], Some((vars[3], vars[4])), lay, &w)
            },
            &tensors[target],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "input {target}: relative error {err}");
    }
}

#[test]
fn attention_rows_sum_to_one_and_zero_prompt_is_inert() {
    let lay = AttentionLayout {
        batch: 2,
        seq: 4,
        heads: 2,
        prompt_len: 3,
        width: 6,
    };
    let q = rand_tensor(41, 8, 6);
    let k = rand_tensor(42, 8, 6);
    let probs = attention_probs(&lay, &q, &k);
    for row in probs.chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q), tape.constant(k));
    let v = tape.constant(rand_tensor(43, 8, 6));
    let zero = tape.constant(Tensor::zeros(6, 6));
    let pk = tape.constant(rand_tensor(44, 6, 6));
    let with_zero = tape.attention(qv, kv, v, Some((pk, zero)), lay).unwrap();
    let without = tape.attention(qv, kv, v, None, lay).unwrap();
    assert_eq!(tape.value(with_zero).data(), tape.value(without).data());
}

proptest! {
    #[test]
    fn unary_ops_match_finite_differences(
        values in proptest::collection::vec(-3.0f64..3.0, 6),
        which in 0usize..3,
    ) {
        // relu is not differentiable at 0; keep samples away from the kink.
        prop_assume!(which != 1 || values.iter().all(|v| v.abs() > 1e-2));
        let op = [UnaryOp::Sigmoid, UnaryOp::Relu, UnaryOp::Tanh][which];
        let x = Tensor::new(2, 3, values).unwrap();
        let err = finite_diff_check(
            |tape, x| {
                let y = tape.unary(op, x);
                let y = tape.mul(y, y)?;
                Ok(tape.sum(y))
            },
            &x,
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-5, "{:?}: {}", op, err);
    }
}
