use mathmoe_tensor::{grad_check, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduce a non-scalar output to a scalar with fixed random weights so every
/// output element contributes a distinct coefficient to the gradient.
fn weighted_sum(tape: &mut Tape, y: Var) -> mathmoe_tensor::Result<Var> {
    let w = random(tape.value(y).shape(), 999);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check<F>(f: F, inputs: &[Tensor], tol: f64)
where
    F: Fn(&mut Tape, &[Var]) -> mathmoe_tensor::Result<Var>,
{
    let report = grad_check(|t, v| {
        let y = f(t, v)?;
        weighted_sum(t, y)
    }, inputs)
    .unwrap();
    assert!(report.max_relative_error < tol, "{report:?}");
}

#[test]
fn matmul_gradient_of_sum() {
    let a = random(&[3, 4], 1);
    let b = random(&[4, 2], 2);
    let report = grad_check(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            t.sum(y)
        },
        &[a, b],
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{report:?}");
}

#[test]
fn linear_ops_gradients() {
    let a = random(&[3, 4], 3);
    let b = random(&[3, 4], 4);
    let c = random(&[5, 4], 5);
    check(|t, v| t.matmul_nt(v[0], v[1]), &[a.clone(), c.clone()], 1e-6);
    check(|t, v| t.transpose(v[0]), &[a.clone()], 1e-6);
    check(|t, v| t.add(v[0], v[1]), &[a.clone(), b.clone()], 1e-6);
    check(|t, v| t.sub(v[0], v[1]), &[a.clone(), b.clone()], 1e-6);
    check(|t, v| t.scale(v[0], -2.5), &[a.clone()], 1e-6);
    check(|t, v| t.add_bias(v[0], v[1]), &[a.clone(), random(&[4], 6)], 1e-6);
    check(|t, v| t.concat_rows(&[v[0], v[1]]), &[a.clone(), c.clone()], 1e-6);
    check(|t, v| t.concat_cols(&[v[0], v[1]]), &[a.clone(), b.clone()], 1e-6);
    check(|t, v| t.slice_rows(v[0], 1, 4), &[c.clone()], 1e-6);
    check(|t, v| t.slice_cols(v[0], 1, 3), &[a.clone()], 1e-6);
    check(|t, v| t.gather_rows(v[0], &[4, 0, 4, 2]), &[c.clone()], 1e-6);
    check(|t, v| t.scatter_rows(v[0], &[2, 0, 2], 4), &[a.clone()], 1e-6);
    check(|t, v| t.gather(v[0], &[(0, 1), (2, 3), (0, 1)]), &[a.clone()], 1e-6);
    check(|t, v| t.mean_rows(v[0]), &[a.clone()], 1e-6);
    check(|t, v| t.mean(v[0]), &[a.clone()], 1e-6);
    let mask = Tensor::new(vec![3, 4], (0..12).map(|i| (i % 3) as f64).collect()).unwrap();
    check(|t, v| t.mul_const(v[0], &mask), &[a.clone()], 1e-6);
    check(|t, v| t.add_const(v[0], &mask), &[a.clone()], 1e-6);
    let fill: Vec<bool> = (0..12).map(|i| i % 5 == 0).collect();
    check(|t, v| t.mask_fill(v[0], &fill, -3.0), &[a], 1e-6);
}

#[test]
fn nonlinear_ops_gradients() {
    let a = random(&[3, 4], 7);
    let b = random(&[3, 4], 8);
    check(|t, v| t.mul(v[0], v[1]), &[a.clone(), b.clone()], 1e-4);
    check(|t, v| t.gelu(v[0]), &[a.clone()], 1e-4);
    check(|t, v| t.square(v[0]), &[a.clone()], 1e-4);
    check(|t, v| t.softmax(v[0], 1), &[a.clone()], 1e-4);
    check(|t, v| t.softmax(v[0], 0), &[a.clone()], 1e-4);
    check(|t, v| t.log_softmax(v[0]), &[a.clone()], 1e-4);
    check(|t, v| t.logsumexp_rows(v[0]), &[a.clone()], 1e-4);
    check(|t, v| t.l2_normalize_rows(v[0]), &[a.clone()], 1e-4);
    check(|t, v| t.scale_rows(v[0], v[1]), &[a.clone(), random(&[3, 1], 9)], 1e-4);
    // relu away from the kink
    let shifted = a.map(|x| if x.abs() < 0.1 { x + 0.3 } else { x });
    check(|t, v| t.relu(v[0]), &[shifted], 1e-4);
}

#[test]
fn layer_norm_gradient() {
    let x = random(&[2, 5], 10);
    let g = random(&[5], 11);
    let b = random(&[5], 12);
    check(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), &[x, g, b], 1e-4);
}

#[test]
fn loss_gradients() {
    let logits = random(&[4, 5], 13);
    let report = grad_check(|t, v| t.cross_entropy(v[0], &[1, 9, 4, 0], 9), &[logits.clone()]).unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");

    let targets = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
    let mask: Vec<bool> = (0..20).map(|i| i % 4 != 3).collect();
    let report = grad_check(|t, v| t.bce_with_logits(v[0], &targets, &mask), &[logits]).unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn softmax_after_matmul_chain() {
    let a = random(&[2, 3], 14);
    let b = random(&[3, 4], 15);
    let report = grad_check(
        |t, v| {
            let z = t.matmul(v[0], v[1])?;
            let p = t.softmax(z, 1)?;
            let sq = t.square(p)?;
            t.sum(sq)
        },
        &[a, b],
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn cross_entropy_matches_log_softmax_oracle() {
    let logits = random(&[2, 3], 16);
    let targets = [2usize, 0];
    let mut oracle = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row_slice(r);
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        oracle += -(row[t].exp() / denom).ln();
    }
    oracle /= 2.0;
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let loss = tape.cross_entropy(l, &targets, usize::MAX).unwrap();
    assert!((tape.value(loss).item() - oracle).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(
        tape.cross_entropy(l, &[3], usize::MAX),
        Err(TensorError::Index { .. })
    ));
}

fn finite_matrix() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..6).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0f64..50.0, r * c)
            .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in finite_matrix()) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.softmax(v, 1).unwrap();
        for row in tape.value(y).data().chunks(tape.value(y).cols()) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|p| *p >= 0.0 && *p <= 1.0));
        }
    }

    #[test]
    fn softmax_shift_invariant(x in finite_matrix(), c in -100.0f64..100.0) {
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(x.map(|v| v + c));
        let ya = tape.softmax(a, 1).unwrap();
        let yb = tape.softmax(b, 1).unwrap();
        prop_assert!(tape.value(ya).max_abs_diff(tape.value(yb)) < 1e-12);
    }

    #[test]
    fn forward_ops_stay_finite(x in finite_matrix()) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let cols = x.cols();
        let g = tape.constant(Tensor::full(&[cols], 1.0));
        let b = tape.constant(Tensor::zeros(&[cols]));
        let outs = [
            tape.softmax(v, 1).unwrap(),
            tape.log_softmax(v).unwrap(),
            tape.layer_norm(v, g, b, 1e-5).unwrap(),
            tape.gelu(v).unwrap(),
            tape.logsumexp_rows(v).unwrap(),
            tape.l2_normalize_rows(v).unwrap(),
        ];
        for o in outs {
            prop_assert!(tape.value(o).is_finite());
        }
    }

    #[test]
    fn layer_norm_standardises(x in finite_matrix()) {
        prop_assume!(x.cols() > 1);
        let cols = x.cols();
        let spread = x.data().chunks(cols).all(|r| {
            let m = r.iter().sum::<f64>() / cols as f64;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cols as f64 > 1e-3
        });
        prop_assume!(spread);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let g = tape.constant(Tensor::full(&[cols], 1.0));
        let b = tape.constant(Tensor::zeros(&[cols]));
        let y = tape.layer_norm(v, g, b, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let m = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
