use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};
use crate::math::Matrix;

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Random values bounded away from zero, for kinked or singular primitives.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| {
        let mag = rng.random_range(0.1..2.0);
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    })
}

/// Projects a tensor to a scalar with fixed random weights so every entry matters.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = tape.constant(rand_matrix(&mut rng, r, c, -1.0, 1.0));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn check(seed: u64, point: Vec<Matrix<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let report = grad_check(
        |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, seed)
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!(
        report.max_rel_error <= 1e-5,
        "seed {seed}: {report:?}"
    );
}

const SEEDS: u64 = 100;

#[test]
fn matmul_transpose_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_matrix(&mut rng, 3, 4, -1.0, 1.0);
        let b = rand_matrix(&mut rng, 4, 2, -1.0, 1.0);
        check(seed, vec![a, b], |t, v| {
            let p = t.matmul(v[0], v[1])?;
            t.transpose(p)
        });
    }
}

#[test]
fn broadcast_binary_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_matrix(&mut rng, 3, 4, -1.0, 1.0);
        let col = rand_away_from_zero(&mut rng, 3, 1);
        let row = rand_away_from_zero(&mut rng, 1, 4);
        let s = rand_away_from_zero(&mut rng, 1, 1);
        let same = rand_away_from_zero(&mut rng, 3, 4);
        check(seed, vec![a, col, row, s, same], |t, v| {
            let x = t.add(v[0], v[1])?;
            let x = t.mul(x, v[2])?;
            let x = t.sub(x, v[3])?;
            let x = t.div(x, v[4])?;
            let x = t.div(x, v[1])?;
            let x = t.mul(x, v[3])?;
            t.affine(x, -1.5, 0.25)
        });
    }
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_away_from_zero(&mut rng, 2, 5);
        let pos = rand_matrix(&mut rng, 2, 5, 0.2, 3.0);
        let mid = rand_matrix(&mut rng, 2, 5, 0.1, 0.9);
        check(seed, vec![a, pos, mid], |t, v| {
            let parts = [
                t.silu(v[0])?,
                t.leaky_relu(v[0], 0.2)?,
                t.sigmoid(v[0])?,
                t.ln(v[1])?,
                t.sqrt(v[1])?,
                t.clamp(v[2], 0.05, 0.95)?,
            ];
            t.concat_cols(&parts)
        });
    }
}

#[test]
fn softmax_and_reductions_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_matrix(&mut rng, 3, 4, -2.0, 2.0);
        check(seed, vec![a], |t, v| {
            let s = t.softmax_rows(v[0])?;
            let r = t.sum_rows(s)?;
            let m = t.mean(v[0])?;
            let x = t.mul(s, r)?;
            t.add(x, m)
        });
    }
}

#[test]
fn gather_concat_and_segments_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_matrix(&mut rng, 5, 3, -2.0, 2.0);
        let b = rand_matrix(&mut rng, 5, 2, -2.0, 2.0);
        let rows: Arc<[usize]> = vec![4, 0, 0, 2, 3, 1, 4].into();
        let seg: Arc<[usize]> = vec![0, 1, 1, 2, 0, 2, 1].into();
        check(seed, vec![a, b], move |t, v| {
            let cat = t.concat_cols(&[v[0], v[1]])?;
            let g = t.gather_rows(cat, rows.clone())?;
            let sm = t.segment_softmax(g, seg.clone(), 3)?;
            let x = t.mul(sm, g)?;
            let s = t.segment_sum(x, seg.clone(), 3)?;
            let mn = t.segment_mean(g, seg.clone(), 3)?;
            let mx = t.segment_max(g, seg.clone(), 3)?;
            let stacked = t.concat_rows(&[s, mn, mx])?;
            t.silu(stacked)
        });
    }
}

#[test]
fn dropout_gradient_follows_mask() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_matrix(&mut rng, 4, 4, -1.0, 1.0);
        check(seed, vec![a], move |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(seed + 1000);
            let d = t.dropout(v[0], 0.3, Some(&mut r))?;
            t.silu(d)
        });
    }
}

#[test]
fn sum_of_matvec_gradient_is_broadcast_input() {
    let w = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.1, 4.0]]).unwrap();
    let x = Matrix::col_vector(vec![2.0, -1.0, 3.0]);
    let mut tape = Tape::new();
    let wv = tape.leaf(w.clone());
    let xv = tape.constant(x.clone());
    let y = tape.matmul(wv, xv).unwrap();
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    let gw = grads.get(wv);
    for i in 0..2 {
        assert_eq!(gw.row(i), x.data());
    }
    assert!(!tape.requires_grad(xv));

    let report = grad_check(
        |t, v| {
            let xv = t.constant(x.clone());
            let y = t.matmul(v[0], xv)?;
            t.sum(y)
        },
        &[w],
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-9, "{report:?}");
}

#[test]
fn constant_loss_yields_zero_gradients() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Matrix::filled(2, 3, 1.5));
    let c = tape.constant(Matrix::scalar(4.0));
    let grads = tape.backward(c).unwrap();
    assert_eq!(grads.get(w), Matrix::zeros(2, 3));
}

#[test]
fn unused_parameter_gets_explicit_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let used = tape.leaf(Matrix::filled(1, 2, 2.0));
    let unused = tape.leaf(Matrix::filled(3, 1, 7.0));
    let loss = tape.sum(used).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(unused), Matrix::zeros(3, 1));
    assert_eq!(grads.get(used), Matrix::filled(1, 2, 1.0));
}

#[test]
fn segment_max_forward_and_argmax_routing() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Matrix::col_vector(vec![1.0, 5.0, 3.0]));
    let m = tape.segment_max(x, vec![0, 0, 0].into(), 1).unwrap();
    assert_eq!(tape.value(m).item(), 5.0);
    let grads = tape.backward(m).unwrap();
    assert_eq!(grads.get(x).data(), &[0.0, 1.0, 0.0]);

    let report = grad_check(
        |t, v| t.segment_max(v[0], vec![0, 0, 0].into(), 1),
        &[Matrix::col_vector(vec![1.0, 5.0, 3.0])],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9);
}

#[test]
fn segment_max_ties_route_to_lowest_index() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Matrix::col_vector(vec![2.0, 7.0, 7.0, 1.0]));
    let m = tape.segment_max(x, vec![0, 0, 0, 0].into(), 1).unwrap();
    let grads = tape.backward(m).unwrap();
    assert_eq!(grads.get(x).data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn dropout_eval_is_identity_and_train_scales_survivors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Matrix::filled(20, 20, 1.0));
    let y = tape.dropout::<ChaCha8Rng>(x, 0.2, None).unwrap();
    assert_eq!(x, y);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = tape.dropout(x, 0.2, Some(&mut rng)).unwrap();
    let vals = tape.value(z).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
    let dropped = vals.iter().filter(|&&v| v == 0.0).count();
    // 400 Bernoulli(0.2) draws: mean 80, sd 8.
    assert!((40..120).contains(&dropped), "dropped {dropped}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(tape.dropout(x, 0.0, Some(&mut rng)).unwrap(), x);
    assert!(tape.dropout(x, 1.0, Some(&mut rng)).is_err());
}

#[test]
fn concat_preserves_order() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Matrix::row_vector(vec![1.0, 2.0]));
    let b = tape.constant(Matrix::row_vector(vec![3.0, 4.0, 5.0]));
    let c = tape.concat_cols(&[a, b]).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
}

#[test]
fn constant_only_ops_are_not_differentiated() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Matrix::filled(2, 2, 1.0));
    let b = tape.silu(a).unwrap();
    assert!(!tape.requires_grad(b));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Matrix::zeros(2, 3));
    let b = tape.leaf(Matrix::zeros(2, 2));
    let err = tape.add(a, b).unwrap_err();
    assert_eq!(
        err,
        Error::ShapeMismatch {
            op: "add",
            left: (2, 3),
            right: (2, 2)
        }
    );
    assert!(err.to_string().contains("(2, 3)") && err.to_string().contains("(2, 2)"));
    assert!(matches!(tape.matmul(a, a), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Matrix::zeros(2, 1));
    assert_eq!(tape.backward(a).unwrap_err(), Error::NonScalarLoss((2, 1)));
}

#[test]
fn vars_from_another_tape_are_rejected() {
    let mut t1 = Tape::<f64>::new();
    let mut t2 = Tape::<f64>::new();
    let a = t1.leaf(Matrix::zeros(1, 1));
    assert_eq!(t2.silu(a).unwrap_err(), Error::ForeignVar);
}

#[test]
fn gradients_accumulate_over_fan_out() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = rand_matrix(&mut rng, 3, 3, -1.0, 1.0);
    let weights = rand_matrix(&mut rng, 3, 3, -1.0, 1.0);
    let f = |t: &mut Tape<f64>, x: Var| -> Result<Var> {
        let s = t.silu(x)?;
        let c = t.constant(weights.clone());
        let p = t.mul(s, c)?;
        t.sum(p)
    };
    let mut tape = Tape::new();
    let x = tape.leaf(w.clone());
    let once = f(&mut tape, x).unwrap();
    let g1 = tape.backward(once).unwrap().get(x);

    let mut tape = Tape::new();
    let x = tape.leaf(w);
    let a = f(&mut tape, x).unwrap();
    let b = f(&mut tape, x).unwrap();
    let twice = tape.add(a, b).unwrap();
    let g2 = tape.backward(twice).unwrap().get(x);
    for (p, q) in g1.data().iter().zip(g2.data()) {
        assert_eq!(2.0 * p, *q);
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_matrix(&mut rng, 4, 4, -1.0, 1.0);
        let mut tape = Tape::new();
        let x = tape.leaf(a);
        let mut drop = ChaCha8Rng::seed_from_u64(9);
        let d = tape.dropout(x, 0.2, Some(&mut drop)).unwrap();
        let s = tape.softmax_rows(d).unwrap();
        let p = tape.matmul(s, x).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward(l).unwrap().get(x)
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn segment_pooling_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let a = rand_matrix(&mut rng, 6, 3, -3.0, 3.0);
        let mut perm: Vec<usize> = (0..6).collect();
        for i in (1..6).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted = Matrix::from_fn(6, 3, |i, j| a[(perm[i], j)]);
        let pool = |m: Matrix<f64>| {
            let mut t = Tape::new();
            let x = t.constant(m);
            let seg: Arc<[usize]> = vec![0; 6].into();
            let mean = t.segment_mean(x, seg.clone(), 1).unwrap();
            let max = t.segment_max(x, seg, 1).unwrap();
            (t.value(mean).clone(), t.value(max).clone())
        };
        let (m1, x1) = pool(a);
        let (m2, x2) = pool(permuted);
        assert_eq!(x1, x2);
        assert!(m1.max_abs_diff(&m2).unwrap() <= 1e-12);
    }
}

#[test]
fn softmax_cross_entropy_composite_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let logits = rand_matrix(&mut rng, 5, 2, -2.0, 2.0);
    let labels = Matrix::col_vector(vec![1.0, 0.0, 1.0, 1.0, 0.0]);
    let report = grad_check(
        |t, v| {
            let p = t.softmax_rows(v[0])?;
            let pick = t.constant(Matrix::row_vector(vec![0.0, 1.0]));
            let p1 = t.mul(p, pick)?;
            let p1 = t.sum_rows(p1)?;
            let p1 = t.clamp(p1, 1e-12, 1.0 - 1e-12)?;
            let y = t.constant(labels.clone());
            let ln_p = t.ln(p1)?;
            let q = t.affine(p1, -1.0, 1.0)?;
            let ln_q = t.ln(q)?;
            let ny = t.affine(y, -1.0, 1.0)?;
            let a = t.mul(ln_p, y)?;
            let b = t.mul(ln_q, ny)?;
            let s = t.add(a, b)?;
            let m = t.mean(s)?;
            t.scale(m, -1.0)
        },
        &[logits],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn linear_function_gradcheck_is_exact() {
    let report = grad_check(
        |t, v| {
            let s = t.affine(v[0], 3.0, 1.0)?;
            t.sum(s)
        },
        &[Matrix::row_vector(vec![0.3, -1.2, 2.0])],
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-9, "{report:?}");
}

#[test]
fn gradcheck_rejects_out_of_range_step() {
    let r = grad_check(|t, v| t.sum(v[0]), &[Matrix::zeros(1, 1)], 1e-2);
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}
