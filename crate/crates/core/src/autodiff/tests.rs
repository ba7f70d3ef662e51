use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;
use crate::tensor::Tensor;

type T = Tensor<f64>;
use gradcheck::Build;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn grad_error(build: Build, inputs: &[T]) -> f64 {
    gradcheck::max_relative_error(build, inputs, H, 1e-3).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> T {
    T::randn(shape, 1.0, rng)
}

/// Random tensor with every entry at least `gap` away from zero.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> T {
    let t = rand_t(rng, shape);
    t.map(|x| if x.abs() < gap { x.signum() * gap + x } else { x })
}

/// Contracts `x` against a fixed random tensor so every element matters.
fn readout(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = T::randn(g.value(x).shape(), 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn check_many(name: &str, trials: usize, mut make: impl FnMut(&mut ChaCha8Rng) -> Vec<T>, build: Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ name.len() as u64);
    for trial in 0..trials {
        let inputs = make(&mut rng);
        let err = grad_error(build, &inputs);
        assert!(err < TOL, "{name}: trial {trial} relative error {err:e}");
    }
}

#[test]
fn grad_matmul() {
    check_many(
        "matmul",
        20,
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])],
        &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            readout(g, y, 1)
        },
    );
}

#[test]
fn grad_binary_broadcasts() {
    for (name, shape_b) in [("same", vec![2, 3]), ("row", vec![3]), ("scalar", vec![1])] {
        check_many(
            name,
            20,
            |r| vec![rand_t(r, &[2, 3]), rand_t(r, &shape_b)],
            &|g, v| {
                let a = g.add(v[0], v[1])?;
                let s = g.sub(a, v[1])?;
                let s = g.sub(s, v[1])?;
                let m = g.mul(s, v[1])?;
                readout(g, m, 2)
            },
        );
    }
}

#[test]
fn grad_concat_slice_transpose() {
    check_many(
        "concat",
        20,
        |r| vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 2]), rand_t(r, &[1, 5])],
        &|g, v| {
            let c1 = g.concat(&[v[0], v[1]], 1)?;
            let c0 = g.concat(&[c1, v[2]], 0)?;
            let s = g.slice(c0, 1, 1, 3)?;
            let s = g.slice(s, 0, 1, 2)?;
            let t = g.transpose(s)?;
            readout(g, t, 3)
        },
    );
}

#[test]
fn grad_reductions_and_scale() {
    check_many(
        "mean",
        20,
        |r| vec![rand_t(r, &[3, 2])],
        &|g, v| {
            let sq = g.mul(v[0], v[0])?;
            let m = g.mean(sq)?;
            let s = g.sum(v[0]);
            let s = g.scale(s, 0.3);
            let p = g.mul(m, s)?;
            Ok(p)
        },
    );
}

#[test]
fn grad_layer_norm() {
    check_many(
        "layernorm",
        20,
        |r| vec![rand_t(r, &[3, 5]), rand_t(r, &[5]), rand_t(r, &[5])],
        &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            readout(g, y, 4)
        },
    );
}

#[test]
fn grad_pointwise_nonlinearities() {
    check_many(
        "gelu",
        20,
        |r| vec![rand_t(r, &[2, 4])],
        &|g, v| {
            let y = g.gelu(v[0])?;
            readout(g, y, 5)
        },
    );
    check_many(
        "relu_abs",
        20,
        |r| vec![rand_away_from_zero(r, &[2, 4], 1e-2)],
        &|g, v| {
            let y = g.relu(v[0])?;
            let a = g.abs(v[0]);
            let s = g.add(y, a)?;
            readout(g, s, 6)
        },
    );
    check_many(
        "exp_log",
        20,
        |r| vec![rand_t(r, &[6])],
        &|g, v| {
            let e = g.exp(v[0])?;
            let one = g.constant(T::scalar(1.0));
            let e1 = g.add(e, one)?;
            let l = g.log(e1)?;
            readout(g, l, 7)
        },
    );
}

#[test]
fn grad_softmax_both_axes() {
    for axis in [0, 1] {
        check_many(
            "softmax",
            20,
            |r| vec![rand_t(r, &[3, 4])],
            &|g, v| {
                let y = g.softmax(v[0], axis)?;
                readout(g, y, 8)
            },
        );
    }
}

#[test]
fn grad_normalize_and_cosine() {
    check_many(
        "l2_normalize",
        20,
        |r| vec![rand_t(r, &[3, 4])],
        &|g, v| {
            let y = g.l2_normalize(v[0])?;
            readout(g, y, 9)
        },
    );
    check_many(
        "cosine",
        20,
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])],
        &|g, v| {
            let c = g.cosine_similarity(v[0], v[1])?;
            readout(g, c, 10)
        },
    );
}

#[test]
fn grad_cross_entropy() {
    check_many(
        "cross_entropy",
        20,
        |r| vec![rand_t(r, &[4, 3])],
        &|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]),
    );
}

#[test]
fn grad_shared_subexpressions() {
    check_many(
        "shared",
        20,
        |r| vec![rand_t(r, &[5])],
        &|g, v| {
            let e = g.exp(v[0])?;
            let a = g.mul(e, v[0])?;
            let b = g.mul(v[0], v[0])?;
            let s = g.add(a, b)?;
            let s = g.add(s, e)?;
            readout(g, s, 11)
        },
    );
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.param(T::vector(vec![1.0, -2.0, 3.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().to_vec(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::<f64>::new();
    let x = g.param(T::vector(vec![1.0, 2.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().to_vec(), vec![2.0, 2.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_visits_each_node_once() {
    let mut g = Graph::<f64>::new();
    let x = g.param(T::vector(vec![0.5, 1.5]));
    let e = g.exp(x).unwrap();
    let m = g.mul(e, e).unwrap();
    let m = g.mul(m, x).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.last_backward_visits(), g.len());
}

#[test]
fn cosine_gradient_orthogonal_at_equal_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = rand_t(&mut rng, &[6]);
        let mut g = Graph::<f64>::new();
        let a = g.param(x.clone());
        let b = g.constant(x.clone());
        let c = g.cosine_similarity(a, b).unwrap();
        g.backward(c).unwrap();
        let grad = g.grad(a).unwrap();
        let proj: f64 = grad.data().iter().zip(x.data()).map(|(p, q)| p * q).sum::<f64>() / x.l2_norm();
        assert!(proj.abs() <= 1e-10, "projection {proj:e}");
    }
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.param(T::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(crate::Error::NonScalarLoss(_))));
}

#[test]
fn op_values() {
    let mut g = Graph::<f64>::eval();
    let a = g.constant(T::vector(vec![1.0, 0.0]));
    let c = g.cosine_similarity(a, a).unwrap();
    assert_eq!(g.value(c).item(), 1.0);

    for c in [-3.0, 0.0, 7.5] {
        let x = g.constant(T::vector(vec![c; 3]));
        let s = g.softmax(x, 0).unwrap();
        for p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    let logits = g.constant(T::vector(vec![2.0, 0.0]));
    let ce = g.cross_entropy(logits, &[0]).unwrap();
    let e2 = 2f64.exp();
    let oracle = -(e2 / (e2 + 1.0)).ln();
    assert!((g.value(ce).item() - oracle).abs() < 1e-15);
}

#[test]
fn error_paths() {
    let mut g = Graph::<f64>::eval();
    let a = g.constant(T::zeros(&[2, 3]));
    let b = g.constant(T::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(crate::Error::Shape { op, shapes }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let neg = g.constant(T::vector(vec![1.0, -1.0]));
    assert!(matches!(g.log(neg), Err(crate::Error::Domain { op: "log", .. })));
    let logits = g.constant(T::vector(vec![1.0, 2.0]));
    assert!(matches!(
        g.cross_entropy(logits, &[2]),
        Err(crate::Error::LabelOutOfRange { label: 2, classes: 2 })
    ));
}

#[test]
fn zero_vector_normalizes_to_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.param(T::zeros(&[4]));
    let y = g.l2_normalize(x).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().is_finite());
}

#[test]
fn eval_graph_records_nothing() {
    let mut g = Graph::<f64>::eval();
    let w = g.param(T::randn(&[3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
    let y = g.matmul(w, w).unwrap();
    let _ = g.softmax(y, 1).unwrap();
    assert_eq!(g.recorded_nodes(), 0);
    assert!(!g.requires_grad(w));
}

#[test]
fn forward_op_dispatch_matches_direct_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::<f64>::eval();
    let x = g.constant(rand_t(&mut rng, &[2, 3]));
    let direct = g.softmax(x, 1).unwrap();
    let via = g.forward_op(OpKind::Softmax { axis: 1 }, &[x]).unwrap();
    assert!(g.value(direct).bit_eq(g.value(via)));
    assert!(g.forward_op(OpKind::MatMul, &[x]).is_err());
    let _: f64 = rng.gen();
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-50.0f64..50.0, n)
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(x in vec_strategy(5), shift in -100.0f64..100.0) {
            let mut g = Graph::<f64>::eval();
            let a = g.constant(T::vector(x.clone()));
            let b = g.constant(T::vector(x.iter().map(|v| v + shift).collect()));
            let sa = g.softmax(a, 0).unwrap();
            let sb = g.softmax(b, 0).unwrap();
            let total: f64 = g.value(sa).data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }

        #[test]
        fn normalized_rows_have_unit_norm(x in vec_strategy(6)) {
            prop_assume!(x.iter().map(|v| v * v).sum::<f64>().sqrt() >= NORM_EPS);
            let mut g = Graph::<f64>::eval();
            let a = g.constant(T::vector(x));
            let y = g.l2_normalize(a).unwrap();
            prop_assert!((g.value(y).l2_norm() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn cosine_is_bounded(x in vec_strategy(4), y in vec_strategy(4)) {
            prop_assume!(x.iter().any(|v| *v != 0.0) && y.iter().any(|v| *v != 0.0));
            let mut g = Graph::<f64>::eval();
            let a = g.constant(T::vector(x));
            let b = g.constant(T::vector(y));
            let c = g.cosine_similarity(a, b).unwrap();
            let c = g.value(c).item();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        }
    }
}

#[test]
fn grad_gather_rows_with_repeats() {
    check_many(
        "gather",
        20,
        |r| vec![rand_t(r, &[4, 3])],
        &|g, v| {
            let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
            readout(g, y, 12)
        },
    );
}
