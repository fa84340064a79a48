use migt_core::tensor::{grad_check, grad_check_many, Graph, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SHAPES: [(usize, usize); 3] = [(1, 3), (2, 4), (3, 5)];

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces an arbitrary tensor to a scalar with fixed random weights so that
/// every output coordinate contributes a distinct sensitivity.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = random(g.shape(v).to_vec().as_slice(), &mut rng, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn check_unary(name: &str, lo: f64, hi: f64, op: impl Fn(&mut Graph, Var) -> Result<Var, TensorError>) {
    for seed in SEEDS {
        for (r, c) in SHAPES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[r, c], &mut rng, lo, hi);
            let err = grad_check(
                |g, x| {
                    let y = op(g, x)?;
                    weighted_sum(g, y, seed)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name} seed {seed} shape {r}x{c}: rel err {err}");
        }
    }
}

#[test]
fn grad_check_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[4, 3], &mut rng, -2.0, 2.0);
    let err = grad_check(
        |g, x| {
            let s = g.square(x);
            Ok(g.sum(s))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_linear_map_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[3, 3], &mut rng, -2.0, 2.0);
    let err = grad_check(|g, x| weighted_sum(g, x, 3), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn grad_check_rejects_vector_output_and_bad_eps() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    assert!(grad_check(|g, x| Ok(g.scale(x, 2.0)), &x, 1e-5).is_err());
    assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.0).is_err());
}

#[test]
fn grad_check_reports_non_finite_node() {
    let x = Tensor::vector(vec![-1.0, 2.0]);
    let err = grad_check(
        |g, x| {
            let l = g.ln(x);
            Ok(g.sum(l))
        },
        &x,
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(err, TensorError::NonFinite { node: 1, op: "ln" }), "{err:?}");
}

#[test]
fn unary_ops_pass_grad_check() {
    check_unary("relu", -2.0, 2.0, |g, x| Ok(g.relu(x)));
    check_unary("sigmoid", -4.0, 4.0, |g, x| Ok(g.sigmoid(x)));
    check_unary("softplus", -4.0, 4.0, |g, x| Ok(g.softplus(x)));
    check_unary("exp", -2.0, 2.0, |g, x| Ok(g.exp(x)));
    check_unary("ln", 0.2, 3.0, |g, x| Ok(g.ln(x)));
    check_unary("sqrt", 0.2, 3.0, |g, x| Ok(g.sqrt(x)));
    check_unary("square", -2.0, 2.0, |g, x| Ok(g.square(x)));
    check_unary("ln_gamma", 0.5, 6.0, |g, x| Ok(g.ln_gamma(x)));
    check_unary("digamma", 0.5, 6.0, |g, x| Ok(g.digamma(x)));
    check_unary("clamp", -2.0, 2.0, |g, x| Ok(g.clamp(x, -0.7, 0.9)));
    check_unary("scale", -2.0, 2.0, |g, x| Ok(g.scale(x, -3.5)));
    check_unary("add_scalar", -2.0, 2.0, |g, x| Ok(g.add_scalar(x, 1.25)));
    check_unary("softmax_rows", -3.0, 3.0, |g, x| g.softmax(x, 1));
    check_unary("softmax_cols", -3.0, 3.0, |g, x| g.softmax(x, 0));
    check_unary("transpose", -3.0, 3.0, |g, x| g.transpose(x));
    check_unary("sum_axis", -3.0, 3.0, |g, x| g.sum_axis(x, 1));
    check_unary("broadcast_axis", -3.0, 3.0, |g, x| g.broadcast_axis(x, 1, 3));
    check_unary("mean_var", -3.0, 3.0, |g, x| {
        let (m, v) = g.mean_var(x, 1)?;
        let s = g.sqrt(v);
        g.add(m, s)
    });
    check_unary("slice_cols", -3.0, 3.0, |g, x| g.slice_cols(x, 1, 2));
    check_unary("reshape", -3.0, 3.0, |g, x| {
        let n = g.value(x).numel();
        g.reshape(x, &[n])
    });
}

#[test]
fn binary_ops_pass_grad_check() {
    type BinOp = fn(&mut Graph, Var, Var) -> Result<Var, TensorError>;
    let ops: [(&str, BinOp); 5] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("div", |g, a, b| g.div(a, b)),
        ("minimum", |g, a, b| g.minimum(a, b)),
    ];
    for (name, op) in ops {
        for seed in SEEDS {
            for (r, c) in SHAPES {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
                let a = random(&[r, c], &mut rng, 0.5, 2.0);
                // full shape, row broadcast and scalar broadcast
                for bshape in [vec![r, c], vec![c], vec![1]] {
                    let b = random(&bshape, &mut rng, 0.5, 2.0);
                    let err = grad_check_many(
                        |g, v| {
                            let y = op(g, v[0], v[1])?;
                            weighted_sum(g, y, seed)
                        },
                        &[a.clone(), b],
                        1e-5,
                    )
                    .unwrap();
                    assert!(err < 1e-4, "{name} seed {seed} {r}x{c} vs {bshape:?}: {err}");
                }
            }
        }
    }
}

#[test]
fn matmul_and_concat_pass_grad_check() {
    for seed in SEEDS {
        for (m, k) in SHAPES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
            let a = random(&[m, k], &mut rng, -1.0, 1.0);
            let b = random(&[k, 2], &mut rng, -1.0, 1.0);
            let err = grad_check_many(
                |g, v| {
                    let p = g.matmul(v[0], v[1])?;
                    let t = g.transpose(v[1])?;
                    let q = g.concat_cols(&[v[0], p])?;
                    let r = g.concat_rows(&[t, t])?;
                    let rs = g.slice_rows(r, 1, 2)?;
                    let s1 = weighted_sum(g, q, seed)?;
                    let s2 = weighted_sum(g, rs, seed + 1)?;
                    g.add(s1, s2)
                },
                &[a, b],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let a = g.param(random(&[3, 4], &mut rng, -1.0, 1.0));
        let b = g.param(random(&[4, 2], &mut rng, -1.0, 1.0));
        let p = g.matmul(a, b).unwrap();
        let s = g.softmax(p, 1).unwrap();
        let l = g.sigmoid(s);
        let root = g.sum(l);
        let grads = g.backward(root).unwrap();
        (grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_normalizes_and_is_shift_invariant(
        xs in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(xs.clone()));
        let s = g.softmax(x, 0).unwrap();
        let shifted = g.constant(Tensor::vector(xs.iter().map(|v| v + shift).collect()));
        let s2 = g.softmax(shifted, 0).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (a, b) in g.value(s).data().iter().zip(g.value(s2).data()) {
            prop_assert!(*a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_odd_around_half(x in -40.0f64..40.0) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![x, -x]));
        let s = g.sigmoid(a);
        let v = g.value(s).data();
        prop_assert!(v[0] > 0.0 || x < -30.0);
        prop_assert!((v[1] - (1.0 - v[0])).abs() < 1e-12);
    }
}
