//! Finite-difference checks for every tape primitive, plus algebraic
//! properties of the reverse sweep.

mod common;

use bearlab::autodiff::{grad_check, grad_check_store, Array, AutodiffError, ParameterStore, Primitive, Tape, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 50;
const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Away from zero, for primitives with a kink there.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let mut a = rand_array(rng, shape, 0.1, 2.0);
    for x in a.data_mut() {
        if rng.gen_bool(0.5) {
            *x = -*x;
        }
    }
    a
}

/// Contracts any output with fixed random weights so every coordinate counts.
fn project(t: &mut Tape, out: Var, w: &Array) -> Result<Var, AutodiffError> {
    let w = t.leaf(w.clone());
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
}

/// Runs `build` for `INSTANCES` seeds; each returns its worst relative error.
fn run<F>(name: &str, build: F)
where
    F: Fn(&mut ChaCha8Rng) -> f64,
{
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = build(&mut rng);
        assert!(err <= TOL, "{name}: seed {seed} relative error {err}");
    }
}

fn unary(rng: &mut ChaCha8Rng, x: Array, f: impl Fn(&mut Tape, Var) -> Result<Var, AutodiffError>) -> f64 {
    let out_shape = {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let o = f(&mut t, v).unwrap();
        t.value(o).shape().to_vec()
    };
    let w = rand_array(rng, &out_shape, -1.0, 1.0);
    grad_check(|t, v| { let o = f(t, v)?; project(t, o, &w) }, &x, STEP)
}

#[test]
fn matmul_both_sides() {
    run("matmul lhs", |rng| {
        let (m, k, n) = dims(rng);
        let a = rand_array(rng, &[m, k], -1.0, 1.0);
        let b = rand_array(rng, &[k, n], -1.0, 1.0);
        unary(rng, a, |t, v| { let b = t.leaf(b.clone()); t.matmul(v, b) })
    });
    run("matmul rhs", |rng| {
        let (m, k, n) = dims(rng);
        let a = rand_array(rng, &[m, k], -1.0, 1.0);
        let b = rand_array(rng, &[k, n], -1.0, 1.0);
        unary(rng, b, |t, v| { let a = t.leaf(a.clone()); t.matmul(a, v) })
    });
}

#[test]
fn matmul_nt_both_sides() {
    run("matmul_nt lhs", |rng| {
        let (m, k, n) = dims(rng);
        let a = rand_array(rng, &[m, k], -1.0, 1.0);
        let b = rand_array(rng, &[n, k], -1.0, 1.0);
        unary(rng, a, |t, v| { let b = t.leaf(b.clone()); t.matmul_nt(v, b) })
    });
    run("matmul_nt rhs", |rng| {
        let (m, k, n) = dims(rng);
        let a = rand_array(rng, &[m, k], -1.0, 1.0);
        let b = rand_array(rng, &[n, k], -1.0, 1.0);
        unary(rng, b, |t, v| { let a = t.leaf(a.clone()); t.matmul_nt(a, v) })
    });
}

type Binary = fn(&mut Tape, Var, Var) -> Result<Var, AutodiffError>;

fn binary_suite(name: &str, op: Binary) {
    // b same shape, broadcast vector, or scalar; check both operands.
    run(name, |rng| {
        let (m, n, _) = dims(rng);
        let a = rand_array(rng, &[m, n], -1.5, 1.5);
        let b_shape: Vec<usize> = match rng.gen_range(0..3) {
            0 => vec![m, n],
            1 => vec![n],
            _ => vec![],
        };
        let b = rand_array(rng, &b_shape, -1.5, 1.5);
        let ea = unary(rng, a.clone(), |t, v| { let b = t.leaf(b.clone()); op(t, v, b) });
        let eb = unary(rng, b, |t, v| { let a = t.leaf(a.clone()); op(t, a, v) });
        ea.max(eb)
    });
}

#[test]
fn add_sub_mul() {
    binary_suite("add", |t, a, b| t.add(a, b));
    binary_suite("sub", |t, a, b| t.sub(a, b));
    binary_suite("multiply", |t, a, b| t.mul(a, b));
}

#[test]
fn scale_and_sum() {
    run("scale", |rng| {
        let (m, n, _) = dims(rng);
        let c = rng.gen_range(-3.0..3.0);
        let x = rand_array(rng, &[m, n], -1.0, 1.0);
        unary(rng, x, move |t, v| Ok(t.scale(v, c)))
    });
    run("sum", |rng| {
        let (m, n, _) = dims(rng);
        let x = rand_array(rng, &[m, n], -1.0, 1.0);
        unary(rng, x, |t, v| Ok(t.sum(v)))
    });
}

#[test]
fn elementwise_nonlinearities() {
    run("exp", |rng| {
        let (m, n, _) = dims(rng);
        let x = rand_array(rng, &[m, n], -2.0, 2.0);
        unary(rng, x, |t, v| Ok(t.exp(v)))
    });
    run("log", |rng| {
        let (m, n, _) = dims(rng);
        let x = rand_array(rng, &[m, n], 0.2, 3.0);
        unary(rng, x, |t, v| t.log(v))
    });
    run("log_clamped", |rng| {
        let (m, n, _) = dims(rng);
        let x = rand_array(rng, &[m, n], 0.2, 3.0);
        unary(rng, x, |t, v| Ok(t.log_clamped(v, 1e-12)))
    });
    run("sigmoid", |rng| {
        let (m, n, _) = dims(rng);
        let x = rand_array(rng, &[m, n], -4.0, 4.0);
        unary(rng, x, |t, v| Ok(t.sigmoid(v)))
    });
    run("log_sigmoid", |rng| {
        let (m, n, _) = dims(rng);
        let x = rand_array(rng, &[m, n], -6.0, 6.0);
        unary(rng, x, |t, v| Ok(t.log_sigmoid(v)))
    });
    run("relu", |rng| {
        let (m, n, _) = dims(rng);
        let x = rand_away_from_zero(rng, &[m, n]);
        unary(rng, x, |t, v| Ok(t.relu(v)))
    });
    run("softmax", |rng| {
        let (m, n, _) = dims(rng);
        let x = rand_array(rng, &[m, n + 1], -3.0, 3.0);
        unary(rng, x, |t, v| Ok(t.softmax(v)))
    });
}

#[test]
fn structural_ops() {
    run("gather_rows", |rng| {
        let (m, n, k) = dims(rng);
        let idx: Vec<usize> = (0..k + 2).map(|_| rng.gen_range(0..m)).collect();
        let x = rand_array(rng, &[m, n], -1.0, 1.0);
        unary(rng, x, move |t, v| t.gather_rows(v, &idx))
    });
    run("gather", |rng| {
        let (m, n, k) = dims(rng);
        let idx: Vec<usize> = (0..k + 3).map(|_| rng.gen_range(0..m * n)).collect();
        let x = rand_array(rng, &[m, n], -1.0, 1.0);
        unary(rng, x, move |t, v| t.gather(v, &idx))
    });
    run("concatenate rows", |rng| {
        let (m, n, k) = dims(rng);
        let other = rand_array(rng, &[k, n], -1.0, 1.0);
        let x = rand_array(rng, &[m, n], -1.0, 1.0);
        unary(rng, x, move |t, v| {
            let o = t.leaf(other.clone());
            t.concat(&[o, v, v])
        })
    });
    run("concatenate vectors", |rng| {
        let (m, _, _) = dims(rng);
        let s = t_scalar(rng);
        let x = rand_array(rng, &[m], -1.0, 1.0);
        unary(rng, x, move |t, v| {
            let s = t.scalar(s);
            t.concat(&[v, s, v])
        })
    });
    run("transpose", |rng| {
        let (m, n, _) = dims(rng);
        let x = rand_array(rng, &[m, n], -1.0, 1.0);
        unary(rng, x, |t, v| t.transpose(v))
    });
    run("reshape", |rng| {
        let (m, n, _) = dims(rng);
        let x = rand_array(rng, &[m, n], -1.0, 1.0);
        unary(rng, x, move |t, v| t.reshape(v, &[n * m]))
    });
    run("detach", |rng| {
        // d/dx [x * detach(x)] = detach(x): a fixed-point FD would disagree,
        // so compare against the closed form instead.
        let (m, n, _) = dims(rng);
        let x = rand_array(rng, &[m, n], -1.0, 1.0);
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let d = t.detach(v);
        let p = t.mul(v, d).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap().wrt_or_zeros(&t, v);
        g.data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    });
}

fn t_scalar(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(-1.0..1.0)
}

#[test]
fn apply_dispatch_matches_methods() {
    run("apply", |rng| {
        let (m, k, n) = dims(rng);
        let b = rand_array(rng, &[k, n], -1.0, 1.0);
        let x = rand_array(rng, &[m, k], -1.0, 1.0);
        unary(rng, x, move |t, v| {
            let b = t.leaf(b.clone());
            let h = t.apply(&Primitive::MatMul, &[v, b])?;
            let h = t.apply(&Primitive::Sigmoid, &[h])?;
            let e = t.apply(&Primitive::Exp, &[h])?;
            let l = t.apply(&Primitive::Log, &[e])?;
            let r = t.apply(&Primitive::Relu, &[l])?;
            let s = t.apply(&Primitive::SoftmaxLastAxis, &[h])?;
            let a = t.apply(&Primitive::Add, &[r, s])?;
            let p = t.apply(&Primitive::Multiply, &[a, h])?;
            let g = t.apply(&Primitive::GatherRows(vec![0, 0]), &[p])?;
            t.apply(&Primitive::Concatenate, &[g, p])
        })
    });
}

#[test]
fn parameter_store_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = dims(&mut rng);
        let mut store = ParameterStore::new();
        let w = store.insert("w", rand_array(&mut rng, &[k, n], -1.0, 1.0)).unwrap();
        let b = store.insert("b", rand_array(&mut rng, &[n], -1.0, 1.0)).unwrap();
        let x = rand_array(&mut rng, &[m, k], -1.0, 1.0);
        let err = grad_check_store(
            &store,
            |t, s| {
                let xv = t.leaf(x.clone());
                let wv = t.param(s, w);
                let bv = t.param(s, b);
                let h = t.matmul(xv, wv)?;
                let h = t.add(h, bv)?;
                let p = t.softmax(h);
                let l = t.log(p)?;
                Ok(t.sum(l))
            },
            STEP,
        );
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn shared_subexpressions_accumulate() {
    // f = sum(x*x + x) has gradient 2x + 1 even though x is used three times.
    let x = Array::vector(vec![0.5, -1.5, 2.0]);
    let mut t = Tape::new();
    let v = t.leaf(x.clone());
    let sq = t.mul(v, v).unwrap();
    let f = t.add(sq, v).unwrap();
    let s = t.sum(f);
    let g = t.backward(s).unwrap().wrt_or_zeros(&t, v);
    assert_eq!(g.data(), &[2.0, -2.0, 5.0]);
}

#[test]
fn log_rejects_below_floor() {
    let mut t = Tape::new();
    let v = t.leaf(Array::vector(vec![0.5, 0.0]));
    assert!(matches!(t.log(v), Err(AutodiffError::Domain { .. })));
    let c = t.log_clamped(v, 1e-12);
    assert_eq!(t.value(c).data()[1], 1e-12f64.ln());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..4, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[rows, cols], -50.0, 50.0);
        let mut t = Tape::new();
        let v = t.leaf(x);
        let s = t.softmax(v);
        for r in 0..rows {
            let row = t.value(s).row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sigmoid_is_finite_and_matches(z in -800.0f64..800.0) {
        let mut t = Tape::new();
        let v = t.scalar(z);
        let l = t.log_sigmoid(v);
        let val = t.value(l).item();
        prop_assert!(val.is_finite());
        prop_assert!(val <= 0.0);
        prop_assert!((val - common::log_sigmoid(z)).abs() <= 1e-12 * val.abs().max(1.0));
        let g = t.backward(l).unwrap().wrt_or_zeros(&t, v).item();
        prop_assert!(g.is_finite() && (0.0..=1.0).contains(&g));
    }

    #[test]
    fn sum_gradient_is_ones(n in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[n], -10.0, 10.0);
        let mut t = Tape::new();
        let v = t.leaf(x);
        let s = t.sum(v);
        let g = t.backward(s).unwrap().wrt_or_zeros(&t, v);
        prop_assert!(g.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn backward_is_linear_in_scale(c in -5.0f64..5.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[3, 2], -1.0, 1.0);
        let grad = |c: f64| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let s = t.sigmoid(v);
            let s = t.scale(s, c);
            let o = t.sum(s);
            t.backward(o).unwrap().wrt_or_zeros(&t, v)
        };
        let (g1, gc) = (grad(1.0), grad(c));
        for (a, b) in g1.data().iter().zip(gc.data()) {
            prop_assert!((a * c - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn store_round_trips(vals in prop::collection::vec(-1e6f64..1e6, 1..20)) {
        let mut s = ParameterStore::new();
        s.insert("p", Array::vector(vals.clone())).unwrap();
        let back = ParameterStore::from_parts(&s.manifest(), &s.blob()).unwrap();
        prop_assert_eq!(back.digest(), s.digest());
        prop_assert_eq!(back.value(back.id("p").unwrap()).data(), &vals[..]);
    }
}
