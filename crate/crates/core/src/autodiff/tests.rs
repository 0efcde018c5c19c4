use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn assert_grad<F>(name: &str, x: &Tensor, f: F)
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let r = grad_check(f, x, 1e-6, 1e-5).unwrap();
    assert!(r.passed, "{name}: max rel err {} at {} (a={}, n={})", r.max_rel_err, r.worst, r.analytic[r.worst], r.numeric[r.worst]);
}

#[test]
fn sigmoid_at_zero() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(0.0).with_requires_grad(true));
    let y = x.sigmoid();
    assert_eq!(y.item(), 0.5);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[0.25]);
}

#[test]
fn softmax_uniform_row() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::from_vec(vec![1.0, 1.0, 1.0]));
    let y = x.softmax(0).unwrap();
    for v in y.value().iter() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = random(&[3, 4], -2.0, 2.0, 1);
    let b = random(&[4, 2], -2.0, 2.0, 2);
    let r = grad_check(
        |t, a| Ok(a.matmul(t.constant(&b))?.sum()),
        &a,
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{}", r.max_rel_err);
    // d/dA sum(AB) = 1 · Bᵀ: row sums of B broadcast over rows.
    for i in 0..3 {
        for k in 0..4 {
            let expect = b.at(&[k, 0]) + b.at(&[k, 1]);
            assert!((r.analytic[i * 4 + k] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_identity_and_product() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(5.0).with_requires_grad(true));
    assert_eq!(tape.backward(x).unwrap().wrt(x).unwrap(), &[1.0]);

    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(2.0).with_requires_grad(true));
    let y = tape.leaf(&Tensor::scalar(3.0).with_requires_grad(true));
    let g = tape.backward(x.mul(y).unwrap()).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[3.0]);
    assert_eq!(g.wrt(y).unwrap(), &[2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(&[2]).with_requires_grad(true));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn composite_graph_matches_finite_differences() {
    let x = random(&[2, 3], -2.0, 2.0, 11);
    let w = random(&[3, 3], -1.0, 1.0, 12);
    assert_grad("composite", &x, |t, x| {
        let h = x.matmul(t.constant(&w))?.sigmoid();
        let e = h.mul(x)?.exp();
        let s = e.softmax(1)?;
        Ok(s.square().sum().add(h.mean())?)
    });
}

#[test]
fn every_primitive_passes_grad_check() {
    let cases = crate::gradsuite::primitive_cases();
    assert!(cases.len() >= 50);
    for c in cases {
        let r = c.run(1e-5).unwrap();
        assert!(r.passed, "{}: max rel err {} at {} (a={}, n={})", c.name, r.max_rel_err, r.worst, r.analytic[r.worst], r.numeric[r.worst]);
    }
}

#[test]
fn clamp_gradient_is_zero_outside_and_identity_inside() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![-2.0, 0.3, 5.0]).with_requires_grad(true));
    let g = tape.backward(x.clamp(0.0, 1.0).sum()).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn max_routes_to_first_index_on_ties() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::new(&[2, 3], vec![1.0, 3.0, 3.0, 2.0, 2.0, 0.0]).unwrap().with_requires_grad(true));
    let g = tape.backward(x.max_axis(1).unwrap().sum()).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);

    let tape = Tape::new();
    let x = tape.leaf(&Tensor::full(&[3, 3], 1.0).with_requires_grad(true));
    let y = x.window_max(3).unwrap();
    let g = tape.backward(y.narrow(0, 1, 1).unwrap().narrow(1, 1, 1).unwrap().sum()).unwrap();
    let mut expect = vec![0.0; 9];
    expect[0] = 1.0;
    assert_eq!(g.wrt(x).unwrap(), expect.as_slice());
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[3, 2]));
    match a.add(b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    assert!(a.matmul(a).is_err());
}

#[test]
fn division_by_zero_rejected_unless_guarded() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.constant(&Tensor::from_vec(vec![1.0, 0.0]));
    assert!(matches!(a.div(b), Err(Error::DivisionByZero { index: 1, .. })));
    let q = a.div_eps(b, DEFAULT_EPS).unwrap();
    assert_eq!(q.value()[1], 2.0 / DEFAULT_EPS);
}

#[test]
fn repeated_backward_doubles_accumulated_grad() {
    let mut store = ParamStore::new();
    let p = store.add("w", ParamKind::Weight, Tensor::from_vec(vec![1.5, -0.5]));
    let tape = Tape::new();
    let w = tape.param(&store, p);
    let loss = w.square().sum();
    let g1 = tape.backward(loss).unwrap();
    store.accumulate(&g1).unwrap();
    assert_eq!(store.tensor(p).grad().unwrap(), &[3.0, -1.0]);
    let g2 = tape.backward(loss).unwrap();
    store.accumulate(&g2).unwrap();
    assert_eq!(store.tensor(p).grad().unwrap(), &[6.0, -2.0]);
}

#[test]
fn grad_check_edge_cases() {
    let x = Tensor::from_vec(vec![1.0, 2.0]);
    let r = grad_check(|_, x| Ok(x.square().sum()), &x, 1e-6, 1e-6).unwrap();
    assert!(r.passed);
    assert!((r.analytic[0] - 2.0).abs() < 1e-12 && (r.analytic[1] - 4.0).abs() < 1e-12);

    let r = grad_check(|t, _| Ok(t.scalar(3.0)), &x, 1e-6, 1e-6).unwrap();
    assert!(r.passed);
    assert_eq!(r.analytic, vec![0.0, 0.0]);

    let r = grad_check(|_, x| Ok(x.log_eps(0.0).sum()), &Tensor::from_vec(vec![1.0, 1e-7]), 1e-6, 1e-6).unwrap();
    assert!(!r.passed);
    assert!(r.failure.unwrap().contains("coordinate 1"));

    assert!(grad_check(|_, x| Ok(x.sum()), &x, 1e-2, 1e-6).is_err());
}

#[test]
fn backward_is_linear() {
    let x = random(&[5], -2.0, 2.0, 31);
    let grad_of = |a: f64, b: f64| {
        let tape = Tape::new();
        let v = tape.leaf(&x.clone().with_requires_grad(true));
        let f = v.sigmoid().sum();
        let g = v.square().exp().mean();
        let loss = f.mul_scalar(a).add(g.mul_scalar(b)).unwrap();
        tape.backward(loss).unwrap().wrt(v).unwrap().to_vec()
    };
    let (gf, gg, gc) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(2.5, -0.7));
    for i in 0..5 {
        assert!((gc[i] - (2.5 * gf[i] - 0.7 * gg[i])).abs() < 1e-12);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let x = random(&[4, 4], -2.0, 2.0, 41);
        let tape = Tape::new();
        let v = tape.leaf(&x.with_requires_grad(true));
        let y = v.matmul(v).unwrap().softmax(1).unwrap().log_eps(1e-8).mean();
        let g = tape.backward(y).unwrap();
        (y.item().to_bits(), g.wrt(v).unwrap().iter().map(|f| f.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_normalize_and_shift(data in proptest::collection::vec(-20.0f64..20.0, 12), c in -50.0f64..50.0) {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[3, 4], data.clone()).unwrap());
        let s = x.softmax(1).unwrap();
        let shifted = x.add_scalar(c).softmax(1).unwrap();
        let (sv, hv) = (s.value().to_vec(), shifted.value().to_vec());
        for r in 0..3 {
            let sum: f64 = sv[r * 4..(r + 1) * 4].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
        for (a, b) in sv.iter().zip(&hv) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_invariants_hold_for_random_shapes(dims in proptest::collection::vec(1usize..5, 1..4)) {
        let n: usize = dims.iter().product();
        let t = Tensor::new(&dims, vec![0.5; n]).unwrap();
        prop_assert_eq!(t.len(), n);
        prop_assert!(Tensor::new(&dims, vec![0.5; n + 1]).is_err());
    }
}
