use proptest::prelude::*;
use zforce::autodiff::{log_sum_exp, Graph, Var};

/// Central difference of `f` at `x` along every coordinate.
fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let eps = 1e-5;
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
}

/// `sum(w * tanh(x @ m) + sigmoid(x @ m) * softplus(x @ m))` for a 2x3 `x` and 3x2 `m`.
fn composite_graph(x: &[f64], m: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let xv = g.leaf(vec![2, 3], x.to_vec(), true).unwrap();
    let mv = g.leaf(vec![3, 2], m.to_vec(), true).unwrap();
    let y = g.matmul(xv, mv).unwrap();
    let t = g.tanh(y);
    let w = g.constant(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let t = g.mul(t, w).unwrap();
    let s = g.sigmoid(y);
    let sp = g.softplus(y);
    let u = g.mul(s, sp).unwrap();
    let out = g.add(t, u).unwrap();
    let out = g.sum(out);
    let grads = g.backward(out).unwrap();
    (g.scalar(out), grads.wrt(xv), grads.wrt(mv))
}

fn composite_plain(x: &[f64], m: &[f64]) -> f64 {
    let w = [0.5, -1.0, 2.0, 0.25];
    let sp = |v: f64| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() };
    let mut total = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            let y: f64 = (0..3).map(|k| x[r * 3 + k] * m[k * 2 + c]).sum();
            total += w[r * 2 + c] * y.tanh() + sp(y) / (1.0 + (-y).exp());
        }
    }
    total
}

fn log_softmax_graph(x: &[f64], pick: usize) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let xv = g.leaf(vec![1, x.len()], x.to_vec(), true).unwrap();
    let l = g.log_softmax(xv);
    let p = g.slice(l, pick, 1).unwrap();
    let p = g.sum(p);
    let grads = g.backward(p).unwrap();
    (g.scalar(p), grads.wrt(xv))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_gradient_matches_central_differences(
        x in prop::collection::vec(-2.0f64..2.0, 6),
        m in prop::collection::vec(-1.5f64..1.5, 6),
    ) {
        let (value, gx, gm) = composite_graph(&x, &m);
        prop_assert!((value - composite_plain(&x, &m)).abs() < 1e-12);
        let nx = numeric_grad(&x, |x| composite_plain(x, &m));
        let nm = numeric_grad(&m, |m| composite_plain(&x, m));
        prop_assert!(close(&gx, &nx, 1e-6), "{gx:?} vs {nx:?}");
        prop_assert!(close(&gm, &nm, 1e-6), "{gm:?} vs {nm:?}");
    }

    #[test]
    fn log_softmax_gradient_matches_central_differences(
        x in prop::collection::vec(-6.0f64..6.0, 2..7),
        pick in 0usize..7,
    ) {
        let pick = pick % x.len();
        let (value, grad) = log_softmax_graph(&x, pick);
        let plain = |x: &[f64]| x[pick] - log_sum_exp(x);
        prop_assert!((value - plain(&x)).abs() < 1e-12);
        prop_assert!(close(&grad, &numeric_grad(&x, plain), 1e-6));
    }

    #[test]
    fn exp_log_round_trip_has_unit_gradient(x in prop::collection::vec(0.1f64..5.0, 1..6)) {
        let mut g = Graph::new();
        let v = g.leaf(vec![x.len()], x.clone(), true).unwrap();
        let l = g.log(v);
        let e = g.exp(l);
        let s = g.sum(e);
        let grads = g.backward(s).unwrap();
        prop_assert!(grads.wrt(v).iter().all(|d| (d - 1.0).abs() < 1e-12));
    }
}

#[test]
fn gradients_from_shared_uses_accumulate() {
    let mut g = Graph::new();
    let x = g.leaf(vec![3], vec![0.5, -2.0, 3.0], true).unwrap();
    let sq = g.mul(x, x).unwrap();
    let y = g.add(sq, x).unwrap();
    let y = g.sum(y);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x), vec![2.0, -3.0, 7.0]);
}

#[test]
fn stop_gradient_passes_value_but_no_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(vec![4], vec![1.0, -1.5, 0.0, 7.25], true).unwrap();
    let s = g.stop_gradient(x);
    assert_eq!(g.value(s), g.value(x));
    let y = g.add(x, s).unwrap();
    let y = g.sum(y);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x), vec![1.0; 4]);
}

#[test]
fn backward_is_repeatable() {
    let build = || {
        let mut g = Graph::new();
        let a = g.leaf(vec![2, 2], vec![0.3, -0.7, 1.1, 0.05], true).unwrap();
        let b = g.leaf(vec![2, 2], vec![-0.2, 0.9, 0.4, -1.3], true).unwrap();
        let c = g.matmul(a, b).unwrap();
        let c = g.tanh(c);
        let c = g.matmul(c, a).unwrap();
        let c = g.sum(c);
        (g, a, b, c)
    };
    let (g, a, b, c) = build();
    let first = g.backward(c).unwrap();
    let second = g.backward(c).unwrap();
    assert_eq!(first.wrt(a), second.wrt(a));
    assert_eq!(first.wrt(b), second.wrt(b));
    let (g2, a2, _, c2) = build();
    assert_eq!(g2.backward(c2).unwrap().wrt(a2), first.wrt(a));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
    let k = g.constant(vec![2], vec![3.0, 4.0]).unwrap();
    let y = g.mul(x, k).unwrap();
    let y = g.sum(y);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x), vec![3.0, 4.0]);
    assert!(grads.get(k).is_none());
}

#[test]
fn backward_requires_a_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
    assert!(g.backward(x).is_err());
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let a = g.leaf(vec![2, 3], vec![0.0; 6], true).unwrap();
    let b = g.leaf(vec![2, 3], vec![0.0; 6], true).unwrap();
    assert!(g.matmul(a, b).is_err());
    let c = g.leaf(vec![3], vec![0.0; 3], true).unwrap();
    assert!(g.add(a, c).is_err());
}

#[test]
fn concat_and_slice_route_gradients() {
    let mut g = Graph::new();
    let a = g.leaf(vec![2, 1], vec![1.0, 2.0], true).unwrap();
    let b = g.leaf(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0], true).unwrap();
    let c: Var = g.concat(&[a, b]).unwrap();
    assert_eq!(g.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    let s = g.slice(c, 1, 1).unwrap();
    let s = g.scale(s, 2.0);
    let s = g.sum(s);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(a), vec![0.0, 0.0]);
    assert_eq!(grads.wrt(b), vec![2.0, 0.0, 2.0, 0.0]);
}
