use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use zforce::autodiff::Graph;
use zforce::distributions::{gaussian_log_density, Bernoulli, Categorical, DiagGaussian};

fn gaussian(g: &mut Graph, mu: &[f64], ls: &[f64]) -> DiagGaussian {
    let m = g.leaf(vec![1, mu.len()], mu.to_vec(), true).unwrap();
    let l = g.leaf(vec![1, ls.len()], ls.to_vec(), true).unwrap();
    DiagGaussian::new(g, m, l).unwrap()
}

fn graph_kl(q: (&[f64], &[f64]), p: (&[f64], &[f64])) -> f64 {
    let mut g = Graph::new();
    let q = gaussian(&mut g, q.0, q.1);
    let p = gaussian(&mut g, p.0, p.1);
    let kl = q.kl(&mut g, &p).unwrap();
    g.scalar(kl)
}

fn log_density(x: &[f64], mu: &[f64], ls: &[f64]) -> f64 {
    (0..x.len())
        .map(|k| -0.5 * (2.0 * std::f64::consts::PI).ln() - ls[k] - 0.5 * ((x[k] - mu[k]) / ls[k].exp()).powi(2))
        .sum()
}

/// Mean and standard error of `log q(z) - log p(z)` under `z ~ q`.
fn monte_carlo_kl(q: (&[f64], &[f64]), p: (&[f64], &[f64]), n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let d = q.0.len();
    let mut z = vec![0.0; d];
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..n {
        for k in 0..d {
            let e: f64 = StandardNormal.sample(rng);
            z[k] = q.0[k] + q.1[k].exp() * e;
        }
        let v = log_density(&z, q.0, q.1) - log_density(&z, p.0, p.1);
        sum += v;
        sum2 += v * v;
    }
    let mean = sum / n as f64;
    let var = (sum2 / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

#[test]
fn analytic_kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..4 {
        let mut draw = |lo: f64, hi: f64| (0..3).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let (mq, lq, mp, lp) = (draw(-1.0, 1.0), draw(-0.7, 0.3), draw(-1.0, 1.0), draw(-0.5, 0.5));
        let analytic = graph_kl((&mq, &lq), (&mp, &lp));
        let (mc, se) = monte_carlo_kl((&mq, &lq), (&mp, &lp), 200_000, &mut rng);
        assert!((analytic - mc).abs() <= 3.0 * se, "{analytic} vs {mc} +- {se}");
    }
}

#[test]
fn kl_vanishes_for_identical_arguments_only() {
    let (m, l) = ([0.3, -1.2], [0.1, -0.4]);
    assert_eq!(graph_kl((&m, &l), (&m, &l)), 0.0);
    assert!(graph_kl((&m, &l), (&[0.3, -1.1], &l)) > 0.0);
    assert!(graph_kl((&m, &l), (&m, &[0.1, -0.3])) > 0.0);
}

#[test]
fn rsample_moments_match_the_parameters() {
    let (mu, ls) = (1.5, (0.5f64).ln());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 1000;
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut g = Graph::new();
    let d = gaussian(&mut g, &vec![mu; n], &vec![ls; n]);
    let e = g.constant(vec![1, n], eps.clone()).unwrap();
    let z = d.rsample(&mut g, e).unwrap();
    let z = g.value(z).to_vec();
    for (zi, ei) in z.iter().zip(&eps) {
        assert!((zi - (mu + 0.5 * ei)).abs() < 1e-12);
    }
    let mean = z.iter().sum::<f64>() / n as f64;
    assert!((mean - mu).abs() <= 3.0 * 0.5 / (n as f64).sqrt(), "{mean}");

    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let e: f64 = StandardNormal.sample(&mut rng);
        let z = mu + 0.5 * e;
        s += z;
        s2 += z * z;
    }
    let m = s / n as f64;
    let var = s2 / n as f64 - m * m;
    assert!((var / 0.25 - 1.0).abs() < 0.01, "{var}");
}

#[test]
fn rsample_gradients_are_one_and_eps_sigma() {
    let mut g = Graph::new();
    let m = g.leaf(vec![1, 2], vec![0.2, -0.4], true).unwrap();
    let l = g.leaf(vec![1, 2], vec![0.3, -0.9], true).unwrap();
    let d = DiagGaussian::new(&mut g, m, l).unwrap();
    let e = g.constant(vec![1, 2], vec![1.7, -0.6]).unwrap();
    let z = d.rsample(&mut g, e).unwrap();
    let s = g.sum(z);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(m), vec![1.0, 1.0]);
    let gl = grads.wrt(l);
    assert!((gl[0] - 1.7 * 0.3f64.exp()).abs() < 1e-12);
    assert!((gl[1] + 0.6 * (-0.9f64).exp()).abs() < 1e-12);
}

#[test]
fn gaussian_log_prob_matches_closed_form() {
    let mut g = Graph::new();
    let d = gaussian(&mut g, &[0.5, -1.0], &[0.2, -0.3]);
    let x = g.constant(vec![1, 2], vec![1.1, -2.0]).unwrap();
    let lp = d.log_prob(&mut g, x).unwrap();
    let expected = gaussian_log_density(1.1, 0.5, 0.2) + gaussian_log_density(-2.0, -1.0, -0.3);
    assert!((g.scalar(lp) - expected).abs() < 1e-12);
    assert!((expected - log_density(&[1.1, -2.0], &[0.5, -1.0], &[0.2, -0.3])).abs() < 1e-12);
}

#[test]
fn log_sigma_is_clamped() {
    let mut g = Graph::new();
    let d = gaussian(&mut g, &[0.0], &[20.0]);
    assert_eq!(g.value(d.log_sigma), &[8.0]);
    let d = gaussian(&mut g, &[0.0], &[-20.0]);
    assert_eq!(g.value(d.log_sigma), &[-8.0]);
}

#[test]
fn categorical_log_prob_is_normalised() {
    let mut g = Graph::new();
    let logits = g.leaf(vec![1, 4], vec![0.3, -1.0, 2.0, 0.0], true).unwrap();
    let c = Categorical { logits };
    let total: f64 = (0..4)
        .map(|i| {
            let lp = c.log_prob(&mut g, &[i]).unwrap();
            g.scalar(lp).exp()
        })
        .sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(c.log_prob(&mut g, &[4]).is_err());
}

#[test]
fn bernoulli_log_prob_matches_closed_form() {
    let mut g = Graph::new();
    let logits = g.leaf(vec![1, 3], vec![0.4, -2.0, 35.0], true).unwrap();
    let x = g.constant(vec![1, 3], vec![1.0, 0.0, 1.0]).unwrap();
    let lp = Bernoulli { logits }.log_prob(&mut g, x).unwrap();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let expected = sig(0.4).ln() + (1.0 - sig(-2.0)).ln() + sig(35.0).ln();
    assert!((g.scalar(lp) - expected).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_is_non_negative(
        mq in prop::collection::vec(-3.0f64..3.0, 3),
        lq in prop::collection::vec(-3.0f64..3.0, 3),
        mp in prop::collection::vec(-3.0f64..3.0, 3),
        lp in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        prop_assert!(graph_kl((&mq, &lq), (&mp, &lp)) >= -1e-12);
        prop_assert!(graph_kl((&mq, &lq), (&mq, &lq)).abs() < 1e-12);
    }
}
