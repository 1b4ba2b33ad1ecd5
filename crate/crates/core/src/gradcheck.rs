//! Central finite-difference checks of the reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Broadcast, Graph, Var};
use crate::data::{DataKind, Observation, SequenceBatch};
use crate::distributions::{Bernoulli, Categorical, DiagGaussian};
use crate::error::Result;
use crate::model::{compute_loss, LossWeights, ModelConfig, Noise, ZForcingModel};
use crate::params::{F64Params, ParamId, ParamSource, ParamVars};
use crate::recurrent::{lstm_step, LstmCell};

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Reduces any output to a scalar through fixed random weights so that every
/// output coordinate contributes.
fn scalarize(g: &mut Graph, out: Var, weights: &[f64]) -> Result<Var> {
    if g.shape(out).is_empty() {
        return Ok(out);
    }
    let w = g.constant(g.shape(out).to_vec(), weights[..g.value(out).len()].to_vec())?;
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

/// Compares the gradient of `build` with respect to every coordinate of every
/// input against central differences.
pub fn check_inputs(name: &str, inputs: &[(Vec<usize>, Vec<f64>)], build: &Builder<'_>, eps: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let weights: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eval = |vals: &[(Vec<usize>, Vec<f64>)]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|(s, v)| g.leaf(s.clone(), v.clone(), true))
            .collect::<Result<_>>()?;
        let out = build(&mut g, &vars)?;
        let loss = scalarize(&mut g, out, &weights)?;
        let grads = g.backward(loss)?;
        Ok((g.scalar(loss), vars.iter().map(|&v| grads.wrt(v)).collect()))
    };
    let (_, analytic) = eval(inputs)?;
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut probe = inputs.to_vec();
    for (i, (_, values)) in inputs.iter().enumerate() {
        for j in 0..values.len() {
            probe[i].1[j] = values[j] + eps;
            let up = eval(&probe)?.0;
            probe[i].1[j] = values[j] - eps;
            let down = eval(&probe)?.0;
            probe[i].1[j] = values[j];
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i][j], numeric));
            coords += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_owned(),
        coordinates: coords,
        max_rel_error: worst,
    })
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values in `[-range, range]` kept at least `margin` away from each kink.
fn away_from(rng: &mut impl Rng, n: usize, range: f64, kinks: &[f64], margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let x = rng.random_range(-range..range);
            if kinks.iter().all(|k| (x - k).abs() > margin) {
                break x;
            }
        })
        .collect()
}

/// Every differentiable graph operation, distribution density and the LSTM step.
pub fn check_all_ops(eps: f64, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let m23 = |r: &mut ChaCha8Rng| (vec![2, 3], uniform(r, 6, -2.0, 2.0));
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<(Vec<usize>, Vec<f64>)>, f: &Builder<'_>| -> Result<()> {
        out.push(check_inputs(name, &inputs, f, eps)?);
        Ok(())
    };

    run("matmul", vec![m23(r), (vec![3, 4], uniform(r, 12, -2.0, 2.0))], &|g, v| g.matmul(v[0], v[1]))?;
    run("add", vec![m23(r), m23(r)], &|g, v| g.add(v[0], v[1]))?;
    run("sub", vec![m23(r), m23(r)], &|g, v| g.sub(v[0], v[1]))?;
    run("mul", vec![m23(r), m23(r)], &|g, v| g.mul(v[0], v[1]))?;
    run("scale", vec![m23(r)], &|g, v| Ok(g.scale(v[0], -1.7)))?;
    run("add_scalar", vec![m23(r)], &|g, v| Ok(g.add_scalar(v[0], 0.3)))?;
    run("neg", vec![m23(r)], &|g, v| Ok(g.neg(v[0])))?;
    run("tanh", vec![m23(r)], &|g, v| Ok(g.tanh(v[0])))?;
    run("sigmoid", vec![m23(r)], &|g, v| Ok(g.sigmoid(v[0])))?;
    run("exp", vec![m23(r)], &|g, v| Ok(g.exp(v[0])))?;
    run("log", vec![(vec![2, 3], uniform(r, 6, 0.2, 3.0))], &|g, v| Ok(g.log(v[0])))?;
    run("softplus", vec![m23(r)], &|g, v| Ok(g.softplus(v[0])))?;
    run("leaky_relu", vec![(vec![2, 3], away_from(r, 6, 2.0, &[0.0], 0.05))], &|g, v| {
        Ok(g.leaky_relu(v[0], 1.0 / 3.0))
    })?;
    run("clip", vec![(vec![3, 3], away_from(r, 9, 2.0, &[-1.0, 1.0], 0.05))], &|g, v| {
        Ok(g.clip(v[0], -1.0, 1.0))
    })?;
    run("log_softmax", vec![m23(r)], &|g, v| Ok(g.log_softmax(v[0])))?;
    run("sum", vec![m23(r)], &|g, v| Ok(g.sum(v[0])))?;
    run("mean", vec![m23(r)], &|g, v| Ok(g.mean(v[0])))?;
    run("sum_last", vec![m23(r)], &|g, v| g.sum_last(v[0]))?;
    run("concat", vec![m23(r), (vec![2, 2], uniform(r, 4, -1.0, 1.0))], &|g, v| g.concat(&[v[0], v[1]]))?;
    run("slice", vec![(vec![2, 5], uniform(r, 10, -1.0, 1.0))], &|g, v| g.slice(v[0], 1, 3))?;
    run("broadcast_rows", vec![(vec![3], uniform(r, 3, -1.0, 1.0))], &|g, v| {
        g.broadcast(v[0], Broadcast::LeadingBatch(4))
    })?;
    run("broadcast_cols", vec![(vec![3], uniform(r, 3, -1.0, 1.0))], &|g, v| {
        g.broadcast(v[0], Broadcast::TrailingFeature(2))
    })?;
    run(
        "affine",
        vec![m23(r), (vec![3, 2], uniform(r, 6, -1.0, 1.0)), (vec![2], uniform(r, 2, -1.0, 1.0))],
        &|g, v| g.affine(v[0], v[1], v[2]),
    )?;
    run(
        "gaussian_log_prob",
        vec![m23(r), m23(r), (vec![2, 3], uniform(r, 6, -1.0, 1.0))],
        &|g, v| DiagGaussian::new(g, v[0], v[2])?.log_prob(g, v[1]),
    )?;
    run(
        "gaussian_kl",
        vec![m23(r), (vec![2, 3], uniform(r, 6, -1.0, 1.0)), m23(r), (vec![2, 3], uniform(r, 6, -1.0, 1.0))],
        &|g, v| {
            let q = DiagGaussian::new(g, v[0], v[1])?;
            let p = DiagGaussian::new(g, v[2], v[3])?;
            q.kl(g, &p)
        },
    )?;
    run("gaussian_rsample", vec![m23(r), (vec![2, 3], uniform(r, 6, -1.0, 1.0))], &|g, v| {
        let d = DiagGaussian::new(g, v[0], v[1])?;
        let eps = g.constant(vec![2, 3], vec![0.3, -1.2, 0.8, 2.0, -0.1, 0.5])?;
        d.rsample(g, eps)
    })?;
    run("categorical_log_prob", vec![(vec![2, 4], uniform(r, 8, -2.0, 2.0))], &|g, v| {
        Categorical { logits: v[0] }.log_prob(g, &[3, 1])
    })?;
    run("bernoulli_log_prob", vec![(vec![2, 3], uniform(r, 6, -3.0, 3.0))], &|g, v| {
        let x = g.constant(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0])?;
        Bernoulli { logits: v[0] }.log_prob(g, x)
    })?;

    let (inp, hid) = (3, 2);
    let b = 1.0 / (hid as f64).sqrt();
    run(
        "lstm_step",
        vec![
            (vec![2, inp], uniform(r, 2 * inp, -1.0, 1.0)),
            (vec![2, hid], uniform(r, 2 * hid, -1.0, 1.0)),
            (vec![2, hid], uniform(r, 2 * hid, -1.0, 1.0)),
            (vec![inp, 4 * hid], uniform(r, inp * 4 * hid, -b, b)),
            (vec![hid, 4 * hid], uniform(r, hid * 4 * hid, -b, b)),
            (vec![4 * hid], uniform(r, 4 * hid, -b, b)),
        ],
        &|g, v| {
            let cell = LstmCell {
                input_size: inp,
                hidden_size: hid,
                w_input: ParamId(0),
                w_hidden: ParamId(1),
                bias: ParamId(2),
            };
            let p = ParamVars::from_vars(v[3..].to_vec());
            let (h, c) = lstm_step(g, &cell, &p, v[0], v[1], v[2])?;
            g.concat(&[h, c])
        },
    )?;
    Ok(out)
}

/// The small model used by [`check_model_loss`]: hidden 4, z 2, three steps,
/// batch of two (one sequence shorter than the other).
pub fn tiny_problem(kind: DataKind, seed: u64) -> Result<(ZForcingModel, F64Params, SequenceBatch, Noise)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        kind,
        width: if kind == DataKind::Frames { 3 } else { 1 },
        vocab_size: 5,
        embed_dim: 3,
        hidden: 4,
        z_dim: 2,
        head_hidden: 5,
        end_id: None,
    };
    let (model, store) = ZForcingModel::new(config.clone(), &mut rng)?;
    let mut params = F64Params::from(&store);
    // Non-zero biases and initial states so that no gradient is trivially zero.
    for v in params.values.iter_mut().flatten() {
        if *v == 0.0 {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    let obs = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Observation> {
        (0..n)
            .map(|_| match kind {
                DataKind::Frames => Observation::Frame((0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect()),
                DataKind::Tokens => Observation::Id(rng.random_range(0..5)),
                DataKind::Binary => Observation::Id(rng.random_range(0..2)),
            })
            .collect()
    };
    let seqs = vec![obs(&mut rng, 4), obs(&mut rng, 3)];
    let batch = SequenceBatch::from_observations(kind, config.width, &seqs);
    let noise = Noise::sample(&mut rng, batch.num_steps(), 2, config.z_dim);
    Ok((model, params, batch, noise))
}

/// Values of the total and primary objectives, and the training gradient
/// per parameter tensor.
pub fn model_loss(
    model: &ZForcingModel,
    params: &F64Params,
    batch: &SequenceBatch,
    noise: &Noise,
    weights: LossWeights,
) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let state = model.unroll_posterior(&mut g, &p, batch, noise)?;
    let obj = compute_loss(&mut g, &state, weights)?;
    let grads = model.gradients(&g, &p, &obj)?;
    Ok((g.scalar(obj.total), g.scalar(obj.primary), grads))
}

/// Checks the training gradient against central differences for every
/// parameter coordinate; one result per parameter tensor. Backward-network
/// parameters are compared with the derivative of the primary objective
/// only, all others with the derivative of the total.
pub fn check_model_loss(kind: DataKind, eps: f64, seed: u64) -> Result<Vec<CheckResult>> {
    let (model, params, batch, noise) = tiny_problem(kind, seed)?;
    let weights = LossWeights {
        alpha: 0.6,
        beta: 0.4,
        kl_weight: 0.7,
    };
    let (_, _, analytic) = model_loss(&model, &params, &batch, &noise, weights)?;
    let blocked: Vec<usize> = model.backward_network_params().iter().map(|id| id.index()).collect();
    let mut probe = params.clone();
    let mut results = Vec::new();
    for (i, name) in params.names.iter().enumerate() {
        let pick = |r: (f64, f64, Vec<Vec<f64>>)| if blocked.contains(&i) { r.1 } else { r.0 };
        let mut worst: f64 = 0.0;
        for j in 0..params.values[i].len() {
            let x = params.values[i][j];
            probe.values[i][j] = x + eps;
            let up = pick(model_loss(&model, &probe, &batch, &noise, weights)?);
            probe.values[i][j] = x - eps;
            let down = pick(model_loss(&model, &probe, &batch, &noise, weights)?);
            probe.values[i][j] = x;
            worst = worst.max(relative_error(analytic[i][j], (up - down) / (2.0 * eps)));
        }
        results.push(CheckResult {
            name: name.clone(),
            coordinates: params.values[i].len(),
            max_rel_error: worst,
        });
    }
    Ok(results)
}
