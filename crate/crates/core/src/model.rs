//! The stochastic recurrent model: a forward LSTM whose input at every step
//! is the observation concatenated with a Gaussian latent, a backward LSTM
//! summarising the future for the approximate posterior, a conditional prior,
//! and two auxiliary decoders (latent -> backward state, backward state ->
//! observation).
//!
//! Indexing, for a sequence of `L` observations and `T = L - 1` steps
//! `s = 0..T`:
//!
//! ```text
//! b[s]      = bwd(x[s+1], b[s+1]),  b[L-1] = learned initial state
//! prior[s]  = f_p(h[s])
//! post[s]   = f_q(h[s], b[s])
//! z[s]      ~ post[s]
//! h[s+1]    = fwd([embed(x[s]), z[s]], h[s])
//! rec[s]    = log p(x[s+1] | f_o(h[s+1]))
//! aux[s]    = log N(stop_grad(b[s]); f_a(z[s]))
//! bwd[s]    = log p(x[s] | f_b(b[s]))
//! ```

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{log_sum_exp, sigmoid, Graph, Var};
use crate::data::{DataKind, Observation, SequenceBatch};
use crate::distributions::{Bernoulli, Categorical, DiagGaussian, LOG_SIGMA_MAX, LOG_SIGMA_MIN};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSource, ParamStore, ParamVars};
use crate::recurrent::{BackwardStatePath, ForwardStatePath, LstmCell, LstmState, StepMask};

/// Slope and clip bound of the head nonlinearity.
pub const LEAKY_SLOPE: f64 = 1.0 / 3.0;
pub const LEAKY_CLIP: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: DataKind,
    /// Frame width (frames only).
    pub width: usize,
    /// Vocabulary size (tokens only).
    pub vocab_size: usize,
    /// Token embedding width (tokens only).
    pub embed_dim: usize,
    pub hidden: usize,
    pub z_dim: usize,
    pub head_hidden: usize,
    /// End-of-sequence id; generation halts when it is produced.
    pub end_id: Option<u32>,
}

impl ModelConfig {
    pub fn input_size(&self) -> usize {
        match self.kind {
            DataKind::Frames => self.width,
            DataKind::Tokens => self.embed_dim,
            DataKind::Binary => 1,
        }
    }

    pub fn output_size(&self) -> usize {
        match self.kind {
            DataKind::Frames => 2 * self.width,
            DataKind::Tokens => self.vocab_size,
            DataKind::Binary => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut dims = vec![("hidden", self.hidden), ("z_dim", self.z_dim), ("head_hidden", self.head_hidden)];
        match self.kind {
            DataKind::Frames => dims.push(("frame_width", self.width)),
            DataKind::Tokens => {
                dims.push(("vocab_size", self.vocab_size));
                dims.push(("embed_dim", self.embed_dim));
            }
            DataKind::Binary => {}
        }
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadRole {
    Prior,
    Posterior,
    Output,
    Auxiliary,
    BackwardOutput,
}

impl HeadRole {
    fn prefix(self) -> &'static str {
        match self {
            HeadRole::Prior => "prior",
            HeadRole::Posterior => "posterior",
            HeadRole::Output => "output",
            HeadRole::Auxiliary => "auxiliary",
            HeadRole::BackwardOutput => "backward_output",
        }
    }
}

/// `affine -> leaky_relu(1/3) -> clip(+-3) -> affine`
#[derive(Clone, Debug)]
pub struct HeadNet {
    pub role: HeadRole,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl HeadNet {
    fn new(store: &mut ParamStore, role: HeadRole, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let p = role.prefix();
        let w1 = store.add_uniform(format!("{p}.w1"), vec![input, hidden], 1.0 / (input as f32).sqrt(), rng);
        let b1 = store.add_zeros(format!("{p}.b1"), vec![hidden]);
        let w2 = store.add_uniform(format!("{p}.w2"), vec![hidden, output], 1.0 / (hidden as f32).sqrt(), rng);
        let b2 = store.add_zeros(format!("{p}.b2"), vec![output]);
        HeadNet {
            role,
            input,
            hidden,
            output,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
        let a = g.affine(x, p.get(self.w1), p.get(self.b1))?;
        let a = g.leaky_relu(a, LEAKY_SLOPE);
        let a = g.clip(a, -LEAKY_CLIP, LEAKY_CLIP);
        g.affine(a, p.get(self.w2), p.get(self.b2))
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Standard-normal draws for the posterior, one `[batch * z_dim]` block per step.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub batch: usize,
    pub z_dim: usize,
    pub steps: Vec<Vec<f64>>,
}

impl Noise {
    pub fn zeros(steps: usize, batch: usize, z_dim: usize) -> Self {
        Noise {
            batch,
            z_dim,
            steps: vec![vec![0.0; batch * z_dim]; steps],
        }
    }

    pub fn sample(rng: &mut impl Rng, steps: usize, batch: usize, z_dim: usize) -> Self {
        Noise {
            batch,
            z_dim,
            steps: (0..steps).map(|_| crate::rng::standard_normals(rng, batch * z_dim)).collect(),
        }
    }
}

/// Everything produced for one step of the posterior unroll. Log-densities
/// and KL are `[batch]` vectors, unmasked.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub prior: DiagGaussian,
    pub posterior: DiagGaussian,
    pub z: Var,
    pub output: Var,
    pub auxiliary: DiagGaussian,
    pub rec: Var,
    pub kl: Var,
    pub aux: Var,
    /// Absent where the target would be the start delimiter.
    pub bwd: Option<Var>,
    pub mask: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct UnrolledState {
    pub batch_size: usize,
    pub forward: ForwardStatePath,
    pub backward: BackwardStatePath,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub kl_weight: f64,
}

impl LossWeights {
    /// Plain ELBO: no auxiliary terms, full KL.
    pub fn elbo() -> Self {
        LossWeights {
            alpha: 0.0,
            beta: 0.0,
            kl_weight: 1.0,
        }
    }
}

/// Per-sequence sums (nats, averaged over the batch) and per-step averages.
/// `rec`, `aux` and `bwd` are log-likelihoods; `kl` is a divergence.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub aux: f64,
    pub backward_recon: f64,
    /// `-(rec + alpha*aux + beta*bwd - kl_weight*kl)`, the minimised quantity.
    pub weighted_total: f64,
    pub per_step_reconstruction: f64,
    pub per_step_kl: f64,
    pub per_step_aux: f64,
    pub per_step_backward_recon: f64,
}

impl LossBreakdown {
    pub fn elbo(&self) -> f64 {
        self.reconstruction - self.kl
    }
}

/// The minimised scalar, split so that the auxiliary part can be kept away
/// from the backward network (see [`ZForcingModel::gradients`]).
#[derive(Clone, Debug)]
pub struct Objective {
    /// `primary + auxiliary`
    pub total: Var,
    /// `-(rec + beta*bwd - kl_weight*kl) / batch`
    pub primary: Var,
    /// `-alpha*aux / batch`
    pub auxiliary: Var,
    pub weights: LossWeights,
    pub breakdown: LossBreakdown,
}

/// One step of observations across the batch.
#[derive(Clone, Debug)]
enum StepObs {
    Values(Vec<f64>),
    Ids(Vec<u32>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Debug)]
pub struct ZForcingModel {
    pub config: ModelConfig,
    forward_cell: LstmCell,
    backward_cell: LstmCell,
    fwd_h0: ParamId,
    fwd_c0: ParamId,
    bwd_h0: ParamId,
    bwd_c0: ParamId,
    fwd_embed: Option<ParamId>,
    bwd_embed: Option<ParamId>,
    prior: HeadNet,
    posterior: HeadNet,
    output: HeadNet,
    auxiliary: HeadNet,
    backward_output: HeadNet,
}

/// Greedy or stochastic choice of each generated observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decode {
    Argmax,
    Sample,
}

impl std::str::FromStr for Decode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Decode::Argmax),
            "sample" => Ok(Decode::Sample),
            other => Err(Error::InvalidArgument(format!("unknown decode mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    pub steps: usize,
    pub decode: Decode,
    /// When false the prior's mean is used for every latent.
    pub latent_noise: bool,
}

/// Per-step latent vectors of one sequence, concatenated in step order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEncoding {
    pub z_dim: usize,
    pub values: Vec<f64>,
}

impl LatentEncoding {
    pub fn steps(&self) -> usize {
        self.values.len() / self.z_dim.max(1)
    }

    pub fn step(&self, s: usize) -> &[f64] {
        &self.values[s * self.z_dim..(s + 1) * self.z_dim]
    }
}

/// Bounds for one batch, per sequence, in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub k: usize,
    /// Analytic-KL ELBO averaged over the `k` posterior draws.
    pub elbo: Vec<f64>,
    pub iwae: Vec<f64>,
    /// Prediction steps per sequence.
    pub steps: Vec<usize>,
}

impl ZForcingModel {
    /// Registers every parameter in a fresh store.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let h = config.hidden;
        let z = config.z_dim;
        let hh = config.head_hidden;
        let inp = config.input_size();

        let (fwd_embed, bwd_embed) = if config.kind == DataKind::Tokens {
            let shape = vec![config.vocab_size, config.embed_dim];
            (
                Some(store.add_uniform("forward.embed", shape.clone(), 0.1, rng)),
                Some(store.add_uniform("backward.embed", shape, 0.1, rng)),
            )
        } else {
            (None, None)
        };
        let forward_cell = LstmCell::new(&mut store, "forward.lstm", inp + z, h, rng);
        let fwd_h0 = store.add_zeros("forward.h0", vec![h]);
        let fwd_c0 = store.add_zeros("forward.c0", vec![h]);
        let backward_cell = LstmCell::new(&mut store, "backward.lstm", inp, h, rng);
        let bwd_h0 = store.add_zeros("backward.h0", vec![h]);
        let bwd_c0 = store.add_zeros("backward.c0", vec![h]);

        let out = config.output_size();
        let prior = HeadNet::new(&mut store, HeadRole::Prior, h, hh, 2 * z, rng);
        let posterior = HeadNet::new(&mut store, HeadRole::Posterior, 2 * h, hh, 2 * z, rng);
        let output = HeadNet::new(&mut store, HeadRole::Output, h, hh, out, rng);
        let auxiliary = HeadNet::new(&mut store, HeadRole::Auxiliary, z, hh, 2 * h, rng);
        let backward_output = HeadNet::new(&mut store, HeadRole::BackwardOutput, h, hh, out, rng);

        Ok((
            ZForcingModel {
                config,
                forward_cell,
                backward_cell,
                fwd_h0,
                fwd_c0,
                bwd_h0,
                bwd_c0,
                fwd_embed,
                bwd_embed,
                prior,
                posterior,
                output,
                auxiliary,
                backward_output,
            },
            store,
        ))
    }

    pub fn head(&self, role: HeadRole) -> &HeadNet {
        match role {
            HeadRole::Prior => &self.prior,
            HeadRole::Posterior => &self.posterior,
            HeadRole::Output => &self.output,
            HeadRole::Auxiliary => &self.auxiliary,
            HeadRole::BackwardOutput => &self.backward_output,
        }
    }

    pub fn forward_cell(&self) -> &LstmCell {
        &self.forward_cell
    }

    pub fn backward_cell(&self) -> &LstmCell {
        &self.backward_cell
    }

    /// Parameters of the backward recurrent network (cell, initial state,
    /// embedding). The backward-output head is not included.
    pub fn backward_network_params(&self) -> Vec<ParamId> {
        let c = &self.backward_cell;
        let mut ids = vec![c.w_input, c.w_hidden, c.bias, self.bwd_h0, self.bwd_c0];
        ids.extend(self.bwd_embed);
        ids
    }

    fn init_state(&self, g: &mut Graph, p: &ParamVars, dir: Direction, batch: usize) -> Result<LstmState> {
        let (h0, c0) = match dir {
            Direction::Forward => (self.fwd_h0, self.fwd_c0),
            Direction::Backward => (self.bwd_h0, self.bwd_c0),
        };
        Ok(LstmState {
            h: g.broadcast_rows(p.get(h0), batch)?,
            c: g.broadcast_rows(p.get(c0), batch)?,
        })
    }

    /// Initial forward state broadcast over `batch` rows.
    pub fn forward_initial_state(&self, g: &mut Graph, p: &ParamVars, batch: usize) -> Result<LstmState> {
        self.init_state(g, p, Direction::Forward, batch)
    }

    /// Initial backward state broadcast over `batch` rows.
    pub fn backward_initial_state(&self, g: &mut Graph, p: &ParamVars, batch: usize) -> Result<LstmState> {
        self.init_state(g, p, Direction::Backward, batch)
    }

    fn step_obs(&self, batch: &SequenceBatch, t: usize) -> StepObs {
        match self.config.kind {
            DataKind::Tokens => StepObs::Ids(batch.ids(t)),
            _ => StepObs::Values(batch.values(t)),
        }
    }

    fn obs_from(&self, items: &[&Observation]) -> Result<StepObs> {
        match self.config.kind {
            DataKind::Tokens => items
                .iter()
                .map(|o| o.id().ok_or_else(|| Error::InvalidArgument("expected token id".into())))
                .collect::<Result<_>>()
                .map(StepObs::Ids),
            DataKind::Binary => items
                .iter()
                .map(|o| match o {
                    Observation::Id(b) if *b <= 1 => Ok(*b as f64),
                    _ => Err(Error::InvalidArgument("expected a 0/1 observation".into())),
                })
                .collect::<Result<_>>()
                .map(StepObs::Values),
            DataKind::Frames => {
                let mut v = Vec::new();
                for o in items {
                    match o {
                        Observation::Frame(f) if f.len() == self.config.width => {
                            v.extend(f.iter().map(|&x| x as f64))
                        }
                        _ => {
                            return Err(Error::InvalidArgument(format!(
                                "expected a frame of width {}",
                                self.config.width
                            )))
                        }
                    }
                }
                Ok(StepObs::Values(v))
            }
        }
    }

    fn embed(&self, g: &mut Graph, p: &ParamVars, dir: Direction, obs: &StepObs) -> Result<Var> {
        match obs {
            StepObs::Values(v) => {
                let w = self.config.input_size();
                g.constant(vec![v.len() / w, w], v.clone())
            }
            StepObs::Ids(ids) => {
                let table = match dir {
                    Direction::Forward => self.fwd_embed,
                    Direction::Backward => self.bwd_embed,
                }
                .expect("token model has embeddings");
                let v = self.config.vocab_size;
                let mut onehot = vec![0.0; ids.len() * v];
                for (r, &id) in ids.iter().enumerate() {
                    if id as usize >= v {
                        return Err(Error::shape("embed", &[v], &[id as usize]));
                    }
                    onehot[r * v + id as usize] = 1.0;
                }
                let oh = g.constant(vec![ids.len(), v], onehot)?;
                g.matmul(oh, p.get(table))
            }
        }
    }

    fn obs_log_prob(&self, g: &mut Graph, raw: Var, target: &StepObs) -> Result<Var> {
        match (self.config.kind, target) {
            (DataKind::Frames, StepObs::Values(v)) => {
                let w = self.config.width;
                let x = g.constant(vec![v.len() / w, w], v.clone())?;
                DiagGaussian::from_packed(g, raw, w)?.log_prob(g, x)
            }
            (DataKind::Binary, StepObs::Values(v)) => {
                let x = g.constant(vec![v.len(), 1], v.clone())?;
                Bernoulli { logits: raw }.log_prob(g, x)
            }
            (DataKind::Tokens, StepObs::Ids(ids)) => Categorical { logits: raw }.log_prob(g, ids),
            _ => unreachable!("observation type follows data kind"),
        }
    }

    fn latent_gaussian(&self, g: &mut Graph, raw: Var) -> Result<DiagGaussian> {
        DiagGaussian::from_packed(g, raw, self.config.z_dim)
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        if batch.batch_size() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if batch.kind != self.config.kind {
            return Err(Error::Config(format!(
                "batch holds {} data but the model expects {}",
                batch.kind, self.config.kind
            )));
        }
        if batch.kind == DataKind::Frames && batch.width != self.config.width {
            return Err(Error::Config(format!(
                "frame width {} does not match model width {}",
                batch.width, self.config.width
            )));
        }
        Ok(())
    }

    /// Backward pass over the batch followed by the left-to-right posterior
    /// unroll with reparametrized latents.
    pub fn unroll_posterior(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        batch: &SequenceBatch,
        noise: &Noise,
    ) -> Result<UnrolledState> {
        self.check_batch(batch)?;
        let bsz = batch.batch_size();
        let steps = batch.num_steps();
        let z_dim = self.config.z_dim;
        if noise.steps.len() < steps || noise.batch != bsz || noise.z_dim != z_dim {
            return Err(Error::InvalidArgument(format!(
                "noise covers {} steps x {} rows x {} dims; need {steps} x {bsz} x {z_dim}",
                noise.steps.len(),
                noise.batch,
                noise.z_dim
            )));
        }

        let obs: Vec<StepObs> = (0..batch.max_len).map(|t| self.step_obs(batch, t)).collect();
        let valid: Vec<StepMask> = (0..batch.max_len)
            .map(|t| StepMask::new(g, &batch.mask(t)))
            .collect::<Result<_>>()?;

        let bwd_inputs: Vec<Var> = obs
            .iter()
            .map(|o| self.embed(g, p, Direction::Backward, o))
            .collect::<Result<_>>()?;
        let bwd_init = self.init_state(g, p, Direction::Backward, bsz)?;
        let backward = crate::recurrent::backward_unroll(g, &self.backward_cell, p, bwd_init, &bwd_inputs, &valid)?;

        let fwd_init = self.init_state(g, p, Direction::Forward, bsz)?;
        let mut forward = ForwardStatePath {
            h: vec![fwd_init.h],
            c: vec![fwd_init.c],
        };
        let mut records = Vec::with_capacity(steps);
        for s in 0..steps {
            let (h_prev, c_prev) = (forward.h[s], forward.c[s]);
            let b = backward.b[s];

            let prior_raw = self.prior.forward(g, p, h_prev)?;
            let prior = self.latent_gaussian(g, prior_raw)?;
            let q_in = g.concat(&[h_prev, b])?;
            let post_raw = self.posterior.forward(g, p, q_in)?;
            let posterior = self.latent_gaussian(g, post_raw)?;
            let eps = g.constant(vec![bsz, z_dim], noise.steps[s].clone())?;
            let z = posterior.rsample(g, eps)?;

            let x_emb = self.embed(g, p, Direction::Forward, &obs[s])?;
            let cell_in = g.concat(&[x_emb, z])?;
            let (h_new, c_new) = self.forward_cell.step(g, p, cell_in, h_prev, c_prev)?;
            let h = valid[s + 1].blend(g, h_new, h_prev)?;
            let c = valid[s + 1].blend(g, c_new, c_prev)?;
            forward.h.push(h);
            forward.c.push(c);

            let output = self.output.forward(g, p, h)?;
            let rec = self.obs_log_prob(g, output, &obs[s + 1])?;
            let kl = posterior.kl(g, &prior)?;

            let aux_raw = self.auxiliary.forward(g, p, z)?;
            let auxiliary = DiagGaussian::from_packed(g, aux_raw, self.config.hidden)?;
            let b_target = g.stop_gradient(b);
            let aux = auxiliary.log_prob(g, b_target)?;

            let bwd = if self.config.kind == DataKind::Tokens && s == 0 {
                None
            } else {
                let raw = self.backward_output.forward(g, p, b)?;
                Some(self.obs_log_prob(g, raw, &obs[s])?)
            };

            records.push(StepRecord {
                prior,
                posterior,
                z,
                output,
                auxiliary,
                rec,
                kl,
                aux,
                bwd,
                mask: batch.step_mask(s),
            });
        }
        Ok(UnrolledState {
            batch_size: bsz,
            forward,
            backward,
            steps: records,
        })
    }

    /// Gradient of `obj.total` for every parameter, except that the
    /// auxiliary part contributes nothing to the backward network: neither
    /// through its target nor through the latent sampled from the posterior,
    /// which reads the backward states.
    pub fn gradients(&self, g: &Graph, p: &ParamVars, obj: &Objective) -> Result<Vec<Vec<f64>>> {
        let primary = g.backward(obj.primary)?;
        let mut out: Vec<Vec<f64>> = p.vars().iter().map(|&v| primary.wrt(v)).collect();
        if obj.weights.alpha != 0.0 {
            let aux = g.backward(obj.auxiliary)?;
            let blocked: Vec<usize> = self.backward_network_params().iter().map(|id| id.index()).collect();
            for (i, (&v, acc)) in p.vars().iter().zip(out.iter_mut()).enumerate() {
                if blocked.contains(&i) {
                    continue;
                }
                if let Some(d) = aux.get(v) {
                    acc.iter_mut().zip(d).for_each(|(a, x)| *a += x);
                }
            }
        }
        Ok(out)
    }

    /// Unroll with fresh noise drawn from `rng`, then the weighted loss.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        batch: &SequenceBatch,
        rng: &mut impl Rng,
        weights: LossWeights,
    ) -> Result<Objective> {
        let noise = Noise::sample(rng, batch.num_steps(), batch.batch_size(), self.config.z_dim);
        let state = self.unroll_posterior(g, p, batch, &noise)?;
        compute_loss(g, &state, weights)
    }

    /// Per-sequence `log p(x, z) - log q(z | x)` for one posterior draw.
    pub fn log_weights(&self, params: &impl ParamSource, batch: &SequenceBatch, noise: &Noise) -> Result<Vec<f64>> {
        Ok(self.sample_terms(params, batch, noise)?.0)
    }

    /// Returns `(log_weight, analytic_elbo)` per sequence for one draw.
    fn sample_terms(
        &self,
        params: &impl ParamSource,
        batch: &SequenceBatch,
        noise: &Noise,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let state = self.unroll_posterior(&mut g, &p, batch, noise)?;
        let bsz = batch.batch_size();
        let mut log_w = vec![0.0; bsz];
        let mut elbo = vec![0.0; bsz];
        for step in &state.steps {
            let lp = step.prior.log_prob(&mut g, step.z)?;
            let lq = step.posterior.log_prob(&mut g, step.z)?;
            let (rec, kl) = (g.value(step.rec), g.value(step.kl));
            let (lp, lq) = (g.value(lp), g.value(lq));
            for b in 0..bsz {
                if step.mask[b] > 0.0 {
                    log_w[b] += rec[b] + lp[b] - lq[b];
                    elbo[b] += rec[b] - kl[b];
                }
            }
        }
        Ok((log_w, elbo))
    }

    /// ELBO and importance-weighted bound with `k` posterior draws.
    pub fn evaluate(
        &self,
        params: &impl ParamSource,
        batch: &SequenceBatch,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<EvalResult> {
        if k < 1 {
            return Err(Error::InvalidArgument("IWAE needs at least one sample".into()));
        }
        let bsz = batch.batch_size();
        let mut weights = vec![Vec::with_capacity(k); bsz];
        let mut elbo = vec![0.0; bsz];
        for _ in 0..k {
            let noise = Noise::sample(rng, batch.num_steps(), bsz, self.config.z_dim);
            let (lw, e) = self.sample_terms(params, batch, &noise)?;
            for b in 0..bsz {
                weights[b].push(lw[b]);
                elbo[b] += e[b] / k as f64;
            }
        }
        let iwae = weights
            .iter()
            .map(|w| log_sum_exp(w) - (k as f64).ln())
            .collect();
        Ok(EvalResult {
            k,
            elbo,
            iwae,
            steps: batch.lengths.iter().map(|l| l.saturating_sub(1)).collect(),
        })
    }

    /// `log (1/K) sum_k exp(log w_k)` per sequence.
    pub fn iwae_bound(
        &self,
        params: &impl ParamSource,
        batch: &SequenceBatch,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        Ok(self.evaluate(params, batch, k, rng)?.iwae)
    }

    fn choose(&self, raw: &[f64], decode: Decode, rng: &mut impl Rng) -> Observation {
        match self.config.kind {
            DataKind::Frames => {
                let w = self.config.width;
                let frame = (0..w)
                    .map(|d| {
                        let mu = raw[d];
                        match decode {
                            Decode::Argmax => mu as f32,
                            Decode::Sample => {
                                let ls = raw[w + d].clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX);
                                let e: f64 = StandardNormal.sample(rng);
                                (mu + ls.exp() * e) as f32
                            }
                        }
                    })
                    .collect();
                Observation::Frame(frame)
            }
            DataKind::Binary => {
                let p1 = sigmoid(raw[0]);
                let bit = match decode {
                    Decode::Argmax => p1 > 0.5,
                    Decode::Sample => rng.random::<f64>() < p1,
                };
                Observation::Id(u32::from(bit))
            }
            DataKind::Tokens => {
                let id = match decode {
                    Decode::Argmax => {
                        let mut best = 0;
                        for (i, &v) in raw.iter().enumerate() {
                            if v > raw[best] {
                                best = i;
                            }
                        }
                        best
                    }
                    Decode::Sample => {
                        let lse = log_sum_exp(raw);
                        let mut u = rng.random::<f64>();
                        let mut pick = raw.len() - 1;
                        for (i, &v) in raw.iter().enumerate() {
                            u -= (v - lse).exp();
                            if u < 0.0 {
                                pick = i;
                                break;
                            }
                        }
                        pick
                    }
                };
                Observation::Id(id as u32)
            }
        }
    }

    fn is_end(&self, o: &Observation) -> bool {
        matches!((o, self.config.end_id), (Observation::Id(i), Some(e)) if *i == e)
    }

    /// Ancestral sampling: latents from the conditional prior, observations
    /// from the output head. The prefix is consumed first; the returned
    /// sequence is the continuation only.
    pub fn unroll_prior(
        &self,
        params: &impl ParamSource,
        prefix: &[Observation],
        opts: GenerateOptions,
        rng: &mut impl Rng,
    ) -> Result<Vec<Observation>> {
        if opts.steps < 1 {
            return Err(Error::InvalidArgument("generation needs at least one step".into()));
        }
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("generation needs a non-empty prefix".into()));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let init = self.init_state(&mut g, &p, Direction::Forward, 1)?;
        let (mut h, mut c) = (init.h, init.c);
        let mut generated = Vec::new();
        let mut current = prefix[0].clone();
        let mut consumed = 0;
        loop {
            let prior_raw = self.prior.forward(&mut g, &p, h)?;
            let prior = self.latent_gaussian(&mut g, prior_raw)?;
            let eps = if opts.latent_noise {
                crate::rng::standard_normals(rng, self.config.z_dim)
            } else {
                vec![0.0; self.config.z_dim]
            };
            let eps = g.constant(vec![1, self.config.z_dim], eps)?;
            let z = prior.rsample(&mut g, eps)?;
            let x = self.obs_from(&[&current])?;
            let x_emb = self.embed(&mut g, &p, Direction::Forward, &x)?;
            let cell_in = g.concat(&[x_emb, z])?;
            (h, c) = self.forward_cell.step(&mut g, &p, cell_in, h, c)?;
            consumed += 1;
            if consumed < prefix.len() {
                current = prefix[consumed].clone();
                continue;
            }
            let raw = self.output.forward(&mut g, &p, h)?;
            let next = self.choose(g.value(raw), opts.decode, rng);
            let stop = self.is_end(&next);
            generated.push(next.clone());
            if stop || generated.len() >= opts.steps {
                break;
            }
            current = next;
        }
        Ok(generated)
    }

    /// Posterior means of every step's latent for one sequence.
    pub fn encode_posterior_mean(&self, params: &impl ParamSource, seq: &[Observation]) -> Result<LatentEncoding> {
        let batch = SequenceBatch::from_observations(self.config.kind, self.config.width, &[seq.to_vec()]);
        let noise = Noise::zeros(batch.num_steps(), 1, self.config.z_dim);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let state = self.unroll_posterior(&mut g, &p, &batch, &noise)?;
        let mut values = Vec::with_capacity(state.steps.len() * self.config.z_dim);
        for step in &state.steps {
            values.extend_from_slice(g.value(step.z));
        }
        Ok(LatentEncoding {
            z_dim: self.config.z_dim,
            values,
        })
    }

    /// Runs the forward network from `start` with step `s` using latent
    /// `min(s, n-1)` of `latents`, feeding back each decoded observation.
    /// Stops after the end token or `max_steps` outputs.
    pub fn decode_latents(
        &self,
        params: &impl ParamSource,
        start: &Observation,
        latents: &LatentEncoding,
        decode: Decode,
        max_steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Observation>> {
        if latents.z_dim != self.config.z_dim || latents.steps() == 0 {
            return Err(Error::InvalidArgument(format!(
                "latent encoding has {} steps of width {}; model z_dim is {}",
                latents.steps(),
                latents.z_dim,
                self.config.z_dim
            )));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let init = self.init_state(&mut g, &p, Direction::Forward, 1)?;
        let (mut h, mut c) = (init.h, init.c);
        let mut current = start.clone();
        let mut out = Vec::new();
        for s in 0..max_steps {
            let zs = latents.step(s.min(latents.steps() - 1)).to_vec();
            let z = g.constant(vec![1, self.config.z_dim], zs)?;
            let x = self.obs_from(&[&current])?;
            let x_emb = self.embed(&mut g, &p, Direction::Forward, &x)?;
            let cell_in = g.concat(&[x_emb, z])?;
            (h, c) = self.forward_cell.step(&mut g, &p, cell_in, h, c)?;
            let raw = self.output.forward(&mut g, &p, h)?;
            let next = self.choose(g.value(raw), decode, rng);
            let stop = self.is_end(&next);
            out.push(next.clone());
            if stop {
                break;
            }
            current = next;
        }
        Ok(out)
    }
}

/// Masked sums of the per-step terms, averaged over the batch, combined
/// into the minimised objective `-(rec + alpha*aux + beta*bwd - kl_weight*kl)`.
pub fn compute_loss(g: &mut Graph, state: &UnrolledState, w: LossWeights) -> Result<Objective> {
    let bsz = state.batch_size as f64;
    let mut sums: [Vec<Var>; 4] = Default::default();
    let (mut steps, mut bwd_steps) = (0.0, 0.0);
    for step in &state.steps {
        let m = g.constant(vec![step.mask.len()], step.mask.clone())?;
        let n: f64 = step.mask.iter().sum();
        steps += n;
        for (slot, term) in [(0, Some(step.rec)), (1, Some(step.kl)), (2, Some(step.aux)), (3, step.bwd)] {
            if let Some(v) = term {
                let masked = g.mul(v, m)?;
                sums[slot].push(g.sum(masked));
            }
        }
        if step.bwd.is_some() {
            bwd_steps += n;
        }
    }
    let mut totals = [None; 4];
    let mut values = [0.0; 4];
    for (i, parts) in sums.iter().enumerate() {
        let mut acc: Option<Var> = None;
        for &v in parts {
            acc = Some(match acc {
                None => v,
                Some(a) => g.add(a, v)?,
            });
        }
        let acc = acc.unwrap_or_else(|| g.scalar_constant(0.0));
        values[i] = g.scalar(acc);
        totals[i] = Some(acc);
    }
    let [rec, kl, aux, bwd] = totals.map(Option::unwrap);

    let aux_w = g.scale(aux, w.alpha);
    let bwd_w = g.scale(bwd, w.beta);
    let kl_w = g.scale(kl, w.kl_weight);
    let t = g.add(rec, bwd_w)?;
    let t = g.sub(t, kl_w)?;
    let primary = g.scale(t, -1.0 / bsz);
    let auxiliary = g.scale(aux_w, -1.0 / bsz);
    let total = g.add(primary, auxiliary)?;

    let per = |v: f64, n: f64| if n > 0.0 { v / n } else { 0.0 };
    let breakdown = LossBreakdown {
        reconstruction: values[0] / bsz,
        kl: values[1] / bsz,
        aux: values[2] / bsz,
        backward_recon: values[3] / bsz,
        weighted_total: g.scalar(total),
        per_step_reconstruction: per(values[0], steps),
        per_step_kl: per(values[1], steps),
        per_step_aux: per(values[2], steps),
        per_step_backward_recon: per(values[3], bwd_steps),
    };
    Ok(Objective {
        total,
        primary,
        auxiliary,
        weights: w,
        breakdown,
    })
}
