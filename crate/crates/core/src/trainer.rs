//! ADAM updates with global-norm clipping, the KL weight schedule, metric
//! logging and the training loop.

use std::fs::OpenOptions;
use std::path::Path;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{DataKind, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::{LossBreakdown, LossWeights, ZForcingModel};
use crate::params::{ParamSource, ParamStore};
use crate::rng::{stream_rng, Stream};

/// Linear KL weight ramp, clamped to `[start, cap]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlAnneal {
    pub enabled: bool,
    pub start: f64,
    pub increment: f64,
    pub cap: f64,
}

impl Default for KlAnneal {
    fn default() -> Self {
        KlAnneal {
            enabled: true,
            start: 0.2,
            increment: 0.00005,
            cap: 1.0,
        }
    }
}

impl KlAnneal {
    pub fn off() -> Self {
        KlAnneal {
            enabled: false,
            ..KlAnneal::default()
        }
    }
}

pub fn kl_weight_at(update: u64, schedule: &KlAnneal) -> f64 {
    if !schedule.enabled {
        return 1.0;
    }
    (schedule.start + schedule.increment * update as f64).clamp(schedule.start, schedule.cap)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected ADAM update from the gradients held in `params`.
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (_, name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_owned()));
            }
        }
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let t = params.get_mut(id);
        let Some(grad) = t.grad().map(<[f32]>::to_vec) else { continue };
        if grad.len() != m.len() {
            return Err(Error::shape("adam_step", &[m.len()], &[grad.len()]));
        }
        for (((p, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = *g as f64;
            let m_new = state.beta1 * *m as f64 + (1.0 - state.beta1) * g;
            let v_new = state.beta2 * *v as f64 + (1.0 - state.beta2) * g * g;
            *m = m_new as f32;
            *v = v_new as f32;
            let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + state.eps);
            *p = (*p as f64 - update) as f32;
        }
    }
    Ok(())
}

pub fn grad_norm(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let scale = (max_norm / norm) as f32;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if let Some(g) = params.get_mut(id).grad_mut() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub update: u64,
    pub rec: f64,
    pub kl: f64,
    pub aux: f64,
    pub bwd: f64,
    pub kl_weight: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub update: u64,
    pub split: String,
    pub elbo: f64,
    pub iwae: f64,
    pub k: usize,
}

pub const TRAIN_CSV_HEADER: [&str; 7] = ["update", "rec", "kl", "aux", "bwd", "kl_weight", "total"];
pub const EVAL_CSV_HEADER: [&str; 5] = ["update", "split", "elbo", "iwae", "k"];

/// Append-only record of training and evaluation metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub train: Vec<TrainRecord>,
    pub eval: Vec<EvalRecord>,
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<std::fs::File>> {
    let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(header)?;
    }
    Ok(w)
}

impl MetricLog {
    pub fn push_train(&mut self, r: TrainRecord) {
        debug_assert!(self.train.last().is_none_or(|l| l.update < r.update));
        self.train.push(r);
    }

    pub fn append_train_csv(path: &Path, records: &[TrainRecord]) -> Result<()> {
        let mut w = csv_writer(path, &TRAIN_CSV_HEADER)?;
        for r in records {
            w.write_record([
                r.update.to_string(),
                r.rec.to_string(),
                r.kl.to_string(),
                r.aux.to_string(),
                r.bwd.to_string(),
                r.kl_weight.to_string(),
                r.total.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("flushing metrics", e))
    }

    pub fn append_eval_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
        let mut w = csv_writer(path, &EVAL_CSV_HEADER)?;
        for r in records {
            w.write_record([
                r.update.to_string(),
                r.split.clone(),
                r.elbo.to_string(),
                r.iwae.to_string(),
                r.k.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("flushing metrics", e))
    }

    pub fn read_train_csv(path: &Path) -> Result<Vec<TrainRecord>> {
        let mut r = csv::Reader::from_path(path)?;
        let bad = |what: &str| Error::Data(format!("bad {what} in {}", path.display()));
        let mut out = Vec::new();
        for row in r.records() {
            let row = row?;
            let f = |i: usize| -> Result<f64> { row.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| bad(TRAIN_CSV_HEADER[i])) };
            out.push(TrainRecord {
                update: row.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("update"))?,
                rec: f(1)?,
                kl: f(2)?,
                aux: f(3)?,
                bwd: f(4)?,
                kl_weight: f(5)?,
                total: f(6)?,
            });
        }
        Ok(out)
    }

    pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRecord>> {
        let mut r = csv::Reader::from_path(path)?;
        let bad = |what: &str| Error::Data(format!("bad {what} in {}", path.display()));
        let mut out = Vec::new();
        for row in r.records() {
            let row = row?;
            out.push(EvalRecord {
                update: row.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("update"))?,
                split: row.get(1).ok_or_else(|| bad("split"))?.to_owned(),
                elbo: row.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("elbo"))?,
                iwae: row.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| bad("iwae"))?,
                k: row.get(4).and_then(|s| s.parse().ok()).ok_or_else(|| bad("k"))?,
            });
        }
        Ok(out)
    }
}

/// Dataset-level bounds: nats per sequence, plus token perplexities.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEval {
    pub k: usize,
    pub sequences: usize,
    pub predicted_steps: usize,
    pub elbo: f64,
    pub iwae: f64,
}

impl DatasetEval {
    pub fn elbo_perplexity(&self) -> f64 {
        (-self.elbo * self.sequences as f64 / self.predicted_steps.max(1) as f64).exp()
    }

    pub fn iwae_perplexity(&self) -> f64 {
        (-self.iwae * self.sequences as f64 / self.predicted_steps.max(1) as f64).exp()
    }
}

pub fn evaluate_dataset(
    model: &ZForcingModel,
    params: &impl ParamSource,
    data: &Dataset,
    batch_size: usize,
    k: usize,
    seed: u64,
    stream_index: u64,
) -> Result<DatasetEval> {
    let mut rng = stream_rng(seed, Stream::EvalNoise, stream_index);
    let (mut elbo, mut iwae, mut steps) = (0.0, 0.0, 0);
    for batch in data.batches(batch_size) {
        let r = model.evaluate(params, &batch, k, &mut rng)?;
        elbo += r.elbo.iter().sum::<f64>();
        iwae += r.iwae.iter().sum::<f64>();
        steps += r.steps.iter().sum::<usize>();
    }
    let n = data.len().max(1) as f64;
    Ok(DatasetEval {
        k,
        sequences: data.len(),
        predicted_steps: steps,
        elbo: elbo / n,
        iwae: iwae / n,
    })
}

/// Indices of the sequences used at `update`.
pub fn batch_indices(seed: u64, update: u64, n: usize, batch_size: usize) -> Vec<usize> {
    if batch_size >= n {
        return (0..n).collect();
    }
    let mut rng = stream_rng(seed, Stream::Data, update + 1);
    let mut idx = rand::seq::index::sample(&mut rng, n, batch_size).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Option<Checkpoint>,
    pub log: MetricLog,
    /// Why training stopped early, if it did.
    pub halted: Option<String>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: ZForcingModel,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Number of updates applied so far; also the index of the next update.
    pub update: u64,
    pub log: MetricLog,
    pub normalization: Option<Normalization>,
    pub best_valid_elbo: Option<f64>,
    pub best: Option<Checkpoint>,
    train: Dataset,
    valid: Option<Dataset>,
}

impl Trainer {
    /// Fresh model; `config.frame_width` / `vocab_size` must be resolved.
    pub fn new(
        config: TrainConfig,
        train: Dataset,
        valid: Option<Dataset>,
        end_id: Option<u32>,
        normalization: Option<Normalization>,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut init_rng = stream_rng(config.seed, Stream::Init, 0);
        let (model, params) = ZForcingModel::new(config.model_config(end_id), &mut init_rng)?;
        let adam = AdamState::new(&params);
        Ok(Trainer {
            config,
            model,
            params,
            adam,
            update: 0,
            log: MetricLog::default(),
            normalization,
            best_valid_elbo: None,
            best: None,
            train,
            valid,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, train: Dataset, valid: Option<Dataset>) -> Result<Self> {
        let (model, params) = ckpt.restore_model()?;
        Ok(Trainer {
            config: ckpt.config.clone(),
            model,
            params,
            adam: ckpt.adam.clone(),
            update: ckpt.updates,
            log: MetricLog::default(),
            normalization: ckpt.normalization,
            best_valid_elbo: ckpt.best_valid_elbo,
            best: None,
            train,
            valid,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            normalization: self.normalization,
            end_id: self.model.config.end_id,
            updates: self.update,
            best_valid_elbo: self.best_valid_elbo,
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn weights_at(&self, update: u64) -> LossWeights {
        LossWeights {
            alpha: self.config.alpha,
            beta: self.config.beta,
            kl_weight: kl_weight_at(update, &self.config.kl_anneal),
        }
    }

    /// Loss and gradients for update `u` without applying them.
    fn forward_backward(&mut self, u: u64) -> Result<LossBreakdown> {
        let idx = batch_indices(self.config.seed, u, self.train.len(), self.config.batch_size);
        let batch = self.train.batch(&idx);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let mut rng = stream_rng(self.config.seed, Stream::TrainNoise, u);
        let obj = self.model.loss(&mut g, &p, &batch, &mut rng, self.weights_at(u))?;
        if !obj.breakdown.weighted_total.is_finite() {
            return Err(Error::NonFiniteLoss(u));
        }
        let grads = self.model.gradients(&g, &p, &obj)?;
        self.params.set_grads(&grads)?;
        Ok(obj.breakdown)
    }

    /// Applies one update and returns its record.
    pub fn step(&mut self) -> Result<TrainRecord> {
        let u = self.update;
        let b = self.forward_backward(u)?;
        clip_grad_norm(&mut self.params, self.config.grad_clip_norm);
        adam_step(&mut self.params, &mut self.adam, self.config.learning_rate)?;
        self.update += 1;
        let record = TrainRecord {
            update: u,
            rec: b.reconstruction,
            kl: b.kl,
            aux: b.aux,
            bwd: b.backward_recon,
            kl_weight: self.weights_at(u).kl_weight,
            total: b.weighted_total,
        };
        self.log.push_train(record.clone());
        if self.config.eval_interval > 0 && self.update % self.config.eval_interval == 0 {
            self.validate()?;
        }
        Ok(record)
    }

    /// Validation ELBO/IWAE at the current update; keeps the best-ELBO snapshot.
    pub fn validate(&mut self) -> Result<Option<EvalRecord>> {
        let Some(valid) = &self.valid else { return Ok(None) };
        let ev = evaluate_dataset(
            &self.model,
            &self.params,
            valid,
            self.config.batch_size,
            self.config.eval_iwae_samples,
            self.config.seed,
            self.update,
        )?;
        let rec = EvalRecord {
            update: self.update,
            split: "valid".into(),
            elbo: ev.elbo,
            iwae: ev.iwae,
            k: ev.k,
        };
        self.log.eval.push(rec.clone());
        if ev.elbo.is_finite() && self.best_valid_elbo.is_none_or(|b| ev.elbo > b) {
            self.best_valid_elbo = Some(ev.elbo);
            self.best = Some(self.checkpoint());
        }
        Ok(Some(rec))
    }

    /// Runs until `config.max_updates` updates have been applied. Numerical
    /// failures stop the loop and are reported in `halted`; the parameters
    /// are those of the last successful update.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let mut halted = None;
        while self.update < self.config.max_updates {
            match self.step() {
                Ok(_) => {}
                Err(e @ (Error::NonFiniteLoss(_) | Error::NonFiniteGradient(_))) => {
                    halted = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(TrainOutcome {
            last: self.checkpoint(),
            best: self.best,
            log: self.log,
            halted,
        })
    }

    pub fn train_data(&self) -> &Dataset {
        &self.train
    }

    pub fn valid_data(&self) -> Option<&Dataset> {
        self.valid.as_ref()
    }
}

/// Builds a model from `config` and trains it for `config.max_updates` updates.
pub fn train(
    config: TrainConfig,
    train: Dataset,
    valid: Option<Dataset>,
    end_id: Option<u32>,
    normalization: Option<Normalization>,
) -> Result<TrainOutcome> {
    let mut config = config;
    if config.data_kind == DataKind::Frames && config.frame_width == 0 {
        config.frame_width = train.width();
    }
    Trainer::new(config, train, valid, end_id, normalization)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn schedule_matches_ramp() {
        let s = KlAnneal::default();
        assert_eq!(kl_weight_at(0, &s), 0.2);
        assert_eq!(kl_weight_at(16_000, &s), 1.0);
        assert_eq!(kl_weight_at(1_000_000, &s), 1.0);
        assert_eq!(kl_weight_at(0, &KlAnneal::off()), 1.0);
        let mut prev = 0.0;
        for u in (0..40_000).step_by(7) {
            let w = kl_weight_at(u, &s);
            assert!(w >= prev && (0.2..=1.0).contains(&w));
            prev = w;
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_store(0.7);
        p.zero_grads();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, 0.1).unwrap();
        assert_eq!(p.get(p.ids().next().unwrap()).data(), &[0.7]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m1 = 0.1, v1 = 0.001; bias-corrected both are 1, so the step is lr / (1 + eps).
        let mut p = scalar_store(1.0);
        let id = p.ids().next().unwrap();
        p.get_mut(id).accumulate_grad(&[1.0]).unwrap();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, 0.1).unwrap();
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get(id).data()[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_store(1.0);
        let id = p.ids().next().unwrap();
        p.get_mut(id).accumulate_grad(&[f64::NAN]).unwrap();
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &mut st, 0.1).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "w"));
        assert_eq!(p.get(id).data(), &[1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut p = ParamStore::new();
        let a = p.add("a", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let b = p.add("b", Tensor::new(vec![1], vec![0.0]).unwrap());
        p.get_mut(a).accumulate_grad(&[30.0, -40.0]).unwrap();
        p.get_mut(b).accumulate_grad(&[120.0]).unwrap();
        let before = clip_grad_norm(&mut p, 5.0);
        assert!((before - 130.0).abs() < 1e-9);
        assert!(grad_norm(&p) <= 5.0 + 1e-6);
        let small = clip_grad_norm(&mut p, 100.0);
        assert!((small - grad_norm(&p)).abs() < 1e-12);
    }

    #[test]
    fn batch_indices_are_distinct_and_reproducible() {
        let a = batch_indices(3, 10, 50, 8);
        assert_eq!(a, batch_indices(3, 10, 50, 8));
        let mut d = a.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 8);
        assert_eq!(batch_indices(3, 10, 5, 8), vec![0, 1, 2, 3, 4]);
    }
}
