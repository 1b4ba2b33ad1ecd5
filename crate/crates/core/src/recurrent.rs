//! LSTM cell and the two unroll directions.
//!
//! Masks are per-row `[batch]` constants holding 0 or 1. A masked row keeps
//! its previous state bit-for-bit, so padding never leaks into valid rows.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, ParamVars};

/// Single-layer LSTM with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
}

impl LstmCell {
    /// Uniform `[-1/sqrt(hidden), 1/sqrt(hidden)]` weights, forget-gate bias 1.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let k = 1.0 / (hidden_size as f32).sqrt();
        let w_input = store.add_uniform(format!("{prefix}.w_input"), vec![input_size, 4 * hidden_size], k, rng);
        let w_hidden =
            store.add_uniform(format!("{prefix}.w_hidden"), vec![hidden_size, 4 * hidden_size], k, rng);
        let mut bias = vec![0.0f32; 4 * hidden_size];
        bias[hidden_size..2 * hidden_size].fill(1.0);
        let bias = store.add(
            format!("{prefix}.bias"),
            crate::autodiff::Tensor::new(vec![4 * hidden_size], bias).expect("bias shape"),
        );
        LstmCell {
            input_size,
            hidden_size,
            w_input,
            w_hidden,
            bias,
        }
    }

    pub fn step(&self, g: &mut Graph, p: &ParamVars, input: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        lstm_step(g, self, p, input, h_prev, c_prev)
    }
}

/// `c = f*c_prev + i*g`, `h = o*tanh(c)`.
pub fn lstm_step(
    g: &mut Graph,
    cell: &LstmCell,
    p: &ParamVars,
    input: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let hs = cell.hidden_size;
    if g.shape(input).len() != 2 || g.shape(input)[1] != cell.input_size {
        return Err(Error::shape("lstm_step", g.shape(input), &[cell.input_size]));
    }
    let batch = g.shape(input)[0];
    if g.shape(h_prev) != [batch, hs] || g.shape(c_prev) != [batch, hs] {
        return Err(Error::shape("lstm_step", g.shape(h_prev), g.shape(c_prev)));
    }
    let xw = g.matmul(input, p.get(cell.w_input))?;
    let hw = g.matmul(h_prev, p.get(cell.w_hidden))?;
    let pre = g.add(xw, hw)?;
    let bias = g.broadcast_rows(p.get(cell.bias), batch)?;
    let pre = g.add(pre, bias)?;

    let i = g.slice(pre, 0, hs)?;
    let f = g.slice(pre, hs, hs)?;
    let c_in = g.slice(pre, 2 * hs, hs)?;
    let o = g.slice(pre, 3 * hs, hs)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let c_in = g.tanh(c_in);
    let o = g.sigmoid(o);

    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, c_in)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Per-row validity mask together with its complement, both `[batch]`.
#[derive(Clone, Copy, Debug)]
pub struct StepMask {
    pub on: Var,
    pub off: Var,
}

impl StepMask {
    pub fn new(g: &mut Graph, mask: &[f64]) -> Result<Self> {
        let on = g.constant(vec![mask.len()], mask.to_vec())?;
        let off = g.constant(vec![mask.len()], mask.iter().map(|m| 1.0 - m).collect())?;
        Ok(StepMask { on, off })
    }

    /// Row-wise `mask ? new : old`.
    pub fn blend(&self, g: &mut Graph, new: Var, old: Var) -> Result<Var> {
        let width = *g.shape(new).last().unwrap_or(&1);
        let on = g.broadcast_cols(self.on, width)?;
        let off = g.broadcast_cols(self.off, width)?;
        let a = g.mul(new, on)?;
        let b = g.mul(old, off)?;
        g.add(a, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Forward states, index 0 being the initial state.
#[derive(Clone, Debug)]
pub struct ForwardStatePath {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl ForwardStatePath {
    pub fn steps(&self) -> usize {
        self.h.len() - 1
    }
}

/// Backward states `b[t]`, one per observation; `b[t]` summarises `x[t+1..]`.
#[derive(Clone, Debug)]
pub struct BackwardStatePath {
    pub b: Vec<Var>,
    pub c: Vec<Var>,
}

/// Runs the cell left to right over `inputs`, concatenating `latents[t]` to
/// `inputs[t]` when latents are given.
pub fn forward_unroll(
    g: &mut Graph,
    cell: &LstmCell,
    p: &ParamVars,
    init: LstmState,
    inputs: &[Var],
    latents: Option<&[Var]>,
    masks: &[StepMask],
) -> Result<ForwardStatePath> {
    if masks.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "forward_unroll: {} inputs but {} masks",
            inputs.len(),
            masks.len()
        )));
    }
    if let Some(z) = latents {
        if z.len() != inputs.len() {
            return Err(Error::InvalidArgument(format!(
                "forward_unroll: {} inputs but {} latents",
                inputs.len(),
                z.len()
            )));
        }
    }
    let mut path = ForwardStatePath {
        h: vec![init.h],
        c: vec![init.c],
    };
    for (t, (&x, mask)) in inputs.iter().zip(masks).enumerate() {
        let input = match latents {
            Some(z) => g.concat(&[x, z[t]])?,
            None => x,
        };
        let (h_prev, c_prev) = (path.h[t], path.c[t]);
        let (h, c) = lstm_step(g, cell, p, input, h_prev, c_prev)?;
        path.h.push(mask.blend(g, h, h_prev)?);
        path.c.push(mask.blend(g, c, c_prev)?);
    }
    Ok(path)
}

/// Right-to-left unroll: `b[n-1] = init`, `b[t] = cell(x[t+1], b[t+1])` where
/// `x[t+1]` is valid, and `init` otherwise. `valid[t]` flags observation `t`.
pub fn backward_unroll(
    g: &mut Graph,
    cell: &LstmCell,
    p: &ParamVars,
    init: LstmState,
    inputs: &[Var],
    valid: &[StepMask],
) -> Result<BackwardStatePath> {
    if valid.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "backward_unroll: {} inputs but {} masks",
            inputs.len(),
            valid.len()
        )));
    }
    let n = inputs.len();
    let mut b = vec![init.h; n];
    let mut c = vec![init.c; n];
    for t in (0..n.saturating_sub(1)).rev() {
        let (h_new, c_new) = lstm_step(g, cell, p, inputs[t + 1], b[t + 1], c[t + 1])?;
        b[t] = valid[t + 1].blend(g, h_new, init.h)?;
        c[t] = valid[t + 1].blend(g, c_new, init.c)?;
    }
    Ok(BackwardStatePath { b, c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSource;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_cell(store: &mut ParamStore, input: usize, hidden: usize) -> LstmCell {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(store, "cell", input, hidden, &mut rng);
        for id in [cell.w_input, cell.w_hidden, cell.bias] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        cell
    }

    #[test]
    fn zero_weights_halve_the_cell() {
        let mut store = ParamStore::new();
        let cell = zero_cell(&mut store, 2, 3);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(vec![1, 2], vec![0.7, -0.2]).unwrap();
        let h0 = g.constant(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let c_prev = [1.0, -2.0, 0.5];
        let c0 = g.constant(vec![1, 3], c_prev.to_vec()).unwrap();
        let (h, c) = cell.step(&mut g, &p, x, h0, c0).unwrap();
        for k in 0..3 {
            assert!((g.value(c)[k] - 0.5 * c_prev[k]).abs() < 1e-15);
            assert!((g.value(h)[k] - 0.5 * (0.5 * c_prev[k]).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_everything_gives_zero_hidden() {
        let mut store = ParamStore::new();
        let cell = zero_cell(&mut store, 2, 3);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let h0 = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let (h, _) = cell.step(&mut g, &p, x, h0, h0).unwrap();
        assert_eq!(g.value(h), &[0.0; 6]);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = LstmCell::new(&mut store, "c", 2, 4, &mut rng);
        let b = store.get(cell.bias).data();
        assert_eq!(&b[4..8], &[1.0; 4]);
        assert!(b[..4].iter().chain(&b[8..]).all(|&x| x == 0.0));
        let k = 0.5f32;
        assert!(store.get(cell.w_input).data().iter().all(|w| w.abs() <= k));
    }

    #[test]
    fn empty_sequence_has_only_initial_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::new(&mut store, "c", 2, 3, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let h0 = g.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        let path = forward_unroll(&mut g, &cell, &p, LstmState { h: h0, c: h0 }, &[], None, &[]).unwrap();
        assert_eq!(path.steps(), 0);
        assert_eq!(path.h, vec![h0]);
        let back = backward_unroll(&mut g, &cell, &p, LstmState { h: h0, c: h0 }, &[], &[]).unwrap();
        assert!(back.b.is_empty());
    }

    #[test]
    fn single_observation_backward_state_is_initial() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::new(&mut store, "c", 2, 3, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let b0 = g.constant(vec![1, 3], vec![0.1, -0.2, 0.3]).unwrap();
        let x = g.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let m = StepMask::new(&mut g, &[1.0]).unwrap();
        let back = backward_unroll(&mut g, &cell, &p, LstmState { h: b0, c: b0 }, &[x], &[m]).unwrap();
        assert_eq!(back.b, vec![b0]);
    }

    #[test]
    fn latent_count_mismatch_fails() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::new(&mut store, "c", 3, 3, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let h0 = g.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        let x = g.constant(vec![1, 2], vec![0.0; 2]).unwrap();
        let m = StepMask::new(&mut g, &[1.0]).unwrap();
        let r = forward_unroll(&mut g, &cell, &p, LstmState { h: h0, c: h0 }, &[x], Some(&[]), &[m]);
        assert!(r.is_err());
    }
}
