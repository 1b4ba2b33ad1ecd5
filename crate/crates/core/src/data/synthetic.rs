//! Small synthetic sequence sets with known latent structure.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataKind, Dataset, Vocab};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    SineMixture,
    TwoModeHmm,
    ParityTokens,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine-mixture" => Ok(SyntheticKind::SineMixture),
            "two-mode-hmm" => Ok(SyntheticKind::TwoModeHmm),
            "parity-tokens" => Ok(SyntheticKind::ParityTokens),
            other => Err(Error::InvalidArgument(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::SineMixture => "sine-mixture",
            SyntheticKind::TwoModeHmm => "two-mode-hmm",
            SyntheticKind::ParityTokens => "parity-tokens",
        })
    }
}

/// Frame sequences cut from a sinusoid whose frequency and phase are drawn
/// once per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SineSpec {
    pub width: usize,
    pub noise: f64,
    /// Angular frequency range, radians per sample.
    pub freq: (f64, f64),
}

impl Default for SineSpec {
    fn default() -> Self {
        SineSpec {
            width: 8,
            noise: 0.05,
            freq: (0.05, 0.4),
        }
    }
}

/// Per-sequence generating parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineLatent {
    pub freq: f64,
    pub phase: f64,
}

pub fn sine_mixture(spec: &SineSpec, n: usize, len: usize, seed: u64) -> (Dataset, Vec<SineLatent>) {
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let mut data = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for _ in 0..n {
        let freq = rng.random_range(spec.freq.0..=spec.freq.1);
        let phase = rng.random_range(0.0..TAU);
        let seq = (0..len * spec.width)
            .map(|k| {
                let clean = (freq * k as f64 + phase).sin();
                let noise = if spec.noise > 0.0 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    spec.noise * e
                } else {
                    0.0
                };
                (clean + noise) as f32
            })
            .collect();
        data.push(seq);
        latents.push(SineLatent { freq, phase });
    }
    (Dataset::frames(spec.width, data), latents)
}

/// Two hidden states with sticky transitions, each emitting one biased bit.
#[derive(Clone, Debug, PartialEq)]
pub struct HmmSpec {
    /// `transition[i][j] = P(next = j | current = i)`
    pub transition: [[f64; 2]; 2],
    /// `P(bit = 1 | state)`
    pub emission: [f64; 2],
    /// `P(first state = 0)`
    pub initial: f64,
}

impl Default for HmmSpec {
    fn default() -> Self {
        HmmSpec {
            transition: [[0.9, 0.1], [0.1, 0.9]],
            emission: [0.1, 0.9],
            initial: 0.5,
        }
    }
}

/// Returns the emitted bits and the hidden state path of every sequence.
pub fn two_mode_hmm(spec: &HmmSpec, n: usize, len: usize, seed: u64) -> (Dataset, Vec<Vec<u8>>) {
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let mut bits = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s: usize = if rng.random::<f64>() < spec.initial { 0 } else { 1 };
        let mut seq = Vec::with_capacity(len);
        let mut path = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 {
                s = if rng.random::<f64>() < spec.transition[s][0] { 0 } else { 1 };
            }
            path.push(s as u8);
            seq.push(u32::from(rng.random::<f64>() < spec.emission[s]));
        }
        bits.push(seq);
        states.push(path);
    }
    (Dataset::ids(DataKind::Binary, bits), states)
}

pub const START_TOKEN: &str = "<s>";
pub const END_TOKEN: &str = "</s>";

const PARITY_VOCAB: [&str; 12] = [
    START_TOKEN, END_TOKEN, "zero", "one", "a", "b", "c", "d", "x", "y", "then", "stop",
];

/// `<s> {zero|one} filler.. then <suffix> </s>`: the suffix (and so the
/// sentence length) is fixed by the leading bit. `zero` ends with
/// `x x stop`, `one` ends with `y y y y stop`.
pub fn parity_tokens(n: usize, max_filler: usize, seed: u64) -> (Vocab, Dataset) {
    let vocab = Vocab::new(PARITY_VOCAB.iter().map(|s| s.to_string()).collect()).expect("static vocab");
    let id = |t: &str| vocab.id(t).unwrap();
    let fillers = [id("a"), id("b"), id("c"), id("d")];
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let bit = rng.random_bool(0.5);
        let mut s = vec![id(START_TOKEN), if bit { id("one") } else { id("zero") }];
        let k = rng.random_range(1..=max_filler.max(1));
        s.extend((0..k).map(|_| fillers[rng.random_range(0..fillers.len())]));
        s.push(id("then"));
        let (tok, reps) = if bit { (id("y"), 4) } else { (id("x"), 2) };
        s.extend(std::iter::repeat_n(tok, reps));
        s.push(id("stop"));
        s.push(id(END_TOKEN));
        data.push(s);
    }
    (vocab, Dataset::ids(DataKind::Tokens, data))
}
