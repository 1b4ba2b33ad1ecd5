//! Linear interpolation between the latent encodings of two sequences.

use rand::Rng;

use crate::data::Observation;
use crate::error::{Error, Result};
use crate::model::{Decode, LatentEncoding, ZForcingModel};
use crate::params::ParamSource;

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationStep {
    pub a: f64,
    pub output: Vec<Observation>,
}

/// Extends `enc` to `steps` latents by repeating its final vector.
pub fn pad_encoding(enc: &LatentEncoding, steps: usize) -> LatentEncoding {
    let mut values = enc.values.clone();
    if let Some(last) = (enc.steps() > 0).then(|| enc.step(enc.steps() - 1).to_vec()) {
        for _ in enc.steps()..steps {
            values.extend_from_slice(&last);
        }
    }
    LatentEncoding {
        z_dim: enc.z_dim,
        values,
    }
}

/// `(1 - a) * x + a * y`, elementwise; both must have the same length.
pub fn blend(x: &LatentEncoding, y: &LatentEncoding, a: f64) -> LatentEncoding {
    debug_assert_eq!(x.values.len(), y.values.len());
    LatentEncoding {
        z_dim: x.z_dim,
        values: x.values.iter().zip(&y.values).map(|(p, q)| (1.0 - a) * p + a * q).collect(),
    }
}

/// Encodes both sequences with posterior means, blends the encodings at
/// `a = 0, 1/steps, ..., 1` and decodes each blend from the first
/// observation of `seq_a`. Output stops at the end token or after
/// `max_steps` observations.
#[allow(clippy::too_many_arguments)]
pub fn interpolate_latents(
    model: &ZForcingModel,
    params: &impl ParamSource,
    seq_a: &[Observation],
    seq_b: &[Observation],
    steps: usize,
    decode: Decode,
    max_steps: usize,
    rng: &mut impl Rng,
) -> Result<Vec<InterpolationStep>> {
    if steps < 1 {
        return Err(Error::InvalidArgument("interpolation needs at least one step".into()));
    }
    if seq_a.len() < 2 || seq_b.len() < 2 {
        return Err(Error::InvalidArgument("both sequences need at least two observations".into()));
    }
    let ea = model.encode_posterior_mean(params, seq_a)?;
    let eb = model.encode_posterior_mean(params, seq_b)?;
    let n = ea.steps().max(eb.steps());
    let (ea, eb) = (pad_encoding(&ea, n), pad_encoding(&eb, n));
    (0..=steps)
        .map(|i| {
            let a = i as f64 / steps as f64;
            let z = blend(&ea, &eb, a);
            let output = model.decode_latents(params, &seq_a[0], &z, decode, max_steps, rng)?;
            Ok(InterpolationStep { a, output })
        })
        .collect()
}
