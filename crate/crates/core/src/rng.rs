//! Named, independent random streams derived from one run seed.
//!
//! Every consumer asks for `(stream, index)`, so a change in how often one
//! component draws numbers never shifts what another component sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    TrainNoise,
    EvalNoise,
    Sample,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Init => 0x696e_6974,
            Stream::TrainNoise => 0x7472_6e6e,
            Stream::EvalNoise => 0x6576_6e6e,
            Stream::Sample => 0x736d_706c,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(seed ^ stream.tag().rotate_left(32)) ^ index);
    ChaCha8Rng::seed_from_u64(key)
}

pub fn standard_normals(rng: &mut impl rand::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
