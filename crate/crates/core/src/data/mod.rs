//! Sequence datasets, padded batches, on-disk formats and synthetic generators.

mod batch;
pub mod frames;
pub mod synthetic;
pub mod tokens;

pub use batch::SequenceBatch;
pub use frames::{read_frame_file, write_frame_file, Normalization};
pub use tokens::{read_sequences_file, read_vocab_file, write_sequences_file, write_vocab_file, Vocab};

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// The three observation regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    /// Real-valued frames with a diagonal Gaussian output head.
    Frames,
    /// Token ids with a categorical output head.
    Tokens,
    /// 0/1 ids with a Bernoulli output head.
    Binary,
}

impl FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "frames" => Ok(DataKind::Frames),
            "tokens" => Ok(DataKind::Tokens),
            "binary" => Ok(DataKind::Binary),
            other => Err(Error::Config(format!("unknown data_kind `{other}`"))),
        }
    }
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataKind::Frames => "frames",
            DataKind::Tokens => "tokens",
            DataKind::Binary => "binary",
        })
    }
}

/// One element of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    Frame(Vec<f32>),
    Id(u32),
}

impl Observation {
    pub fn id(&self) -> Option<u32> {
        match self {
            Observation::Id(i) => Some(*i),
            Observation::Frame(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sequences {
    /// Each entry holds `len * width` values, frame-major.
    Frames { width: usize, data: Vec<Vec<f32>> },
    Ids(Vec<Vec<u32>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DataKind,
    pub sequences: Sequences,
}

impl Dataset {
    pub fn frames(width: usize, data: Vec<Vec<f32>>) -> Self {
        Dataset {
            kind: DataKind::Frames,
            sequences: Sequences::Frames { width, data },
        }
    }

    pub fn ids(kind: DataKind, data: Vec<Vec<u32>>) -> Self {
        Dataset {
            kind,
            sequences: Sequences::Ids(data),
        }
    }

    pub fn len(&self) -> usize {
        match &self.sequences {
            Sequences::Frames { data, .. } => data.len(),
            Sequences::Ids(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature width: frame width for frames, 1 otherwise.
    pub fn width(&self) -> usize {
        match &self.sequences {
            Sequences::Frames { width, .. } => *width,
            Sequences::Ids(_) => 1,
        }
    }

    pub fn seq_len(&self, i: usize) -> usize {
        match &self.sequences {
            Sequences::Frames { width, data } => data[i].len() / (*width).max(1),
            Sequences::Ids(d) => d[i].len(),
        }
    }

    pub fn observations(&self, i: usize) -> Vec<Observation> {
        match &self.sequences {
            Sequences::Frames { width, data } => data[i]
                .chunks(*width)
                .map(|f| Observation::Frame(f.to_vec()))
                .collect(),
            Sequences::Ids(d) => d[i].iter().map(|&x| Observation::Id(x)).collect(),
        }
    }

    /// Keeps at most `cap` observations of every sequence.
    pub fn truncate(&mut self, cap: usize) {
        match &mut self.sequences {
            Sequences::Frames { width, data } => {
                data.iter_mut().for_each(|s| s.truncate(cap * *width))
            }
            Sequences::Ids(d) => d.iter_mut().for_each(|s| s.truncate(cap)),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> SequenceBatch {
        SequenceBatch::from_dataset(self, indices)
    }

    /// Consecutive batches of at most `size` sequences covering the whole set.
    pub fn batches(&self, size: usize) -> Vec<SequenceBatch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1)).map(|c| self.batch(c)).collect()
    }

    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let (a, b) = match &self.sequences {
            Sequences::Frames { width, data } => (
                Sequences::Frames {
                    width: *width,
                    data: data[..n].to_vec(),
                },
                Sequences::Frames {
                    width: *width,
                    data: data[n..].to_vec(),
                },
            ),
            Sequences::Ids(d) => (Sequences::Ids(d[..n].to_vec()), Sequences::Ids(d[n..].to_vec())),
        };
        (
            Dataset {
                kind: self.kind,
                sequences: a,
            },
            Dataset {
                kind: self.kind,
                sequences: b,
            },
        )
    }
}
