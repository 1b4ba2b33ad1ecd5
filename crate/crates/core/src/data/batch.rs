use super::{DataKind, Dataset, Observation, Sequences};

/// Padded batch of variable-length sequences.
///
/// Observation `t` of row `b` is valid iff `t < lengths[b]`. Padding is
/// zero-filled and never contributes to a loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub kind: DataKind,
    pub width: usize,
    pub lengths: Vec<usize>,
    pub max_len: usize,
    frames: Vec<f32>,
    ids: Vec<u32>,
}

impl SequenceBatch {
    pub(super) fn from_dataset(ds: &Dataset, indices: &[usize]) -> Self {
        let lengths: Vec<usize> = indices.iter().map(|&i| ds.seq_len(i)).collect();
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        let width = ds.width();
        let b = indices.len();
        let mut frames = Vec::new();
        let mut ids = Vec::new();
        match &ds.sequences {
            Sequences::Frames { data, .. } => {
                frames = vec![0.0; b * max_len * width];
                for (row, &i) in indices.iter().enumerate() {
                    let dst = row * max_len * width;
                    frames[dst..dst + data[i].len()].copy_from_slice(&data[i]);
                }
            }
            Sequences::Ids(data) => {
                ids = vec![0; b * max_len];
                for (row, &i) in indices.iter().enumerate() {
                    ids[row * max_len..row * max_len + data[i].len()].copy_from_slice(&data[i]);
                }
            }
        }
        SequenceBatch {
            kind: ds.kind,
            width,
            lengths,
            max_len,
            frames,
            ids,
        }
    }

    pub fn from_observations(kind: DataKind, width: usize, seqs: &[Vec<Observation>]) -> Self {
        let ds = match kind {
            DataKind::Frames => Dataset::frames(
                width,
                seqs.iter()
                    .map(|s| {
                        s.iter()
                            .flat_map(|o| match o {
                                Observation::Frame(f) => f.clone(),
                                Observation::Id(_) => panic!("id in frame sequence"),
                            })
                            .collect()
                    })
                    .collect(),
            ),
            _ => Dataset::ids(
                kind,
                seqs.iter()
                    .map(|s| s.iter().map(|o| o.id().expect("frame in id sequence")).collect())
                    .collect(),
            ),
        };
        let idx: Vec<usize> = (0..seqs.len()).collect();
        Self::from_dataset(&ds, &idx)
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Number of prediction steps: one fewer than the longest sequence.
    pub fn num_steps(&self) -> usize {
        self.max_len.saturating_sub(1)
    }

    /// `mask[b] = 1` iff observation `t` exists in row `b`.
    pub fn mask(&self, t: usize) -> Vec<f64> {
        self.lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect()
    }

    /// `1` iff row `b` has a target at step `s`, i.e. observation `s + 1` exists.
    pub fn step_mask(&self, s: usize) -> Vec<f64> {
        self.mask(s + 1)
    }

    /// Total prediction steps over valid rows.
    pub fn valid_steps(&self) -> usize {
        self.lengths.iter().map(|l| l.saturating_sub(1)).sum()
    }

    /// Observation `t` for every row as `[batch * width]`; ids become 0/1 floats.
    pub fn values(&self, t: usize) -> Vec<f64> {
        let b = self.batch_size();
        match self.kind {
            DataKind::Frames => {
                let w = self.width;
                let mut out = Vec::with_capacity(b * w);
                for row in 0..b {
                    let at = (row * self.max_len + t) * w;
                    out.extend(self.frames[at..at + w].iter().map(|&x| x as f64));
                }
                out
            }
            _ => self.ids(t).into_iter().map(|x| x as f64).collect(),
        }
    }

    pub fn ids(&self, t: usize) -> Vec<u32> {
        (0..self.batch_size())
            .map(|row| self.ids[row * self.max_len + t])
            .collect()
    }

    /// Same sequences with trailing padding out to `max_len` observations.
    pub fn padded_to(&self, max_len: usize) -> Self {
        assert!(max_len >= self.max_len);
        let b = self.batch_size();
        let w = self.width;
        let mut out = self.clone();
        out.max_len = max_len;
        if self.kind == DataKind::Frames {
            out.frames = vec![0.0; b * max_len * w];
            for row in 0..b {
                let src = &self.frames[row * self.max_len * w..(row + 1) * self.max_len * w];
                out.frames[row * max_len * w..row * max_len * w + src.len()].copy_from_slice(src);
            }
        } else {
            out.ids = vec![0; b * max_len];
            for row in 0..b {
                let src = &self.ids[row * self.max_len..(row + 1) * self.max_len];
                out.ids[row * max_len..row * max_len + src.len()].copy_from_slice(src);
            }
        }
        out
    }
}
