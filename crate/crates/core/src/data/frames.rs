//! Binary frame file:
//!
//! ```text
//! "ZSEQF1" | u32 frame_width | u32 sequence_count |
//!   per sequence: u32 length | length * frame_width f32 (little endian)
//! ```

use std::fs;
use std::path::Path;

use super::{Dataset, Sequences};
use crate::error::{Error, Result};

pub const FRAME_MAGIC: &[u8; 6] = b"ZSEQF1";

pub fn encode_frames(width: usize, seqs: &[Vec<f32>]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(seqs.len() as u32).to_le_bytes());
    for s in seqs {
        if width == 0 || s.len() % width != 0 {
            return Err(Error::Data(format!(
                "sequence of {} values is not a whole number of {width}-wide frames",
                s.len()
            )));
        }
        out.extend_from_slice(&((s.len() / width) as u32).to_le_bytes());
        for v in s {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Data(format!("frame file truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_frames(buf: &[u8]) -> Result<(usize, Vec<Vec<f32>>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(FRAME_MAGIC.len())? != FRAME_MAGIC {
        return Err(Error::Data("bad frame file magic".into()));
    }
    let width = r.u32()? as usize;
    let count = r.u32()? as usize;
    if width == 0 {
        return Err(Error::Data("frame width must be positive".into()));
    }
    let mut seqs = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let bytes = r.take(len * width * 4)?;
        seqs.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    if r.pos != buf.len() {
        return Err(Error::Data(format!("{} trailing bytes in frame file", buf.len() - r.pos)));
    }
    Ok((width, seqs))
}

pub fn write_frame_file(path: &Path, ds: &Dataset) -> Result<()> {
    let Sequences::Frames { width, data } = &ds.sequences else {
        return Err(Error::Data("only frame datasets can be written as frame files".into()));
    };
    let bytes = encode_frames(*width, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_frame_file(path: &Path) -> Result<Dataset> {
    let buf = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let (width, data) = decode_frames(&buf)?;
    Ok(Dataset::frames(width, data))
}

/// Global mean and standard deviation, fitted on a training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Normalization {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let Sequences::Frames { data, .. } = &ds.sequences else {
            return Err(Error::Data("normalization needs frame data".into()));
        };
        let n: usize = data.iter().map(Vec::len).sum();
        if n == 0 {
            return Err(Error::Data("cannot normalize an empty dataset".into()));
        }
        let mean = data.iter().flatten().map(|&x| x as f64).sum::<f64>() / n as f64;
        let var = data
            .iter()
            .flatten()
            .map(|&x| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Data(format!("training frames have degenerate std {std}")));
        }
        Ok(Normalization {
            mean: mean as f32,
            std: std as f32,
        })
    }

    pub fn identity() -> Self {
        Normalization { mean: 0.0, std: 1.0 }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        if let Sequences::Frames { data, .. } = &mut ds.sequences {
            data.iter_mut()
                .flatten()
                .for_each(|x| *x = (*x - self.mean) / self.std);
        }
    }

    pub fn invert(&self, frame: &mut [f32]) {
        frame.iter_mut().for_each(|x| *x = *x * self.std + self.mean);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let seqs = vec![vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25], vec![], vec![7.0, 8.0]];
        let bytes = encode_frames(2, &seqs).unwrap();
        assert_eq!(&bytes[..6], b"ZSEQF1");
        let (w, back) = decode_frames(&bytes).unwrap();
        assert_eq!(w, 2);
        let bits = |s: &Vec<Vec<f32>>| -> Vec<Vec<u32>> {
            s.iter().map(|v| v.iter().map(|x| x.to_bits()).collect()).collect()
        };
        assert_eq!(bits(&back), bits(&seqs));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = encode_frames(1, &[vec![1.0, 2.0]]).unwrap();
        assert!(decode_frames(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_frames(&bytes).is_err());
        assert!(encode_frames(2, &[vec![1.0]]).is_err());
    }

    #[test]
    fn normalization_uses_fitted_constants() {
        let train = Dataset::frames(1, vec![vec![1.0, 3.0], vec![5.0, 7.0]]);
        let norm = Normalization::fit(&train).unwrap();
        assert_eq!(norm.mean, 4.0);
        assert!((norm.std - 5.0f32.sqrt()).abs() < 1e-6);
        let mut eval = Dataset::frames(1, vec![vec![4.0, 100.0]]);
        norm.apply(&mut eval);
        let Sequences::Frames { data, .. } = &eval.sequences else { unreachable!() };
        assert_eq!(data[0][0], 0.0);
        assert_eq!(data[0][1], (100.0 - 4.0) / norm.std);
        assert!(Normalization::fit(&Dataset::frames(1, vec![vec![2.0, 2.0]])).is_err());
    }
}
