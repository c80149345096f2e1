use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Base feature width of one frame.
pub const BASE_FEATURE_DIM: usize = 64;
/// Frames concatenated per output frame.
pub const STACK: usize = 3;
/// Keep every `STRIDE`-th stacked frame.
pub const STRIDE: usize = 3;

const FEATURE_MAGIC: &[u8; 4] = b"USTF";

/// `N x D` feature frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSequence {
    dim: usize,
    data: Vec<f64>,
    /// Time between consecutive frames, in milliseconds.
    pub frame_period_ms: f64,
}

impl FrameSequence {
    pub fn new(dim: usize, data: Vec<f64>, frame_period_ms: f64) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::shape("frame sequence", &[data.len()], &[dim]));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "frame sequence" });
        }
        Ok(FrameSequence {
            dim,
            data,
            frame_period_ms,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.num_frames(), self.dim], self.data.clone()).expect("consistent frames")
    }
}

/// Concatenates each kept frame with the `stack - 1` frames to its left and
/// keeps every `stride`-th result, starting at frame 0. Missing left context
/// repeats the first frame.
pub fn stack_downsample(f: &FrameSequence, stack: usize, stride: usize) -> FrameSequence {
    let n = f.num_frames();
    let d = f.dim();
    let mut out = Vec::with_capacity(n.div_ceil(stride) * stack * d);
    for t in (0..n).step_by(stride) {
        for back in (0..stack).rev() {
            let src = t.saturating_sub(back);
            out.extend_from_slice(f.frame(src));
        }
    }
    FrameSequence {
        dim: stack * d,
        data: out,
        frame_period_ms: f.frame_period_ms * stride as f64,
    }
}

/// Writes the little-endian feature format: magic, `N: u32`, `D: u32`, then
/// `N * D` `f32` values.
pub fn write_features<W: Write>(mut w: W, f: &FrameSequence) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(f.num_frames() as u32).to_le_bytes())?;
    w.write_all(&(f.dim() as u32).to_le_bytes())?;
    for &v in f.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features<R: Read>(mut r: R, frame_period_ms: f64) -> Result<FrameSequence> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::format("feature file", "bad magic"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let n = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let d = u32::from_le_bytes(word) as usize;
    let mut bytes = vec![0u8; n * d * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FrameSequence::new(d, data, frame_period_ms)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Frame `t` is filled with the value `t`.
    fn ramp(n: usize, d: usize) -> FrameSequence {
        let data = (0..n).flat_map(|t| std::iter::repeat(t as f64).take(d)).collect();
        FrameSequence::new(d, data, 10.0).unwrap()
    }

    fn sources(out: &FrameSequence, d: usize) -> Vec<Vec<usize>> {
        (0..out.num_frames())
            .map(|r| out.frame(r).chunks(d).map(|c| c[0] as usize).collect())
            .collect()
    }

    #[test]
    fn stacking_examples() {
        let out = stack_downsample(&ramp(9, 64), 3, 3);
        assert_eq!(out.num_frames(), 3);
        assert_eq!(out.dim(), 192);
        assert_eq!(sources(&out, 64), vec![vec![0, 0, 0], vec![1, 2, 3], vec![4, 5, 6]]);
        assert_eq!(out.frame_period_ms, 30.0);

        let out = stack_downsample(&ramp(1, 64), 3, 3);
        assert_eq!(sources(&out, 64), vec![vec![0, 0, 0]]);

        let out = stack_downsample(&ramp(7, 64), 3, 3);
        assert_eq!(sources(&out, 64), vec![vec![0, 0, 0], vec![1, 2, 3], vec![4, 5, 6]]);
    }

    #[test]
    fn stacked_width_is_independent_of_length() {
        for n in 1..20 {
            let out = stack_downsample(&ramp(n, 5), 3, 3);
            assert_eq!(out.dim(), 15);
            assert_eq!(out.num_frames(), n.div_ceil(3));
        }
    }

    #[test]
    fn feature_file_round_trip() {
        let f = FrameSequence::new(2, vec![0.5, -1.25, 3.0, 4.0], 10.0).unwrap();
        let mut buf = Vec::new();
        write_features(&mut buf, &f).unwrap();
        assert_eq!(&buf[..4], b"USTF");
        assert_eq!(buf.len(), 12 + 4 * 4);
        let back = read_features(buf.as_slice(), 10.0).unwrap();
        assert_eq!(back, f);
        assert!(read_features(&b"NOPE\0\0\0\0"[..], 10.0).is_err());
    }

    #[test]
    fn frames_must_be_finite_and_nonempty() {
        assert!(FrameSequence::new(2, vec![], 10.0).is_err());
        assert!(FrameSequence::new(2, vec![1.0, f64::NAN], 10.0).is_err());
        assert!(FrameSequence::new(2, vec![1.0, 2.0, 3.0], 10.0).is_err());
    }
}
