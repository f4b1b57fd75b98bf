//! Z-axis one-to-many mapping: fixed prefix interpolation onto the pseudo
//! grid, and the learnable postfix upsampler.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Result, SspError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::voxel::{SparseStack, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InterpKind {
    #[default]
    Prefix,
    Postfix,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    #[default]
    Nearest,
    Linear,
}

impl fmt::Display for InterpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InterpKind::Prefix => "prefix",
            InterpKind::Postfix => "postfix",
            InterpKind::None => "none",
        })
    }
}

impl fmt::Display for InterpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InterpMode::Nearest => "nearest",
            InterpMode::Linear => "linear",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpStrategy {
    pub kind: InterpKind,
    pub mode: InterpMode,
    pub ratio: usize,
}

/// Maps a sparse stack onto the dense pseudo grid `S'`.
///
/// Kept slice `j` lands on index `j * r`. Nearest replicates each slice `r`
/// times; linear blends towards the next kept slice and clamps past the last.
pub fn prefix_upsample(x: &SparseStack, mode: InterpMode) -> Result<Volume> {
    let v = x.volume();
    let r = x.ratio();
    let di = v.depth();
    let plane = v.height() * v.width();
    let mut data = Vec::with_capacity(di * r * plane);
    for j in 0..di * r {
        let lo = j / r;
        match mode {
            InterpMode::Nearest => data.extend_from_slice(v.slice(lo)),
            InterpMode::Linear => {
                let frac = (j - lo * r) as f32 / r as f32;
                let hi = (lo + 1).min(di - 1);
                if frac == 0.0 || hi == lo {
                    data.extend_from_slice(v.slice(lo));
                } else {
                    let (a, b) = (v.slice(lo), v.slice(hi));
                    data.extend(a.iter().zip(b).map(|(&a, &b)| (1.0 - frac) * a + frac * b));
                }
            }
        }
    }
    let [vz, vy, vx] = v.voxel_size();
    Volume::new([di * r, v.height(), v.width()], data, [vz / r as f32, vy, vx])
}

/// Transposed Z convolution with `kd = stride_z = r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PostfixUpsampler {
    pub ratio: usize,
    pub channels: usize,
}

pub fn make_postfix_upsampler(r: usize, channels: usize) -> Result<PostfixUpsampler> {
    if r == 0 || channels == 0 {
        return Err(SspError::Config(format!("postfix upsampler needs r >= 1 and channels >= 1 (r={r}, channels={channels})")));
    }
    Ok(PostfixUpsampler { ratio: r, channels })
}

impl PostfixUpsampler {
    pub fn kernel_shape(&self) -> [usize; 5] {
        [self.channels, self.channels, self.ratio, 1, 1]
    }

    /// Replicating init: every tap of channel `c -> c` is one, so the
    /// untrained layer equals nearest prefix interpolation.
    pub fn init_kernel<T: Scalar>(&self) -> Tensor<T> {
        let (c, r) = (self.channels, self.ratio);
        Tensor::from_fn(&self.kernel_shape(), |i| {
            let (ci, co) = (i / (c * r), (i / r) % c);
            if ci == co {
                T::one()
            } else {
                T::zero()
            }
        })
        .expect("nonzero extents")
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, kernel: Var) -> Result<Var> {
        tape.conv_transpose_z(x, kernel, self.ratio)
    }

    pub fn macs(&self, input_elements_per_channel: usize) -> u64 {
        (input_elements_per_channel * self.ratio * self.channels * self.channels) as u64
    }
}
