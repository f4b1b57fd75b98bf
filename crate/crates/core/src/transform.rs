//! Depth-to-channel and channel-to-depth transforms.
//!
//! A transform pairs a bijective reshape between the Z axis and the channel
//! axis with a linear 1x1(x1) projection `Γ`. The projection runs either in
//! 3D space (before folding / after unfolding) or in 2D space (after folding /
//! before unfolding). Folding is depth-major: channel `m * D + d` of the
//! folded map holds channel `m`, slice `d`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Result, SspError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionSpace {
    Embed2d,
    #[default]
    Embed3d,
}

impl fmt::Display for ProjectionSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectionSpace::Embed2d => "embed2d",
            ProjectionSpace::Embed3d => "embed3d",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    DepthToChannel,
    ChannelToDepth,
}

/// Geometry of one transform: `Γ` maps `lambda` channels to `mu` channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectionSpec {
    pub route: Route,
    pub space: ProjectionSpace,
    pub u: usize,
    pub lambda: usize,
    pub mu: usize,
    /// `D_k` for depth-to-channel, `D_target` for channel-to-depth.
    pub depth: usize,
    /// Channels of the tensor the transform consumes.
    pub in_channels: usize,
}

fn divisible(what: &str, u: usize, d: usize, c: usize, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(SspError::Config(format!("{what}: uniform dimension U={u}, depth D={d}, channels C={c} violate divisibility")))
    }
}

impl ProjectionSpec {
    /// Transform for a 3D feature with `c` channels and depth `d`.
    pub fn depth_to_channel(c: usize, d: usize, u: usize, space: ProjectionSpace) -> Result<Self> {
        if c == 0 || d == 0 || u == 0 {
            return Err(SspError::Config(format!("depth_to_channel: zero extent (U={u}, D={d}, C={c})")));
        }
        let (lambda, mu) = match space {
            ProjectionSpace::Embed3d => {
                divisible("depth_to_channel", u, d, c, u.is_multiple_of(d))?;
                (c, u / d)
            }
            ProjectionSpace::Embed2d => (c * d, u),
        };
        Ok(Self { route: Route::DepthToChannel, space, u, lambda, mu, depth: d, in_channels: c })
    }

    /// Transform for a 2D feature with `c` channels unfolded to depth `d_target`.
    pub fn channel_to_depth(c: usize, d_target: usize, u: usize, space: ProjectionSpace) -> Result<Self> {
        if c == 0 || d_target == 0 || u == 0 {
            return Err(SspError::Config(format!("channel_to_depth: zero extent (U={u}, D={d_target}, C={c})")));
        }
        divisible("channel_to_depth", u, d_target, c, u.is_multiple_of(d_target))?;
        let (lambda, mu) = match space {
            ProjectionSpace::Embed3d => {
                divisible("channel_to_depth", u, d_target, c, c.is_multiple_of(d_target))?;
                (c / d_target, u / d_target)
            }
            ProjectionSpace::Embed2d => (c, u),
        };
        Ok(Self { route: Route::ChannelToDepth, space, u, lambda, mu, depth: d_target, in_channels: c })
    }

    /// Shape of the `Γ` kernel: `[mu, lambda, 1, 1(, 1)]`.
    pub fn gamma_shape(&self) -> Vec<usize> {
        match self.space {
            ProjectionSpace::Embed3d => vec![self.mu, self.lambda, 1, 1, 1],
            ProjectionSpace::Embed2d => vec![self.mu, self.lambda, 1, 1],
        }
    }

    /// Channel count of the result: `U` for depth-to-channel, `U / D` otherwise.
    pub fn out_channels(&self) -> usize {
        match self.route {
            Route::DepthToChannel => self.u,
            Route::ChannelToDepth => self.u / self.depth,
        }
    }

    /// Multiply-accumulates of `Γ` per output spatial site of the 2D map
    /// (`H * W`), i.e. `lambda * mu` times the number of projected slices.
    pub fn macs_per_site(&self) -> u64 {
        let slices = match self.space {
            ProjectionSpace::Embed3d => self.depth,
            ProjectionSpace::Embed2d => 1,
        };
        (self.lambda * self.mu * slices) as u64
    }

    /// Identity `Γ`; only defined when the projection is square.
    pub fn identity_gamma<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.lambda != self.mu {
            return Err(SspError::Config(format!("identity projection needs lambda == mu, got {} and {}", self.lambda, self.mu)));
        }
        let n = self.mu;
        Tensor::from_fn(&self.gamma_shape(), |i| if i / n == i % n { T::one() } else { T::zero() })
    }
}

fn check_gamma<T: Scalar>(tape: &Tape<T>, op: &str, spec: &ProjectionSpec, gamma: Var) -> Result<()> {
    let want = spec.gamma_shape();
    if tape.shape(gamma) != want.as_slice() {
        return Err(SspError::contract(op, format!("projection kernel shape {:?}, expected {want:?}", tape.shape(gamma))));
    }
    Ok(())
}

/// `[N, C, D, H, W] -> [N, U, H, W]`.
pub fn depth_to_channel<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &ProjectionSpec, gamma: Var) -> Result<Var> {
    let op = "depth_to_channel";
    if spec.route != Route::DepthToChannel {
        return Err(SspError::contract(op, "spec describes channel_to_depth"));
    }
    check_gamma(tape, op, spec, gamma)?;
    let s = tape.shape(x).to_vec();
    if s.len() != 5 || s[1] != spec.in_channels || s[2] != spec.depth {
        return Err(SspError::contract(op, format!("input {s:?}, expected [N, {}, {}, H, W]", spec.in_channels, spec.depth)));
    }
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    match spec.space {
        ProjectionSpace::Embed3d => {
            let p = tape.conv3d(x, gamma, None, [1; 3], [0; 3])?;
            tape.reshape(p, &[n, spec.mu * d, h, w])
        }
        ProjectionSpace::Embed2d => {
            let f = tape.reshape(x, &[n, c * d, h, w])?;
            tape.conv2d(f, gamma, None, 1, 0)
        }
    }
}

/// `[N, C, H, W] -> [N, U / D, D, H, W]`.
pub fn channel_to_depth<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &ProjectionSpec, gamma: Var) -> Result<Var> {
    let op = "channel_to_depth";
    if spec.route != Route::ChannelToDepth {
        return Err(SspError::contract(op, "spec describes depth_to_channel"));
    }
    check_gamma(tape, op, spec, gamma)?;
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1] != spec.in_channels {
        return Err(SspError::contract(op, format!("input {s:?}, expected [N, {}, H, W]", spec.in_channels)));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = spec.depth;
    match spec.space {
        ProjectionSpace::Embed3d => {
            let u = tape.reshape(x, &[n, c / d, d, h, w])?;
            tape.conv3d(u, gamma, None, [1; 3], [0; 3])
        }
        ProjectionSpace::Embed2d => {
            let p = tape.conv2d(x, gamma, None, 1, 0)?;
            tape.reshape(p, &[n, spec.u / d, d, h, w])
        }
    }
}

/// `[N, 1, D, H, W] -> [N, D, H, W]`.
pub fn fold_input_to_2d<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 || s[1] != 1 {
        return Err(SspError::contract("fold_input_to_2d", format!("input {s:?}, expected [N, 1, D, H, W]")));
    }
    tape.reshape(x, &[s[0], s[2], s[3], s[4]])
}

/// `[N, D, H, W] -> [N, 1, D, H, W]`.
pub fn unfold_output_to_3d<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(SspError::contract("unfold_output_to_3d", format!("input {s:?}, expected [N, D, H, W]")));
    }
    tape.reshape(x, &[s[0], 1, s[1], s[2], s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::random;

    #[test]
    fn worked_example_geometry() {
        let spec = ProjectionSpec::depth_to_channel(256, 2, 256, ProjectionSpace::Embed3d).unwrap();
        assert_eq!((spec.lambda, spec.mu), (256, 128));
        let mut t = Tape::<f32>::new();
        let x = t.constant(random(&[1, 256, 2, 8, 8], 1));
        let g = t.constant(random(&spec.gamma_shape(), 2));
        let y = depth_to_channel(&mut t, x, &spec, g).unwrap();
        assert_eq!(t.shape(y), &[1, 256, 8, 8]);

        let spec = ProjectionSpec::depth_to_channel(32, 4, 256, ProjectionSpace::Embed3d).unwrap();
        assert_eq!(spec.mu, 64);
        assert_eq!(spec.mu * spec.depth, 256);
    }

    #[test]
    fn divisibility_errors_name_extents() {
        let e = ProjectionSpec::depth_to_channel(256, 3, 256, ProjectionSpace::Embed3d).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("U=256") && msg.contains("D=3") && msg.contains("C=256"), "{msg}");
        assert!(ProjectionSpec::channel_to_depth(10, 4, 16, ProjectionSpace::Embed3d).is_err());
        assert!(ProjectionSpec::channel_to_depth(10, 4, 16, ProjectionSpace::Embed2d).is_ok());
        assert!(ProjectionSpec::channel_to_depth(8, 3, 16, ProjectionSpace::Embed2d).is_err());
    }

    #[test]
    fn channel_to_depth_shapes() {
        let spec = ProjectionSpec::channel_to_depth(256, 2, 256, ProjectionSpace::Embed2d).unwrap();
        let mut t = Tape::<f32>::new();
        let x = t.constant(random(&[1, 256, 3, 3], 3));
        let g = t.constant(random(&spec.gamma_shape(), 4));
        let y = channel_to_depth(&mut t, x, &spec, g).unwrap();
        assert_eq!(t.shape(y), &[1, 128, 2, 3, 3]);

        let spec = ProjectionSpec::channel_to_depth(8, 4, 16, ProjectionSpace::Embed3d).unwrap();
        let x = t.constant(random(&[2, 8, 3, 3], 5));
        let g = t.constant(random(&spec.gamma_shape(), 6));
        let y = channel_to_depth(&mut t, x, &spec, g).unwrap();
        assert_eq!(t.shape(y), &[2, 4, 4, 3, 3]);
    }

    #[test]
    fn uniform_dimension_independent_of_depth() {
        for space in [ProjectionSpace::Embed2d, ProjectionSpace::Embed3d] {
            for (c, d) in [(8, 16), (16, 8), (32, 4), (64, 2), (64, 1)] {
                let spec = ProjectionSpec::depth_to_channel(c, d, 64, space).unwrap();
                let mut t = Tape::<f64>::new();
                let x = t.constant(random(&[1, c, d, 2, 2], 7));
                let g = t.constant(random(&spec.gamma_shape(), 8));
                let y = depth_to_channel(&mut t, x, &spec, g).unwrap();
                assert_eq!(t.shape(y)[1], 64);
            }
        }
    }

    #[test]
    fn reshape_only_round_trip_is_exact() {
        let (c, d) = (12, 4);
        let down = ProjectionSpec::channel_to_depth(c, d, c, ProjectionSpace::Embed2d).unwrap();
        let up = ProjectionSpec::depth_to_channel(c / d, d, c, ProjectionSpace::Embed2d).unwrap();
        let mut t = Tape::<f32>::new();
        let x = t.constant(random(&[2, c, 3, 5], 9));
        let g1 = t.constant(down.identity_gamma().unwrap());
        let g2 = t.constant(up.identity_gamma().unwrap());
        let z = channel_to_depth(&mut t, x, &down, g1).unwrap();
        let y = depth_to_channel(&mut t, z, &up, g2).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn depth_major_fold_order() {
        // channel m*D + d of the folded map is slice d of channel m
        let (c, d) = (2, 3);
        let spec = ProjectionSpec::depth_to_channel(c, d, c * d, ProjectionSpace::Embed2d).unwrap();
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_fn(&[1, c, d, 1, 1], |i| i as f64).unwrap());
        let g = t.constant(spec.identity_gamma().unwrap());
        let y = depth_to_channel(&mut t, x, &spec, g).unwrap();
        for m in 0..c {
            for k in 0..d {
                assert_eq!(t.value(y).data()[m * d + k], (m * d + k) as f64);
            }
        }
    }

    #[test]
    fn fold_unfold() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(random(&[1, 1, 32, 8, 8], 10));
        let f = fold_input_to_2d(&mut t, x).unwrap();
        assert_eq!(t.shape(f), &[1, 32, 8, 8]);
        let u = unfold_output_to_3d(&mut t, f).unwrap();
        assert_eq!(t.value(u), t.value(x));
        let bad = t.constant(random(&[1, 2, 4, 4, 4], 11));
        assert!(matches!(fold_input_to_2d(&mut t, bad), Err(SspError::Contract { .. })));
    }

    #[test]
    fn element_count_preserved_by_reshape_steps() {
        let spec = ProjectionSpec::depth_to_channel(4, 4, 16, ProjectionSpace::Embed3d).unwrap();
        // Γ: 4 -> 4 channels, so the whole route preserves element count
        let mut t = Tape::<f64>::new();
        let x = t.constant(random(&[2, 4, 4, 3, 3], 12));
        let g = t.constant(spec.identity_gamma().unwrap());
        let y = depth_to_channel(&mut t, x, &spec, g).unwrap();
        assert_eq!(t.value(y).len(), t.value(x).len());
        assert_eq!(t.value(y).data(), t.value(x).data());
    }
}
