use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SspError};
use crate::interp::{InterpKind, InterpMode};
use crate::transform::{ProjectionSpace, ProjectionSpec};

/// Encoder levels; the last one is the bottleneck.
pub const LEVELS: usize = 5;
/// Hidden width of the generated task head.
pub const HEAD_HIDDEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TopologyKind {
    #[serde(rename = "pure2d")]
    Pure2d,
    #[serde(rename = "hybrid_2to3d")]
    Hybrid2to3d,
    #[serde(rename = "hybrid_3to2d")]
    Hybrid3to2d,
    #[serde(rename = "pure3d")]
    Pure3d,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 4] = [TopologyKind::Pure2d, TopologyKind::Hybrid2to3d, TopologyKind::Hybrid3to2d, TopologyKind::Pure3d];

    pub fn as_str(self) -> &'static str {
        match self {
            TopologyKind::Pure2d => "pure2d",
            TopologyKind::Hybrid2to3d => "hybrid_2to3d",
            TopologyKind::Hybrid3to2d => "hybrid_3to2d",
            TopologyKind::Pure3d => "pure3d",
        }
    }

    pub fn encoder_is_3d(self) -> bool {
        matches!(self, TopologyKind::Pure3d | TopologyKind::Hybrid3to2d)
    }

    pub fn decoder_is_3d(self) -> bool {
        matches!(self, TopologyKind::Pure3d | TopologyKind::Hybrid2to3d)
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TopologyKind {
    type Err = SspError;

    fn from_str(s: &str) -> Result<Self> {
        TopologyKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| SspError::Config(format!("unknown topology kind {s:?}")))
    }
}

/// Declarative network description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    pub encoder_channels: Vec<usize>,
    pub u_dim: usize,
    /// Target patch `(Z_len, H, W)`.
    pub patch: [usize; 3],
    pub interp: InterpKind,
    pub interp_mode: InterpMode,
    pub projection_space: ProjectionSpace,
    pub task_count: usize,
    pub ratio: usize,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self::paper(TopologyKind::Hybrid3to2d)
    }
}

impl TopologyConfig {
    /// Full-size configuration: patch 32x128x128, `C_e = {32, 64, 128, 256, 256}`, `U = 256`.
    pub fn paper(kind: TopologyKind) -> Self {
        Self {
            kind,
            encoder_channels: vec![32, 64, 128, 256, 256],
            u_dim: 256,
            patch: [32, 128, 128],
            interp: InterpKind::Prefix,
            interp_mode: InterpMode::Nearest,
            projection_space: ProjectionSpace::Embed3d,
            task_count: 12,
            ratio: 2,
        }
    }

    /// CPU-sized configuration: patch 16x64x64, `C_e = {8, 16, 32, 64, 64}`, `U = 64`.
    ///
    /// The 2-to-3D route projects in 2D space because its shallow levels have
    /// fewer channels than slices.
    pub fn desk(kind: TopologyKind) -> Self {
        Self {
            encoder_channels: vec![8, 16, 32, 64, 64],
            u_dim: 64,
            patch: [16, 64, 64],
            task_count: 3,
            projection_space: Self::space_for(kind),
            ..Self::paper(kind)
        }
    }

    /// Minimal configuration for end-to-end gradient checks.
    pub fn tiny(kind: TopologyKind) -> Self {
        Self {
            encoder_channels: vec![4, 8, 8, 8, 8],
            u_dim: 16,
            patch: [16, 16, 16],
            task_count: 2,
            projection_space: Self::space_for(kind),
            ..Self::paper(kind)
        }
    }

    fn space_for(kind: TopologyKind) -> ProjectionSpace {
        if kind == TopologyKind::Hybrid2to3d {
            ProjectionSpace::Embed2d
        } else {
            ProjectionSpace::Embed3d
        }
    }

    /// Depth of the tensor entering the network.
    pub fn input_depth(&self) -> usize {
        match self.interp {
            InterpKind::Prefix => self.patch[0],
            InterpKind::Postfix | InterpKind::None => self.patch[0] / self.ratio,
        }
    }

    /// Depth produced by the prediction head, before any postfix upsampling.
    pub fn head_depth(&self) -> usize {
        match self.interp {
            InterpKind::Postfix => self.patch[0] / self.ratio,
            InterpKind::Prefix | InterpKind::None => self.patch[0],
        }
    }

    /// Z stride entering each level. Halves while the depth stays even.
    pub fn z_strides(&self) -> [usize; LEVELS] {
        let mut d = self.input_depth();
        let mut out = [1; LEVELS];
        for s in out.iter_mut().skip(1) {
            if d >= 2 && d.is_multiple_of(2) {
                *s = 2;
                d /= 2;
            }
        }
        out
    }

    /// `[D_k, H_k, W_k]` of each level.
    pub fn level_dims(&self) -> [[usize; 3]; LEVELS] {
        let strides = self.z_strides();
        let mut dims = [[0; 3]; LEVELS];
        let mut cur = [self.input_depth(), self.patch[1], self.patch[2]];
        for k in 0..LEVELS {
            if k > 0 {
                cur = [cur[0] / strides[k], cur[1] / 2, cur[2] / 2];
            }
            dims[k] = cur;
        }
        dims
    }

    /// Transform geometry of each level for the hybrid kinds.
    pub fn projection_specs(&self) -> Result<Option<Vec<ProjectionSpec>>> {
        let dims = self.level_dims();
        let specs = match self.kind {
            TopologyKind::Hybrid3to2d => (0..LEVELS)
                .map(|k| ProjectionSpec::depth_to_channel(self.encoder_channels[k], dims[k][0], self.u_dim, self.projection_space))
                .collect::<Result<Vec<_>>>()?,
            TopologyKind::Hybrid2to3d => (0..LEVELS)
                .map(|k| ProjectionSpec::channel_to_depth(self.encoder_channels[k], dims[k][0], self.u_dim, self.projection_space))
                .collect::<Result<Vec<_>>>()?,
            _ => return Ok(None),
        };
        Ok(Some(specs))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SspError::Config(m));
        if self.encoder_channels.len() != LEVELS {
            return err(format!("encoder_channels needs {LEVELS} levels, got {}", self.encoder_channels.len()));
        }
        if self.encoder_channels.contains(&0) {
            return err("encoder_channels must be positive".into());
        }
        if self.patch.iter().any(|&p| p == 0 || p % 16 != 0) {
            return err(format!("patch {:?} must be divisible by 16 on every axis", self.patch));
        }
        if self.ratio == 0 || !self.patch[0].is_multiple_of(self.ratio) {
            return Err(SspError::Geometry {
                imaging_depth: self.patch[0] / self.ratio.max(1),
                target_depth: self.patch[0],
                ratio: self.ratio,
            });
        }
        if self.task_count == 0 {
            return err("task_count must be at least 1".into());
        }
        if self.u_dim == 0 {
            return err("u_dim must be positive".into());
        }
        if self.interp == InterpKind::None && self.kind.decoder_is_3d() {
            return err(format!("interp none requires a 2D decoder; {} decodes in 3D", self.kind));
        }
        self.projection_specs()?;
        Ok(())
    }
}
