//! Gaussian-weighted sliding-window inference.

use rayon::prelude::*;

use crate::error::{Result, SspError};
use crate::topology::NetworkSpec;
use crate::voxel::{SparseStack, Volume};

pub const DEFAULT_OVERLAP: f64 = 0.5;
pub const DEFAULT_SIGMA_SCALE: f64 = 0.125;
const SIGMA_FLOOR: f64 = 1e-3;

/// One axis of the blending window: a Gaussian with `sigma = extent * sigma_scale`
/// centered on voxel `extent / 2`, so the center weight is exactly 1.
pub fn gaussian_profile(extent: usize, sigma_scale: f64) -> Vec<f64> {
    let sigma = (extent as f64 * sigma_scale).max(SIGMA_FLOOR);
    let center = (extent / 2) as f64;
    (0..extent).map(|i| (-0.5 * ((i as f64 - center) / sigma).powi(2)).exp()).collect()
}

fn separable(shape: [usize; 3], sigma_scale: f64) -> Vec<f64> {
    let [pz, py, px] = shape.map(|e| gaussian_profile(e, sigma_scale));
    let mut out = Vec::with_capacity(shape.iter().product());
    for wz in &pz {
        for wy in &py {
            for wx in &px {
                out.push(wz * wy * wx);
            }
        }
    }
    out
}

/// Separable blending weights for a `(Z, H, W)` window.
pub fn gaussian_window(shape: [usize; 3], sigma_scale: f64) -> Result<Volume> {
    if shape.contains(&0) {
        return Err(SspError::Config(format!("window {shape:?} has a zero extent")));
    }
    let data = separable(shape, sigma_scale).into_iter().map(|w| w as f32).collect();
    Volume::new(shape, data, [1.0; 3])
}

/// Tile origins along one axis: steps of `stride` plus a last tile flush
/// with the end. `extent >= window` is assumed.
pub fn tile_origins(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = extent - window;
    let mut out: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Anything that maps an input tile to a dense-grid prediction of the window.
pub trait TilePredictor: Sync {
    fn predict_tile(&self, tile: &SparseStack) -> Result<Volume>;
}

impl<F> TilePredictor for F
where
    F: Fn(&SparseStack) -> Result<Volume> + Sync,
{
    fn predict_tile(&self, tile: &SparseStack) -> Result<Volume> {
        self(tile)
    }
}

/// A network conditioned on one task.
pub struct NetPredictor<'a> {
    pub net: &'a NetworkSpec<f32>,
    pub task: usize,
}

impl TilePredictor for NetPredictor<'_> {
    fn predict_tile(&self, tile: &SparseStack) -> Result<Volume> {
        self.net.forward(tile, self.task)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlidingWindow {
    /// Window in dense-grid voxels; depth must be a multiple of the stack ratio.
    pub window: [usize; 3],
    pub overlap: f64,
    pub sigma_scale: f64,
}

impl SlidingWindow {
    pub fn new(window: [usize; 3]) -> Self {
        SlidingWindow { window, overlap: DEFAULT_OVERLAP, sigma_scale: DEFAULT_SIGMA_SCALE }
    }

    fn strides(&self, ratio: usize) -> [usize; 3] {
        let s = self.window.map(|w| ((w as f64 * (1.0 - self.overlap)).floor() as usize).max(1));
        // depth tiles start on sparse slices
        [(s[0] / ratio).max(1) * ratio, s[1], s[2]]
    }

    fn validate(&self, ratio: usize) -> Result<()> {
        if self.window.contains(&0) {
            return Err(SspError::Config(format!("window {:?} has a zero extent", self.window)));
        }
        if !self.window[0].is_multiple_of(ratio) {
            return Err(SspError::Config(format!("window depth {} is not a multiple of r={ratio}", self.window[0])));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(SspError::Config(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        Ok(())
    }

    /// Every tile origin in dense-grid coordinates for a grid of `dims`,
    /// in tile-index order.
    pub fn tiles(&self, dims: [usize; 3], ratio: usize) -> Vec<[usize; 3]> {
        let s = self.strides(ratio);
        let axes: Vec<Vec<usize>> = (0..3).map(|a| tile_origins(dims[a].max(self.window[a]), self.window[a], s[a])).collect();
        let mut out = Vec::new();
        for &z in &axes[0] {
            for &y in &axes[1] {
                for &x in &axes[2] {
                    out.push([z, y, x]);
                }
            }
        }
        out
    }

    /// Predicts the dense grid of `stack` by blending overlapping tiles.
    ///
    /// Inputs smaller than the window are reflect-padded at the far end and
    /// the result is cropped back. Tiles are predicted in parallel and merged
    /// in tile-index order.
    pub fn infer<P: TilePredictor>(&self, predictor: &P, stack: &SparseStack) -> Result<Volume> {
        let r = stack.ratio();
        self.validate(r)?;
        let v = stack.volume();
        let dims = [stack.dense_depth(), v.height(), v.width()];
        let padded = [0, 1, 2].map(|a| dims[a].max(self.window[a]));
        let source = if padded == dims {
            stack.clone()
        } else {
            SparseStack::new(reflect_pad(v, [padded[0] / r, padded[1], padded[2]]), r, padded[0])?
        };

        let weights = separable(self.window, self.sigma_scale);
        let tiles = self.tiles(dims, r);
        let len: usize = padded.iter().product();
        let mut acc = vec![0.0f64; len];
        let mut wsum = vec![0.0f64; len];
        let mut voxel = None;
        let chunk = 2 * rayon::current_num_threads().max(1);
        for group in tiles.chunks(chunk) {
            let preds: Vec<Volume> = group
                .par_iter()
                .map(|&origin| {
                    let [wz, wy, wx] = self.window;
                    let tile = source.volume().crop([origin[0] / r, origin[1], origin[2]], [wz / r, wy, wx])?;
                    let pred = predictor.predict_tile(&SparseStack::new(tile, r, wz)?)?;
                    if pred.dims() != self.window {
                        return Err(SspError::contract(
                            "sliding_infer",
                            format!("tile prediction {:?} does not match window {:?}", pred.dims(), self.window),
                        ));
                    }
                    Ok(pred)
                })
                .collect::<Result<_>>()?;
            for (origin, pred) in group.iter().zip(preds) {
                voxel.get_or_insert(pred.voxel_size());
                merge(&mut acc, &mut wsum, padded, *origin, self.window, pred.data(), &weights);
            }
        }

        let mut out = Volume::zeros(dims)?;
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let i = (z * padded[1] + y) * padded[2] + x;
                    let o = out.index(z, y, x);
                    out.data_mut()[o] = (acc[i] / wsum[i]) as f32;
                }
            }
        }
        out.with_voxel_size(voxel.unwrap_or(v.voxel_size()))
    }
}

fn merge(acc: &mut [f64], wsum: &mut [f64], dims: [usize; 3], origin: [usize; 3], window: [usize; 3], pred: &[f32], w: &[f64]) {
    let [wz, wy, wx] = window;
    for z in 0..wz {
        for y in 0..wy {
            let src = (z * wy + y) * wx;
            let dst = ((origin[0] + z) * dims[1] + origin[1] + y) * dims[2] + origin[2];
            for x in 0..wx {
                acc[dst + x] += pred[src + x] as f64 * w[src + x];
                wsum[dst + x] += w[src + x];
            }
        }
    }
}

/// Mirror index without repeating the edge voxel.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn reflect_pad(v: &Volume, dims: [usize; 3]) -> Volume {
    let [d, h, w] = v.dims();
    let mut out = Volume::from_fn(dims, |z, y, x| v.get(reflect(z, d), reflect(y, h), reflect(x, w))).expect("nonzero dims");
    out = out.with_voxel_size(v.voxel_size()).expect("voxel size already validated");
    out
}

/// Convenience wrapper: blends a network's predictions for one task.
pub fn sliding_infer(net: &NetworkSpec<f32>, task: usize, stack: &SparseStack, window: &SlidingWindow) -> Result<Volume> {
    window.infer(&NetPredictor { net, task }, stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_network, TopologyConfig, TopologyKind};
    use crate::voxel::sparsify;

    fn ramp(dims: [usize; 3]) -> Volume {
        Volume::from_fn(dims, |z, y, x| (z * 7 + y * 3 + x) as f32 * 0.01).unwrap()
    }

    #[test]
    fn center_is_peak() {
        let w = gaussian_window([8, 16, 5], DEFAULT_SIGMA_SCALE).unwrap();
        assert_eq!(w.get(4, 8, 2), 1.0);
        assert!(w.data().iter().all(|&v| v <= 1.0 && v > 0.0));
    }

    #[test]
    fn symmetric_about_center() {
        let p = gaussian_profile(9, 0.2);
        for d in 0..=4 {
            assert_eq!(p[4 - d], p[4 + d]);
        }
        let p = gaussian_profile(8, 0.2);
        for d in 0..4 {
            assert_eq!(p[4 - d], p[4 + d]);
        }
    }

    #[test]
    fn unit_sigma_at_distance_one() {
        let p = gaussian_profile(8, 1.0 / 8.0);
        assert!((p[5] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((p[5] - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn sigma_is_floored() {
        let p = gaussian_profile(4, 0.0);
        assert_eq!(p[2], 1.0);
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn zero_extent_window() {
        assert!(matches!(gaussian_window([0, 4, 4], 0.125), Err(SspError::Config(_))));
        let sw = SlidingWindow::new([0, 4, 4]);
        let s = sparsify(&ramp([4, 4, 4]), 1).unwrap();
        assert!(sw.infer(&|t: &SparseStack| Ok(t.volume().clone()), &s).is_err());
    }

    #[test]
    fn origins_cover_extent() {
        assert_eq!(tile_origins(10, 4, 2), vec![0, 2, 4, 6]);
        assert_eq!(tile_origins(11, 4, 2), vec![0, 2, 4, 6, 7]);
        assert_eq!(tile_origins(4, 4, 2), vec![0]);
    }

    #[test]
    fn depth_stride_respects_ratio() {
        let sw = SlidingWindow::new([4, 8, 8]);
        for t in sw.tiles([12, 8, 8], 4) {
            assert_eq!(t[0] % 4, 0);
        }
    }

    #[test]
    fn constant_model_stitches_constant() {
        let c = 0.37f32;
        let stack = sparsify(&ramp([12, 20, 28]), 2).unwrap();
        let sw = SlidingWindow::new([4, 8, 8]);
        let out = sw.infer(&|t: &SparseStack| Volume::from_fn([t.dense_depth(), 8, 8], |_, _, _| c), &stack).unwrap();
        assert_eq!(out.dims(), [12, 20, 28]);
        assert!(out.data().iter().all(|&v| (v - c).abs() < 1e-6));
    }

    #[test]
    fn identity_model_is_reproduced() {
        // a predictor that returns its own (dense) input stitches back the input
        let dense = ramp([8, 12, 10]);
        let stack = sparsify(&dense, 1).unwrap();
        let sw = SlidingWindow::new([4, 6, 4]);
        let out = sw.infer(&|t: &SparseStack| Ok(t.volume().clone()), &stack).unwrap();
        for (a, b) in out.data().iter().zip(dense.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn small_input_is_padded_and_cropped() {
        let dense = ramp([2, 3, 5]);
        let stack = sparsify(&dense, 1).unwrap();
        let sw = SlidingWindow::new([4, 4, 8]);
        let out = sw.infer(&|t: &SparseStack| Ok(t.volume().clone()), &stack).unwrap();
        assert_eq!(out.dims(), [2, 3, 5]);
        assert_eq!(out.data(), dense.data());
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (0..7).map(|i| reflect(i, 3)).collect();
        assert_eq!(got, vec![0, 1, 2, 1, 0, 1, 2]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn single_tile_matches_direct_forward() {
        let mut cfg = TopologyConfig::tiny(TopologyKind::Hybrid3to2d);
        cfg.patch = [16, 16, 16];
        let net = build_network::<f32>(&cfg, 3).unwrap();
        let stack = sparsify(&ramp([16, 16, 16]), cfg.ratio).unwrap();
        let direct = net.forward(&stack, 1).unwrap();
        let tiled = sliding_infer(&net, 1, &stack, &SlidingWindow::new(cfg.patch)).unwrap();
        assert_eq!(direct, tiled);
    }

    #[test]
    fn wrong_tile_shape_is_reported() {
        let stack = sparsify(&ramp([4, 8, 8]), 1).unwrap();
        let sw = SlidingWindow::new([4, 8, 8]);
        let r = sw.infer(&|_: &SparseStack| Volume::zeros([1, 1, 1]), &stack);
        assert!(matches!(r, Err(SspError::Contract { .. })));
    }
}
