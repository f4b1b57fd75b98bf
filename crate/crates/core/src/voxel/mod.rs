//! Voxel grids, sparse Z stacks and the paired dataset model.

mod dataset;
mod io;
mod synth;

pub use dataset::{split_counts, synth_dataset, Dataset, Manifest, ManifestEntry, Split};
pub use io::{decode_volume, encode_volume, load_volume, save_volume, VXG_MAGIC, VXG_VERSION};
pub use synth::{synth_sample, task_name, SynthParams, MAX_TASKS};

use crate::error::{Result, SspError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default isotropic voxel edge in micrometers.
pub const DEFAULT_VOXEL_SIZE: f32 = 0.29;

/// Dense `D x H x W` grid of 32-bit intensities, Z-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
    voxel_size: [f32; 3],
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>, voxel_size: [f32; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(SspError::contract("volume", format!("zero extent in {dims:?}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(SspError::contract("volume", format!("{} values for dims {dims:?}", data.len())));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(SspError::contract("volume", format!("voxel size {voxel_size:?} must be positive")));
        }
        Ok(Self { dims, data, voxel_size })
    }

    pub fn zeros(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, vec![0.0; dims.iter().product()], [DEFAULT_VOXEL_SIZE; 3])
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(dims, data, [DEFAULT_VOXEL_SIZE; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Voxel edge lengths `(z, y, x)` in micrometers.
    pub fn voxel_size(&self) -> [f32; 3] {
        self.voxel_size
    }

    pub fn with_voxel_size(mut self, voxel_size: [f32; 3]) -> Result<Self> {
        self = Self::new(self.dims, self.data, voxel_size)?;
        Ok(self)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[z * plane..(z + 1) * plane]
    }

    /// Sub-volume starting at `origin` with extents `dims`.
    pub fn crop(&self, origin: [usize; 3], dims: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if origin[a] + dims[a] > self.dims[a] {
                return Err(SspError::contract("crop", format!("window {origin:?}+{dims:?} exceeds volume {:?}", self.dims)));
            }
        }
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let start = self.index(origin[0] + z, origin[1] + y, origin[2]);
                data.extend_from_slice(&self.data[start..start + dims[2]]);
            }
        }
        Volume::new(dims, data, self.voxel_size)
    }

    /// Mirror along the given axes (0 = Z, 1 = Y, 2 = X).
    pub fn flipped(&self, axes: [bool; 3]) -> Volume {
        let [d, h, w] = self.dims;
        let mut out = self.clone();
        for z in 0..d {
            let sz = if axes[0] { d - 1 - z } else { z };
            for y in 0..h {
                let sy = if axes[1] { h - 1 - y } else { y };
                for x in 0..w {
                    let sx = if axes[2] { w - 1 - x } else { x };
                    out.data[(z * h + y) * w + x] = self.data[(sz * h + sy) * w + sx];
                }
            }
        }
        out
    }

    /// `[1, 1, D, H, W]` tensor view.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let [d, h, w] = self.dims;
        Tensor::new(&[1, 1, d, h, w], self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect()).expect("volume extents are nonzero")
    }

    /// Inverse of [`Volume::to_tensor`]; accepts `[D, H, W]` or `[1, 1, D, H, W]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, voxel_size: [f32; 3]) -> Result<Volume> {
        let dims = match t.shape() {
            [d, h, w] | [1, 1, d, h, w] => [*d, *h, *w],
            s => return Err(SspError::contract("from_tensor", format!("shape {s:?} is not a single volume"))),
        };
        Volume::new(dims, t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(), voxel_size)
    }

    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

/// Z-subsampled stack `I` with `r * D_i = D_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseStack {
    volume: Volume,
    ratio: usize,
    dense_depth: usize,
}

impl SparseStack {
    pub fn new(volume: Volume, ratio: usize, dense_depth: usize) -> Result<Self> {
        validate_geometry(volume.depth(), dense_depth, ratio)?;
        Ok(Self { volume, ratio, dense_depth })
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn into_volume(self) -> Volume {
        self.volume
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn dense_depth(&self) -> usize {
        self.dense_depth
    }
}

/// One training tuple `(x, y, l)` with a zero-based task label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: SparseStack,
    pub y: Volume,
    pub task: usize,
}

impl Sample {
    pub fn new(x: SparseStack, y: Volume, task: usize) -> Result<Self> {
        let xv = x.volume();
        if x.dense_depth() != y.depth() || xv.height() != y.height() || xv.width() != y.width() {
            return Err(SspError::contract(
                "sample",
                format!("input {:?} (dense depth {}) does not pair with target {:?}", xv.dims(), x.dense_depth(), y.dims()),
            ));
        }
        Ok(Self { x, y, task })
    }
}

/// Checks `r * D_i = D_s`.
pub fn validate_geometry(imaging_depth: usize, target_depth: usize, ratio: usize) -> Result<()> {
    if imaging_depth == 0 || target_depth == 0 || ratio == 0 || ratio * imaging_depth != target_depth {
        return Err(SspError::Geometry { imaging_depth, target_depth, ratio });
    }
    Ok(())
}

/// Keeps slices `0, r, 2r, ...` and scales the Z voxel size by `r`.
pub fn sparsify(dense: &Volume, r: usize) -> Result<SparseStack> {
    let d = dense.depth();
    if r == 0 || !d.is_multiple_of(r) {
        return Err(SspError::Geometry { imaging_depth: if r == 0 { 0 } else { d / r }, target_depth: d, ratio: r });
    }
    let plane = dense.height() * dense.width();
    let mut data = Vec::with_capacity(d / r * plane);
    for z in (0..d).step_by(r) {
        data.extend_from_slice(dense.slice(z));
    }
    let [vz, vy, vx] = dense.voxel_size();
    let vol = Volume::new([d / r, dense.height(), dense.width()], data, [vz * r as f32, vy, vx])?;
    SparseStack::new(vol, r, d)
}

/// Population z-score over all voxels; constant volumes map to zeros.
pub fn zscore(v: &Volume) -> Volume {
    let (mean, std) = v.mean_std();
    let mut out = v.clone();
    if std < 1e-8 {
        out.data.iter_mut().for_each(|x| *x = 0.0);
    } else {
        out.data.iter_mut().for_each(|x| *x = ((*x as f64 - mean) / std) as f32);
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge clamping. `sigma` is in voxels per axis.
pub fn gaussian_blur(v: &Volume, sigma: [f64; 3]) -> Volume {
    let dims = v.dims();
    let mut cur: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        if sigma[axis] <= 0.0 || dims[axis] == 1 {
            continue;
        }
        let k = gaussian_kernel(sigma[axis]);
        let r = (k.len() / 2) as isize;
        let n = dims[axis] as isize;
        let st = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / st) % dims[axis]) as isize;
            let base = i - pos as usize * st;
            *out = k
                .iter()
                .enumerate()
                .map(|(j, &kv)| {
                    let p = (pos + j as isize - r).clamp(0, n - 1) as usize;
                    kv * cur[base + p * st]
                })
                .sum();
        }
        cur = next;
    }
    Volume { dims, data: cur.into_iter().map(|x| x as f32).collect(), voxel_size: v.voxel_size }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(d: usize) -> Volume {
        Volume::from_fn([d, 3, 2], |z, y, x| (z * 100 + y * 10 + x) as f32).unwrap()
    }

    #[test]
    fn geometry_examples() {
        assert!(validate_geometry(16, 32, 2).is_ok());
        assert!(validate_geometry(32, 32, 1).is_ok());
        match validate_geometry(5, 32, 8) {
            Err(SspError::Geometry { imaging_depth: 5, target_depth: 32, ratio: 8 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sparsify_keeps_offset_zero_slices() {
        let v = ramp(8);
        let s = sparsify(&v, 2).unwrap();
        assert_eq!(s.volume().depth(), 4);
        for (j, z) in [0, 2, 4, 6].into_iter().enumerate() {
            assert_eq!(s.volume().slice(j), v.slice(z));
        }
        assert_eq!(s.volume().voxel_size()[0], v.voxel_size()[0] * 2.0);
        assert_eq!(sparsify(&v, 1).unwrap().volume(), &v);
        assert!(matches!(sparsify(&v, 3), Err(SspError::Geometry { .. })));
    }

    #[test]
    fn eighty_seven_and_a_half_percent_reduction() {
        let s = sparsify(&ramp(32), 8).unwrap();
        assert_eq!(s.volume().depth(), 4);
        assert_eq!(1.0 - 4.0 / 32.0, 0.875);
    }

    #[test]
    fn zscore_examples() {
        let c = Volume::new([1, 1, 3], vec![2.5; 3], [1.0; 3]).unwrap();
        assert!(zscore(&c).data().iter().all(|&v| v == 0.0));
        let v = Volume::new([1, 1, 2], vec![1.0, 3.0], [1.0; 3]).unwrap();
        assert_eq!(zscore(&v).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn blur_preserves_constant_and_mass_centered() {
        let c = Volume::new([4, 5, 6], vec![1.5; 120], [1.0; 3]).unwrap();
        let b = gaussian_blur(&c, [1.0, 1.0, 1.0]);
        assert!(b.data().iter().all(|&v| (v - 1.5).abs() < 1e-6));
        let mut d = Volume::zeros([9, 9, 9]).unwrap();
        let i = d.index(4, 4, 4);
        d.data_mut()[i] = 1.0;
        let b = gaussian_blur(&d, [1.0, 1.0, 1.0]);
        assert!((b.data().iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert_eq!(b.get(3, 4, 4), b.get(5, 4, 4));
    }

    #[test]
    fn crop_and_flip() {
        let v = ramp(4);
        let c = v.crop([1, 1, 0], [2, 2, 2]).unwrap();
        assert_eq!(c.data(), &[110.0, 111.0, 120.0, 121.0, 210.0, 211.0, 220.0, 221.0]);
        assert!(v.crop([3, 0, 0], [2, 1, 1]).is_err());
        let f = v.flipped([false, true, true]);
        assert_eq!(f.get(0, 0, 0), v.get(0, 2, 1));
        assert_eq!(f.flipped([false, true, true]), v);
    }

    #[test]
    fn tensor_round_trip() {
        let v = ramp(3);
        let t = v.to_tensor::<f64>();
        assert_eq!(t.shape(), &[1, 1, 3, 3, 2]);
        assert_eq!(Volume::from_tensor(&t, v.voxel_size()).unwrap(), v);
    }

    proptest! {
        #[test]
        fn sparsify_slices_match_dense(d in 1usize..5, r in 1usize..5, h in 1usize..4, seed in 0u32..1000) {
            let v = Volume::from_fn([d * r, h, 3], |z, y, x| ((z * 31 + y * 7 + x) as u32 ^ seed) as f32).unwrap();
            let s = sparsify(&v, r).unwrap();
            prop_assert_eq!(s.volume().depth(), d);
            for j in 0..d {
                prop_assert_eq!(s.volume().slice(j), v.slice(j * r));
            }
        }

        #[test]
        fn zscore_normalizes_and_is_idempotent(vals in proptest::collection::vec(-100.0f32..100.0, 2..40)) {
            let n = vals.len();
            let v = Volume::new([1, 1, n], vals, [1.0; 3]).unwrap();
            let z = zscore(&v);
            let (m, s) = z.mean_std();
            if v.mean_std().1 >= 1e-3 {
                prop_assert!(m.abs() < 1e-5);
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
            let zz = zscore(&z);
            for (a, b) in z.data().iter().zip(zz.data()) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
