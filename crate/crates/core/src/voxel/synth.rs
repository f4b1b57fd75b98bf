//! Procedural paired volumes.
//!
//! Each task owns one primitive family: soft spheres, hollow shells or
//! random-walk tubes, cycling with size shifts beyond the first three tasks.
//! The input renders every task's structures blurred together, plus a Z
//! gradient and noise, so the target isolates one structure from mixed
//! evidence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use super::{gaussian_blur, sparsify, validate_geometry, zscore, Sample, Volume, DEFAULT_VOXEL_SIZE};
use crate::error::{Result, SspError};

pub const MAX_TASKS: usize = 12;

const BASE_NAMES: [&str; 3] = ["nucleolus", "nuclear-envelope", "microtubule"];
const NOISE_STREAM: u64 = 1 << 20;
const REFERENCE_VOXELS: f64 = 16.0 * 64.0 * 64.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub blur_sigma: [f64; 3],
    pub z_gradient: f64,
    pub noise_sigma: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { blur_sigma: [1.0, 0.8, 0.8], z_gradient: 0.3, noise_sigma: 0.05 }
    }
}

pub fn task_name(task: usize) -> String {
    let base = BASE_NAMES[task % 3];
    match task / 3 {
        0 => base.to_string(),
        c => format!("{base}-{}", c + 1),
    }
}

struct Canvas {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Canvas {
    fn new(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; dims.iter().product()] }
    }

    /// Max-composites `f(distance)` over voxels within `reach` of `c`.
    fn splat(&mut self, c: [f64; 3], reach: f64, f: impl Fn(f64) -> f64) {
        let lo = |a: usize| ((c[a] - reach).floor().max(0.0)) as usize;
        let hi = |a: usize| ((c[a] + reach).ceil().min(self.dims[a] as f64 - 1.0)).max(-1.0) as isize;
        let [_, h, w] = self.dims;
        for z in lo(0) as isize..=hi(0) {
            for y in lo(1) as isize..=hi(1) {
                for x in lo(2) as isize..=hi(2) {
                    let d = ((z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2)).sqrt();
                    if d > reach {
                        continue;
                    }
                    let i = (z as usize * h + y as usize) * w + x as usize;
                    let v = f(d) as f32;
                    if v > self.data[i] {
                        self.data[i] = v;
                    }
                }
            }
        }
    }
}

fn random_point(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| rng.gen_range(0.0..dims[a] as f64))
}

fn count_for(base: f64, dims: [usize; 3]) -> usize {
    let scale = dims.iter().product::<usize>() as f64 / REFERENCE_VOXELS;
    ((base * scale).round() as usize).max(1)
}

fn render_task(seed: u64, task: usize, dims: [usize; 3]) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64 + 1);
    let size = 1.0 + 0.2 * (task / 3) as f64;
    let mut canvas = Canvas::new(dims);
    match task % 3 {
        0 => {
            for _ in 0..count_for(5.0, dims) {
                let c = random_point(&mut rng, dims);
                let r = rng.gen_range(2.5..4.0) * size;
                canvas.splat(c, r + 3.0, |d| 1.0 / (1.0 + ((d - r) / 0.5).exp()));
            }
        }
        1 => {
            for _ in 0..count_for(4.0, dims) {
                let c = random_point(&mut rng, dims);
                let r = rng.gen_range(4.0..7.0) * size;
                let t = 1.0 * size;
                canvas.splat(c, r + 3.0 * t, |d| (-((d - r) / t).powi(2)).exp());
            }
        }
        _ => {
            let radius = 1.2 * size;
            let turn = Normal::new(0.0, 0.3).unwrap();
            for _ in 0..count_for(3.0, dims) {
                let mut p = random_point(&mut rng, dims);
                let mut dir: [f64; 3] = UnitSphere.sample(&mut rng);
                for _ in 0..120 {
                    canvas.splat(p, 3.0 * radius, |d| (-(d / radius).powi(2)).exp());
                    for a in 0..3 {
                        dir[a] += turn.sample(&mut rng);
                    }
                    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                    for a in 0..3 {
                        dir[a] /= n;
                        p[a] += 0.5 * dir[a];
                        let top = dims[a] as f64 - 1.0;
                        if p[a] < 0.0 || p[a] > top {
                            p[a] = p[a].clamp(0.0, top);
                            dir[a] = -dir[a];
                        }
                    }
                }
            }
        }
    }
    canvas.data
}

/// Deterministic paired sample for `(seed, task, shape, r)`.
///
/// The target does not depend on `r`; the input differs only by which slices
/// are kept.
pub fn synth_sample(seed: u64, task: usize, task_count: usize, shape: [usize; 3], r: usize, params: &SynthParams) -> Result<Sample> {
    if task_count == 0 || task_count > MAX_TASKS {
        return Err(SspError::Config(format!("task count {task_count} outside 1..={MAX_TASKS}")));
    }
    if task >= task_count {
        return Err(SspError::Label { label: task, task_count });
    }
    if shape.contains(&0) {
        return Err(SspError::Config(format!("shape {shape:?} has a zero extent")));
    }
    if r == 0 || !shape[0].is_multiple_of(r) {
        return Err(SspError::Geometry { imaging_depth: shape[0] / r.max(1), target_depth: shape[0], ratio: r });
    }
    validate_geometry(shape[0] / r, shape[0], r)?;

    let voxel = [DEFAULT_VOXEL_SIZE; 3];
    let layers: Vec<Vec<f32>> = (0..task_count).map(|t| render_task(seed, t, shape)).collect();
    let y = Volume::new(shape, layers[task].clone(), voxel)?;

    let mut mixed = vec![0.0f32; y.len()];
    for layer in &layers {
        for (m, v) in mixed.iter_mut().zip(layer) {
            *m += v;
        }
    }
    let blurred = gaussian_blur(&Volume::new(shape, mixed, voxel)?, params.blur_sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM);
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).map_err(|e| SspError::Config(e.to_string()))?;
    let plane = shape[1] * shape[2];
    let zden = (shape[0].max(2) - 1) as f64;
    let mut raw = blurred.into_data();
    for (i, v) in raw.iter_mut().enumerate() {
        let z = (i / plane) as f64;
        *v = (*v as f64 + params.z_gradient * z / zden + noise.sample(&mut rng)) as f32;
    }
    let x = zscore(&Volume::new(shape, raw, voxel)?);
    Sample::new(sparsify(&x, r)?, y, task)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHAPE: [usize; 3] = [16, 64, 64];

    #[test]
    fn deterministic() {
        let p = SynthParams::default();
        let a = synth_sample(11, 1, 3, SHAPE, 2, &p).unwrap();
        let b = synth_sample(11, 1, 3, SHAPE, 2, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn foreground_fraction_in_bounds() {
        let p = SynthParams::default();
        for task in 0..MAX_TASKS {
            for seed in [0, 1, 2] {
                let s = synth_sample(seed, task, MAX_TASKS, SHAPE, 2, &p).unwrap();
                let frac = s.y.data().iter().filter(|&&v| v > 0.5).count() as f64 / s.y.len() as f64;
                assert!(frac > 0.001 && frac < 0.5, "task {task} seed {seed}: {frac}");
            }
        }
    }

    #[test]
    fn tasks_differ_and_ratio_only_changes_input() {
        let p = SynthParams::default();
        let a = synth_sample(5, 0, 3, SHAPE, 2, &p).unwrap();
        let b = synth_sample(5, 1, 3, SHAPE, 2, &p).unwrap();
        assert_ne!(a.y, b.y);
        let c = synth_sample(5, 0, 3, SHAPE, 4, &p).unwrap();
        assert_eq!(a.y, c.y);
        assert_eq!(c.x.volume().depth(), 4);
        assert_ne!(a.x, c.x);
        // kept slices coincide across ratios
        assert_eq!(a.x.volume().slice(2), c.x.volume().slice(1));
    }

    #[test]
    fn label_and_geometry_errors() {
        let p = SynthParams::default();
        assert!(matches!(synth_sample(0, 3, 3, SHAPE, 2, &p), Err(SspError::Label { label: 3, task_count: 3 })));
        assert!(matches!(synth_sample(0, 0, 3, SHAPE, 3, &p), Err(SspError::Geometry { .. })));
    }

    #[test]
    fn names_cycle() {
        assert_eq!(task_name(0), "nucleolus");
        assert_eq!(task_name(5), "microtubule-2");
    }
}
