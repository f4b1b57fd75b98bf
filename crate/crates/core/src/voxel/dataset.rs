use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_volume, save_volume, synth_sample, task_name, Sample, SparseStack, SynthParams};
use crate::error::{Result, SspError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = SspError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(SspError::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// `(train, val, test)` for `n` samples of one task: a quarter (floored) for
/// evaluation, then a tenth of the remainder (floored) for testing.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let val = n / 4;
    let test = (n - val) / 10;
    (n - val - test, val, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub task: usize,
    pub split: Split,
    pub x: String,
    pub y: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub task_count: usize,
    pub task_names: Vec<String>,
    pub seed: u64,
    pub ratio: usize,
    pub shape: [usize; 3],
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    fn validate(&self) -> Result<()> {
        if self.task_names.len() != self.task_count {
            return Err(SspError::Config(format!("manifest lists {} task names for {} tasks", self.task_names.len(), self.task_count)));
        }
        let mut ids = std::collections::HashSet::new();
        for e in &self.samples {
            if e.task >= self.task_count {
                return Err(SspError::Label { label: e.task, task_count: self.task_count });
            }
            if !ids.insert(&e.id) {
                return Err(SspError::Config(format!("duplicate sample id {}", e.id)));
            }
        }
        Ok(())
    }
}

/// Samples with their manifest; `samples[i]` pairs with `manifest.samples[i]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_seed(seed: u64, task: usize, index: usize) -> u64 {
    mix(mix(mix(seed) ^ task as u64) ^ index as u64)
}

/// Generates `per_task` samples for each of `task_count` tasks and assigns
/// splits per task.
pub fn synth_dataset(
    seed: u64,
    task_count: usize,
    per_task: usize,
    shape: [usize; 3],
    ratio: usize,
    params: &SynthParams,
) -> Result<Dataset> {
    if task_count == 0 {
        return Err(SspError::Config("task count must be at least 1".into()));
    }
    if per_task == 0 {
        return Err(SspError::Config("samples per task must be at least 1".into()));
    }
    let mut entries = Vec::with_capacity(task_count * per_task);
    for task in 0..task_count {
        let (_, val, test) = split_counts(per_task);
        let mut order: Vec<usize> = (0..per_task).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x5711_7000));
        rng.set_stream(task as u64);
        order.shuffle(&mut rng);
        let mut tags = vec![Split::Train; per_task];
        for (rank, &i) in order.iter().enumerate() {
            if rank < val {
                tags[i] = Split::Val;
            } else if rank < val + test {
                tags[i] = Split::Test;
            }
        }
        for (i, split) in tags.into_iter().enumerate() {
            let id = format!("t{task:02}_{i:04}");
            entries.push(ManifestEntry { x: format!("volumes/{id}_x.vxg"), y: format!("volumes/{id}_y.vxg"), id, task, split });
        }
    }
    let samples = entries
        .par_iter()
        .map(|e| {
            let i: usize = e.id[4..].parse().expect("generated id");
            synth_sample(sample_seed(seed, e.task, i), e.task, task_count, shape, ratio, params)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: Manifest { task_count, task_names: (0..task_count).map(task_name).collect(), seed, ratio, shape, samples: entries },
        samples,
    })
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.manifest.samples[i].split == split).collect()
    }

    /// Writes volumes and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path, force: bool) -> Result<()> {
        if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
            return Err(SspError::OutputExists(dir.to_path_buf()));
        }
        fs::create_dir_all(dir.join("volumes"))?;
        for (e, s) in self.manifest.samples.iter().zip(&self.samples) {
            save_volume(s.x.volume(), dir.join(&e.x))?;
            save_volume(&s.y, dir.join(&e.y))?;
        }
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        manifest.validate()?;
        let samples = manifest
            .samples
            .iter()
            .map(|e| {
                let y = load_volume(dir.join(&e.y))?;
                let x = SparseStack::new(load_volume(dir.join(&e.x))?, manifest.ratio, y.depth())?;
                Sample::new(x, y, e.task)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, samples })
    }
}
