//! Minibatch training with Adam on MSE, with periodic validation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::window::{SlidingWindow, DEFAULT_OVERLAP, DEFAULT_SIGMA_SCALE};
use crate::autograd::Tape;
use crate::error::{Result, SspError};
use crate::metrics::{aggregate, eval_metrics, MetricSummary, TaskMetrics};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::topology::{build_network, Mode, NetworkSpec, TopologyConfig};
use crate::voxel::{zscore, Dataset, Sample, SparseStack, Split, Volume};

/// Stream of the batch sampler; initialization draws from stream 0.
const SAMPLER_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_interval: usize,
    pub overlap: f64,
    pub sigma_scale: f64,
    /// Random H/W flips of each crop.
    pub flips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 1e-4,
            seed: 0,
            eval_interval: 100,
            overlap: DEFAULT_OVERLAP,
            sigma_scale: DEFAULT_SIGMA_SCALE,
            flips: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SspError::Config("batch size must be at least 1".into()));
        }
        if self.eval_interval == 0 || (self.steps > 0 && self.eval_interval > self.steps) {
            return Err(SspError::Config(format!("eval interval {} must be in 1..={}", self.eval_interval, self.steps.max(1))));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SspError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(SspError::Config(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        if !(self.sigma_scale >= 0.0 && self.sigma_scale.is_finite()) {
            return Err(SspError::Config(format!("sigma scale {} must be non-negative", self.sigma_scale)));
        }
        Ok(())
    }

    pub fn window(&self, patch: [usize; 3]) -> SlidingWindow {
        SlidingWindow { window: patch, overlap: self.overlap, sigma_scale: self.sigma_scale }
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    /// Mean training loss since the previous entry.
    pub loss: f64,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub r2: Option<f64>,
    pub per_task: Vec<TaskMetrics>,
}

pub struct TrainOutcome {
    /// Checkpoint with the lowest validation MSE seen in this run; `None`
    /// when a resumed run never beat the stored best.
    pub best: Option<Checkpoint>,
    pub last: Checkpoint,
    pub log: Vec<LogEntry>,
}

/// Normalized copy of a sample: both sides z-scored per volume.
pub fn normalize(sample: &Sample) -> Result<Sample> {
    let x = SparseStack::new(zscore(sample.x.volume()), sample.x.ratio(), sample.x.dense_depth())?;
    Sample::new(x, zscore(&sample.y), sample.task)
}

fn check_dataset(topo: &TopologyConfig, data: &Dataset) -> Result<()> {
    if data.manifest.task_count > topo.task_count {
        return Err(SspError::Config(format!("dataset has {} tasks, topology supports {}", data.manifest.task_count, topo.task_count)));
    }
    if data.manifest.ratio != topo.ratio {
        return Err(SspError::Config(format!("dataset ratio {} but topology ratio {}", data.manifest.ratio, topo.ratio)));
    }
    for (s, e) in data.samples.iter().zip(&data.manifest.samples) {
        if s.task >= topo.task_count {
            return Err(SspError::Label { label: s.task, task_count: topo.task_count });
        }
        if s.x.ratio() != topo.ratio {
            return Err(SspError::Config(format!("sample {} has ratio {}", e.id, s.x.ratio())));
        }
        if (0..3).any(|a| s.y.dims()[a] < topo.patch[a]) {
            return Err(SspError::Config(format!("sample {} of {:?} is smaller than patch {:?}", e.id, s.y.dims(), topo.patch)));
        }
    }
    Ok(())
}

/// Metrics of a split, predicted tile by tile over each full volume.
pub fn evaluate(net: &NetworkSpec<f32>, data: &Dataset, split: Split, window: &SlidingWindow) -> Result<Option<MetricSummary>> {
    let mut per_volume = Vec::new();
    for i in data.indices(split) {
        let s = normalize(&data.samples[i])?;
        let pred = window.infer(&super::window::NetPredictor { net, task: s.task }, &s.x)?;
        per_volume.push((s.task, eval_metrics(&pred, &s.y)?));
    }
    if per_volume.is_empty() {
        return Ok(None);
    }
    aggregate(&per_volume).map(Some)
}

/// Random patch of a normalized sample: depth offset on a sparse slice,
/// optional H/W flips.
fn crop(s: &Sample, patch: [usize; 3], flips: bool, rng: &mut ChaCha8Rng) -> Result<(SparseStack, Volume)> {
    let r = s.x.ratio();
    let dims = s.y.dims();
    let oz = r * rng.gen_range(0..=(dims[0] - patch[0]) / r);
    let oy = rng.gen_range(0..=dims[1] - patch[1]);
    let ox = rng.gen_range(0..=dims[2] - patch[2]);
    let flip = if flips { [false, rng.gen::<bool>(), rng.gen::<bool>()] } else { [false; 3] };
    let x = s.x.volume().crop([oz / r, oy, ox], [patch[0] / r, patch[1], patch[2]])?.flipped(flip);
    let y = s.y.crop([oz, oy, ox], patch)?.flipped(flip);
    Ok((SparseStack::new(x, r, patch[0])?, y))
}

fn stack_batch(items: &[Volume]) -> Result<Tensor<f32>> {
    let dims = items[0].dims();
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for v in items {
        data.extend_from_slice(v.data());
    }
    Tensor::new(&[items.len(), 1, dims[0], dims[1], dims[2]], data)
}

/// Where training starts from.
pub enum Start {
    Fresh(TopologyConfig),
    Resume(Box<Checkpoint>),
}

/// Trains until `config.steps` total steps; `on_log` sees each log entry as
/// it is produced.
pub fn train(config: &TrainConfig, start: Start, data: &Dataset, mut on_log: impl FnMut(&LogEntry)) -> Result<TrainOutcome> {
    config.validate()?;
    let (mut net, mut adam, mut rng, first_step, mut best_mse) = match start {
        Start::Fresh(topo) => {
            topo.validate()?;
            let net = build_network::<f32>(&topo, config.seed)?;
            let adam = Adam::new(&net.params, AdamConfig { lr: config.lr, ..AdamConfig::default() });
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(SAMPLER_STREAM);
            (net, adam, rng, 0u64, None)
        }
        Start::Resume(ck) => {
            let ck = *ck;
            let rng = match &ck.rng {
                Some(s) => s.restore()?,
                None => return Err(SspError::Config("checkpoint has no sampler state to resume from".into())),
            };
            let adam = ck.optimizer.ok_or_else(|| SspError::Config("checkpoint has no optimizer state to resume from".into()))?;
            (ck.net, adam, rng, ck.step, ck.best_val_mse)
        }
    };
    check_dataset(&net.config, data)?;
    let patch = net.config.patch;
    let window = config.window(patch);

    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() && config.steps as u64 > first_step {
        return Err(SspError::Config("dataset has no training samples".into()));
    }
    let train_set: Vec<Sample> = train_idx.iter().map(|&i| normalize(&data.samples[i])).collect::<Result<_>>()?;

    let snapshot = |net: &NetworkSpec<f32>, adam: &Adam<f32>, rng: &ChaCha8Rng, step: u64, best: Option<f64>| Checkpoint {
        net: net.clone(),
        train: Some(config.clone()),
        optimizer: Some(adam.clone()),
        step,
        rng: Some(RngState::capture(rng)),
        best_val_mse: best,
    };

    let mut best = None;
    let mut log = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0f64, 0usize);
    for step in first_step + 1..=config.steps as u64 {
        let mut xs = Vec::with_capacity(config.batch_size);
        let mut ys = Vec::with_capacity(config.batch_size);
        let mut tasks = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let s = &train_set[rng.gen_range(0..train_set.len())];
            let (x, y) = crop(s, patch, config.flips, &mut rng)?;
            xs.push(net.prepare_input(&x)?);
            ys.push(y);
            tasks.push(s.task);
        }

        let mut tape = Tape::new();
        let input = tape.constant(stack_batch(&xs)?);
        let target = tape.constant(stack_batch(&ys)?);
        let f = net.forward_tape(&mut tape, input, &tasks, Mode::Train)?;
        let loss = tape.mse_loss(f.vars[net.output], target)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(SspError::NonFinite(format!("training loss {value} at step {step}")));
        }
        let grads = tape.backward(loss)?;
        net.params.zero_grad();
        grads.accumulate_into(&mut net.params)?;
        adam.step(&mut net.params);
        net.apply_batch_stats(&f.bn);
        loss_sum += value;
        loss_count += 1;

        if step % config.eval_interval as u64 == 0 || step == config.steps as u64 {
            let summary = evaluate(&net, data, Split::Val, &window)?;
            let entry = LogEntry {
                step,
                loss: loss_sum / loss_count as f64,
                mse: summary.as_ref().map(|s| s.overall.mse),
                mae: summary.as_ref().map(|s| s.overall.mae),
                r2: summary.as_ref().and_then(|s| s.overall.r2),
                per_task: summary.map(|s| s.per_task).unwrap_or_default(),
            };
            (loss_sum, loss_count) = (0.0, 0);
            if let Some(mse) = entry.mse {
                if best_mse.is_none_or(|b| mse < b) {
                    best_mse = Some(mse);
                    best = Some(snapshot(&net, &adam, &rng, step, best_mse));
                }
            }
            on_log(&entry);
            log.push(entry);
        }
    }

    let last = snapshot(&net, &adam, &rng, first_step.max(config.steps as u64), best_mse);
    if first_step == 0 && best.is_none() {
        best = Some(last.clone());
    }
    Ok(TrainOutcome { best, last, log })
}
