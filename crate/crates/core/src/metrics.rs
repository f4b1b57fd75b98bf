//! Regression metrics and relative improvement.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SspError};
use crate::voxel::Volume;

/// MSE, MAE and R² of one prediction.
///
/// `r2` is `None` when the target is constant and the coefficient of
/// determination is undefined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub mse: f64,
    pub mae: f64,
    pub r2: Option<f64>,
}

impl MetricTriple {
    pub fn constant_target(&self) -> bool {
        self.r2.is_none()
    }
}

pub fn eval_metrics(pred: &Volume, target: &Volume) -> Result<MetricTriple> {
    if pred.dims() != target.dims() {
        return Err(SspError::contract("eval_metrics", format!("prediction {:?} vs target {:?}", pred.dims(), target.dims())));
    }
    eval_slices(pred.data(), target.data())
}

pub fn eval_slices(pred: &[f32], target: &[f32]) -> Result<MetricTriple> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(SspError::contract("eval_metrics", format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let n = target.len() as f64;
    let mean = target.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sse, mut sae, mut sst) = (0.0, 0.0, 0.0);
    for (&p, &y) in pred.iter().zip(target) {
        let d = y as f64 - p as f64;
        sse += d * d;
        sae += d.abs();
        sst += (y as f64 - mean).powi(2);
    }
    if !sse.is_finite() {
        return Err(SspError::NonFinite("prediction contains non-finite values".into()));
    }
    Ok(MetricTriple { mse: sse / n, mae: sae / n, r2: (sst > 0.0).then(|| 1.0 - sse / sst) })
}

/// Mean of triples; R² averages over the entries where it is defined.
pub fn mean_triple(items: &[MetricTriple]) -> Result<MetricTriple> {
    if items.is_empty() {
        return Err(SspError::Undefined("mean of zero metric triples".into()));
    }
    let n = items.len() as f64;
    let r2s: Vec<f64> = items.iter().filter_map(|m| m.r2).collect();
    Ok(MetricTriple {
        mse: items.iter().map(|m| m.mse).sum::<f64>() / n,
        mae: items.iter().map(|m| m.mae).sum::<f64>() / n,
        r2: (!r2s.is_empty()).then(|| r2s.iter().sum::<f64>() / r2s.len() as f64),
    })
}

/// Per-task means of per-volume triples and the mean over tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub overall: MetricTriple,
    /// `(task, mean triple, volume count)` for every task with volumes.
    pub per_task: Vec<TaskMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub volumes: usize,
    #[serde(flatten)]
    pub metrics: MetricTriple,
}

/// Aggregates `(task, triple)` pairs: volumes average within a task, tasks
/// average into the overall numbers.
pub fn aggregate(per_volume: &[(usize, MetricTriple)]) -> Result<MetricSummary> {
    let mut tasks: Vec<usize> = per_volume.iter().map(|&(t, _)| t).collect();
    tasks.sort_unstable();
    tasks.dedup();
    let mut per_task = Vec::with_capacity(tasks.len());
    for task in tasks {
        let items: Vec<MetricTriple> = per_volume.iter().filter(|(t, _)| *t == task).map(|&(_, m)| m).collect();
        per_task.push(TaskMetrics { task, volumes: items.len(), metrics: mean_triple(&items)? });
    }
    let means: Vec<MetricTriple> = per_task.iter().map(|t| t.metrics).collect();
    Ok(MetricSummary { overall: mean_triple(&means)?, per_task })
}

/// Percent improvement of `method` over `baseline`; positive is better for
/// every entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
}

pub fn delta_imp(baseline: &MetricTriple, method: &MetricTriple) -> Result<Improvement> {
    let (Some(base_r2), Some(new_r2)) = (baseline.r2, method.r2) else {
        return Err(SspError::Undefined("R² missing for improvement".into()));
    };
    for (name, v) in [("MSE", baseline.mse), ("MAE", baseline.mae), ("R²", base_r2)] {
        if v == 0.0 {
            return Err(SspError::Undefined(format!("zero baseline {name}")));
        }
    }
    Ok(Improvement {
        mse: 100.0 * (baseline.mse - method.mse) / baseline.mse,
        mae: 100.0 * (baseline.mae - method.mae) / baseline.mae,
        r2: 100.0 * (new_r2 - base_r2) / base_r2,
    })
}
