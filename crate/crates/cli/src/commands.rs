use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use ssp_core::pipeline::{evaluate, sliding_infer, train, Checkpoint, SlidingWindow, Start, TrainConfig};
use ssp_core::profile::count_resources;
use ssp_core::topology::build_network;
use ssp_core::voxel::{load_volume, save_volume, synth_dataset, zscore, Dataset, SparseStack, Split, SynthParams};
use ssp_core::{Result, SspError};

use crate::config::{merge, require, Layered, RunConfig, SynthBlock};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const BEST_FILE: &str = "best.sspc";
pub const LAST_FILE: &str = "last.sspc";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTION_FILE: &str = "prediction.vxg";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(SspError::OutputExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn out_dir(config: &RunConfig) -> Result<&PathBuf> {
    require(&config.out, "out")
}

pub fn synth(layered: Layered, force: bool) -> Result<()> {
    let mut config = layered.resolve(false)?;
    let block = config.synth.get_or_insert_with(SynthBlock::default).clone();
    let seed = *config.seed.get_or_insert(0);
    let out = out_dir(&config)?.clone();
    let data = synth_dataset(seed, block.tasks, block.per_task, block.shape, block.ratio, &SynthParams::default())?;
    prepare_out(&out, force)?;
    data.write(&out, true)?;
    write_json(&out.join(CONFIG_FILE), &config)?;
    let count = |s: Split| data.indices(s).len();
    print_json(&json!({
        "out": out,
        "samples": data.samples.len(),
        "train": count(Split::Train),
        "val": count(Split::Val),
        "test": count(Split::Test),
    }))
}

pub fn train_cmd(mut layered: Layered, force: bool) -> Result<()> {
    let resume = layered.value.get("resume").and_then(|v| v.as_str()).map(PathBuf::from);
    let data_dir = layered.value.get("data").and_then(|v| v.as_str()).map(PathBuf::from);
    let data = Dataset::load(data_dir.as_deref().ok_or_else(|| SspError::Config("missing `data` (flag or config key)".into()))?)?;

    let checkpoint = resume.as_deref().map(Checkpoint::load).transpose()?;
    match &checkpoint {
        Some(ck) => {
            // a resumed run keeps the stored network; only the step budget may change
            if layered.value.get("topology").is_some() || layered.value.get("preset").is_some() {
                return Err(SspError::Config("topology settings cannot change when resuming".into()));
            }
            let obj = layered.value.as_object_mut().expect("object");
            obj.insert("topology".into(), serde_json::to_value(&ck.net.config)?);
            if let Some(stored) = &ck.train {
                let mut train = serde_json::to_value(stored)?;
                if let Some(user) = obj.remove("train") {
                    merge(&mut train, user);
                }
                obj.insert("train".into(), train);
            }
        }
        None => {
            layered.default_topology_key("task_count", data.manifest.task_count);
            layered.default_topology_key("ratio", data.manifest.ratio);
        }
    }
    let mut config = layered.resolve(checkpoint.is_none())?;
    let train_cfg = config.train.get_or_insert_with(TrainConfig::default);
    if let Some(seed) = config.seed {
        train_cfg.seed = seed;
    }
    let train_cfg = train_cfg.clone();
    let out = out_dir(&config)?.clone();
    prepare_out(&out, force)?;
    write_json(&out.join(CONFIG_FILE), &config)?;

    let start = match checkpoint {
        Some(ck) => Start::Resume(Box::new(ck)),
        None => Start::Fresh(require(&config.topology, "topology")?.clone()),
    };
    let mut log = BufWriter::new(File::create(out.join(LOG_FILE))?);
    let mut log_error = None;
    let outcome = train(&train_cfg, start, &data, |entry| {
        let line = serde_json::to_string(entry).expect("log entries serialize");
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(e.into());
    }
    if let Some(best) = &outcome.best {
        best.save(&out.join(BEST_FILE))?;
    }
    outcome.last.save(&out.join(LAST_FILE))?;
    print_json(&json!({
        "out": out,
        "steps": outcome.last.step,
        "best_val_mse": outcome.last.best_val_mse,
        "best_step": outcome.best.as_ref().map(|b| b.step),
    }))
}

fn window_of(ck: &Checkpoint) -> SlidingWindow {
    match &ck.train {
        Some(t) => t.window(ck.net.config.patch),
        None => SlidingWindow::new(ck.net.config.patch),
    }
}

pub fn eval(layered: Layered, force: bool) -> Result<()> {
    let mut config = layered.resolve(false)?;
    let split = *config.split.get_or_insert(Split::Val);
    let ck = Checkpoint::load(require(&config.checkpoint, "checkpoint")?)?;
    let data = Dataset::load(require(&config.data, "data")?)?;
    let summary =
        evaluate(&ck.net, &data, split, &window_of(&ck))?.ok_or_else(|| SspError::Config(format!("dataset has no {split} samples")))?;
    let report = json!({ "split": split, "step": ck.step, "metrics": summary });
    if let Some(out) = &config.out {
        prepare_out(out, force)?;
        write_json(&out.join(METRICS_FILE), &report)?;
        write_json(&out.join(CONFIG_FILE), &config)?;
    }
    print_json(&report)
}

pub fn infer(layered: Layered, force: bool) -> Result<()> {
    let config = layered.resolve(false)?;
    let ck = Checkpoint::load(require(&config.checkpoint, "checkpoint")?)?;
    let task = *require(&config.task, "task")?;
    let input = load_volume(require(&config.input, "input")?)?;
    let out = out_dir(&config)?.clone();
    let r = ck.net.config.ratio;
    let stack = SparseStack::new(zscore(&input), r, input.depth() * r)?;
    let pred = sliding_infer(&ck.net, task, &stack, &window_of(&ck))?;
    prepare_out(&out, force)?;
    let path = out.join(PREDICTION_FILE);
    save_volume(&pred, &path)?;
    write_json(&out.join(CONFIG_FILE), &config)?;
    print_json(&json!({ "output": path, "dims": pred.dims(), "task": task }))
}

pub fn profile(layered: Layered, force: bool, json_output: bool) -> Result<()> {
    let mut config = layered.resolve(true)?;
    let batch = *config.batch.get_or_insert(1);
    if batch == 0 {
        return Err(SspError::Config("batch must be at least 1".into()));
    }
    let topology = require(&config.topology, "topology")?;
    let net = build_network::<f32>(topology, config.seed.unwrap_or(0))?;
    let report = count_resources(&net, batch)?;
    if let Some(out) = &config.out {
        prepare_out(out, force)?;
        write_json(&out.join(REPORT_JSON), &report)?;
        fs::write(out.join(REPORT_TABLE), report.render_table())?;
        write_json(&out.join(CONFIG_FILE), &config)?;
    }
    if json_output {
        print_json(&report)
    } else {
        print!("{}", report.render_table());
        Ok(())
    }
}
