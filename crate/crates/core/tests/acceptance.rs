//! Acceptance suite: one PASS/FAIL line per criterion, then a single verdict.
//!
//! Run with `cargo test -p ssp-core --test acceptance -- --nocapture` to see
//! the lines.

use std::time::Instant;

use ssp_core::interp::{prefix_upsample, InterpKind, InterpMode};
use ssp_core::metrics::{delta_imp, MetricTriple};
use ssp_core::pipeline::{evaluate, sliding_infer, train, Checkpoint, SlidingWindow, Start, TrainConfig};
use ssp_core::profile::count_resources;
use ssp_core::topology::{build_network, TopologyConfig, TopologyKind};
use ssp_core::transform::{channel_to_depth, depth_to_channel, fold_input_to_2d, unfold_output_to_3d, ProjectionSpace, ProjectionSpec};
use ssp_core::verify::{random, standard_cases, NetworkCase};
use ssp_core::voxel::{
    decode_volume, encode_volume, load_volume, save_volume, sparsify, synth_dataset, SparseStack, Split, SynthParams, Volume,
};
use ssp_core::{Result, Tape};

/// Outcome of one criterion.
struct Line {
    ok: bool,
    detail: String,
}

fn check(ok: bool, detail: impl Into<String>) -> Line {
    Line { ok, detail: detail.into() }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn triple(mse: f64, mae: f64, r2: f64) -> MetricTriple {
    MetricTriple { mse, mae, r2: Some(r2) }
}

fn improvement_arithmetic() -> Result<Line> {
    let base = triple(0.5341, 0.4269, 0.4337);
    let rows = [(triple(0.4995, 0.4113, 0.4693), [6.4782, 3.6543, 8.2084]), (triple(0.5386, 0.4231, 0.4292), [-0.8425, 0.8901, -1.037])];
    let mut ok = true;
    let mut detail = Vec::new();
    for (new, want) in rows {
        let d = delta_imp(&base, &new)?;
        let got = [d.mse, d.mae, d.r2];
        ok &= got.iter().zip(want).all(|(g, w)| close(*g, w, 1e-3));
        detail.push(format!("{:+.4}/{:+.4}/{:+.4}", got[0], got[1], got[2]));
    }
    Ok(check(ok, detail.join(", ")))
}

fn shape_contracts() -> Result<Line> {
    let net = build_network::<f32>(&TopologyConfig::paper(TopologyKind::Hybrid3to2d), 0)?;
    let shapes = net.shapes(1)?;
    let bottleneck = shapes[*net.levels.last().expect("levels")].clone();
    let specs = net.config.projection_specs()?.unwrap_or_default();
    let deepest = specs.iter().find(|s| s.depth == 2 && s.in_channels == 256);
    let lm = deepest.map(|s| (s.lambda, s.mu));

    let flat = build_network::<f32>(&TopologyConfig::paper(TopologyKind::Pure2d), 0)?;
    let shapes2d = flat.shapes(1)?;
    let head = flat.graph.nodes.iter().position(|n| n.name == "head.out").expect("head.out");
    let head_channels = shapes2d[head][1];

    let ok = bottleneck == [1, 256, 2, 8, 8] && lm == Some((256, 128)) && head_channels == 32;
    Ok(check(ok, format!("bottleneck {bottleneck:?}, (lambda, mu) {lm:?}, pure2d head {head_channels} channels")))
}

fn resource_ordering() -> Result<Line> {
    let mut totals = Vec::new();
    for kind in TopologyKind::ALL {
        let net = build_network::<f32>(&TopologyConfig::paper(kind), 0)?;
        totals.push((kind, count_resources(&net, 1)?.total_macs));
    }
    let macs: Vec<u64> = totals.iter().map(|t| t.1).collect();
    let ordered = macs.windows(2).all(|w| w[0] < w[1]);
    let ratio = macs[3] as f64 / macs[0] as f64;
    let listing: Vec<String> = totals.iter().map(|(k, m)| format!("{k} {:.2}G", *m as f64 / 1e9)).collect();
    Ok(check(ordered && ratio >= 10.0, format!("{}; pure3d/pure2d {ratio:.1}x", listing.join(" < "))))
}

fn gradient_oracles() -> Result<Line> {
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut worst = (0.0f64, 0.0f64);
    let cases = standard_cases();
    for case in &cases {
        let out = case.run()?;
        worst.0 = worst.0.max(out.f64_report.max_relative_error);
        worst.1 = worst.1.max(out.f32_report.max_relative_error);
        if !out.passed() {
            failed.push(out.name);
        }
    }
    let mut skipped = Vec::new();
    for kind in TopologyKind::ALL {
        let out = NetworkCase::tiny(kind, 40)?.run(1)?;
        worst.0 = worst.0.max(out.f64_report.max_relative_error);
        worst.1 = worst.1.max(out.f32_report.max_relative_error);
        skipped.push(format!("{kind} {}", out.f64_report.skipped));
        if !out.passed() {
            failed.push(out.name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(check(
        failed.is_empty() && secs < 300.0,
        format!(
            "{} op cases + 4 networks, worst rel err {:.1e} (f64) / {:.1e} (f32), kink skips [{}], {secs:.0}s{}",
            cases.len(),
            worst.0,
            worst.1,
            skipped.join(", "),
            if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") },
        ),
    ))
}

/// Steps, batch and learning rate of the desk comparison.
const DESK_STEPS: usize = 1500;
const DESK_BATCH: usize = 2;
const DESK_LR: f64 = 1e-3;

fn desk_learning() -> Result<Line> {
    let start = Instant::now();
    let data = synth_dataset(5, 3, 20, [16, 64, 64], 2, &SynthParams::default())?;
    let config = TrainConfig {
        steps: DESK_STEPS,
        batch_size: DESK_BATCH,
        lr: DESK_LR,
        eval_interval: DESK_STEPS / 6,
        seed: 0,
        ..TrainConfig::default()
    };
    let window = config.window([16, 64, 64]);
    let mut results = Vec::new();
    for interp in [InterpKind::Prefix, InterpKind::None] {
        let mut topology = TopologyConfig::desk(TopologyKind::Hybrid3to2d);
        topology.interp = interp;
        topology.interp_mode = InterpMode::Nearest;
        let initial = evaluate(&build_network::<f32>(&topology, config.seed)?, &data, Split::Val, &window)?;
        let out = train(&config, Start::Fresh(topology), &data, |_| {})?;
        let last = evaluate(&out.last.net, &data, Split::Val, &window)?.expect("val split is not empty").overall;
        let drop = match (out.log.first(), out.log.last()) {
            (Some(a), Some(b)) => 100.0 * (1.0 - b.loss / a.loss),
            _ => f64::NAN,
        };
        results.push((interp, initial.map(|s| s.overall.mse), last, drop));
    }
    let secs = start.elapsed().as_secs_f64();
    let (prefix, none) = (&results[0], &results[1]);
    let r2 = prefix.2.r2.unwrap_or(f64::NAN);
    let ok = r2 >= 0.5 && prefix.2.mse < none.2.mse && secs <= 1800.0;
    Ok(check(
        ok,
        format!(
            "{DESK_STEPS} steps: prefix val R2 {r2:.3} MSE {:.4} (untrained {:.4}, train loss -{:.0}%), none val MSE {:.4}, {secs:.0}s",
            prefix.2.mse,
            prefix.1.unwrap_or(f64::NAN),
            prefix.3,
            none.2.mse,
        ),
    ))
}

fn sparse_view_reduction() -> Result<Line> {
    let dense = Volume::from_fn([32, 8, 8], |z, y, x| (z * 64 + y * 8 + x) as f32)?;
    let s = sparsify(&dense, 8)?;
    let depth = s.volume().depth();
    let reduction = 100.0 * (1.0 - depth as f64 / 32.0);
    Ok(check(depth == 4 && reduction == 87.5, format!("{depth} slices kept, {reduction}% fewer")))
}

fn round_trips() -> Result<Line> {
    let mut failures = Vec::new();

    let v = Volume::from_fn([5, 7, 3], |z, y, x| ((z * 31 + y * 7 + x) as f32).sin() * 1e3)?.with_voxel_size([0.29, 0.108, 0.108])?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("v.vxg");
    save_volume(&v, &path)?;
    let back = load_volume(&path)?;
    if decode_volume(&encode_volume(&v))? != v
        || back.data().iter().zip(v.data()).any(|(a, b)| a.to_bits() != b.to_bits())
        || back.voxel_size() != v.voxel_size()
    {
        failures.push("vxg");
    }

    for r in [1, 2, 4, 8] {
        let x = SparseStack::new(Volume::from_fn([3, 4, 5], |z, y, x| (z * 20 + y * 5 + x) as f32)?, r, 3 * r)?;
        let again = sparsify(&prefix_upsample(&x, InterpMode::Nearest)?, r)?;
        if again.volume() != x.volume() {
            failures.push("sparsify(prefix)");
        }
    }

    let mut t = Tape::<f32>::new();
    let x = t.constant(random(&[2, 1, 8, 6, 5], 1));
    let f = fold_input_to_2d(&mut t, x)?;
    let u = unfold_output_to_3d(&mut t, f)?;
    if t.value(u) != t.value(x) {
        failures.push("fold/unfold");
    }

    let (c, d) = (12, 4);
    let down = ProjectionSpec::channel_to_depth(c, d, c, ProjectionSpace::Embed2d)?;
    let up = ProjectionSpec::depth_to_channel(c / d, d, c, ProjectionSpace::Embed2d)?;
    let x = t.constant(random(&[2, c, 3, 5], 2));
    let g1 = t.constant(down.identity_gamma()?);
    let g2 = t.constant(up.identity_gamma()?);
    let z = channel_to_depth(&mut t, x, &down, g1)?;
    let y = depth_to_channel(&mut t, z, &up, g2)?;
    if t.value(y) != t.value(x) {
        failures.push("transform");
    }

    for kind in TopologyKind::ALL {
        let ck = Checkpoint::initial(build_network::<f32>(&TopologyConfig::tiny(kind), 6)?);
        let x = random::<f32>(&ck.net.input_shape(2), 7);
        let before = ck.net.predict(&x, &[0, 1])?;
        let back = Checkpoint::decode(&ck.encode()?)?;
        if back.net.predict(&x, &[0, 1])? != before {
            failures.push("checkpoint");
        }
    }

    Ok(check(
        failures.is_empty(),
        if failures.is_empty() {
            "vxg, sparsify(prefix), fold/unfold, transform, checkpoint forward all exact".to_string()
        } else {
            format!("mismatch in {failures:?}")
        },
    ))
}

fn sliding_window() -> Result<Line> {
    let c = 0.37f32;
    let stack = sparsify(&Volume::from_fn([12, 20, 28], |z, y, x| (z + 2 * y + 3 * x) as f32)?, 2)?;
    let sw = SlidingWindow::new([4, 8, 8]);
    let out = sw.infer(&|t: &SparseStack| Volume::from_fn([t.dense_depth(), 8, 8], |_, _, _| c), &stack)?;
    let constant_err = out.data().iter().map(|v| (v - c).abs()).fold(0.0f32, f32::max);

    let mut cfg = TopologyConfig::tiny(TopologyKind::Hybrid3to2d);
    cfg.patch = [16, 16, 16];
    let net = build_network::<f32>(&cfg, 3)?;
    let stack = sparsify(&Volume::from_fn([16, 16, 16], |z, y, x| ((z * 3 + y * 5 + x) as f32 * 0.1).cos())?, cfg.ratio)?;
    let single = net.forward(&stack, 1)? == sliding_infer(&net, 1, &stack, &SlidingWindow::new(cfg.patch))?;

    // a predictor of ones reports the normalized weight field itself
    let big = SparseStack::new(Volume::zeros([24, 192, 192])?, 2, 48)?;
    let window = [32, 128, 128];
    let field = SlidingWindow::new(window).infer(&|t: &SparseStack| Volume::from_fn([t.dense_depth(), 128, 128], |_, _, _| 1.0), &big)?;
    let field_err = field.data().iter().map(|v| (v - 1.0).abs()).fold(0.0f32, f32::max);

    Ok(check(
        constant_err < 1e-6 && single && field_err < 1e-6 && field.dims() == [48, 192, 192],
        format!("constant err {constant_err:.1e}, single tile exact: {single}, weight field err {field_err:.1e} on 48x192x192"),
    ))
}

type Criterion = fn() -> Result<Line>;

#[test]
fn acceptance() {
    let criteria: [(&str, Criterion); 8] = [
        ("improvement arithmetic", improvement_arithmetic),
        ("shape contracts", shape_contracts),
        ("resource ordering", resource_ordering),
        ("gradient oracles", gradient_oracles),
        ("desk-scale learning", desk_learning),
        ("sparse-view reduction", sparse_view_reduction),
        ("round trips", round_trips),
        ("sliding window", sliding_window),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let line = run().unwrap_or_else(|e| check(false, format!("error: {e}")));
        let status = if line.ok { "PASS" } else { "FAIL" };
        println!("[{status}] {}. {name}: {} ({:.1}s)", i + 1, line.detail, start.elapsed().as_secs_f64());
        if !line.ok {
            failed.push(*name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
