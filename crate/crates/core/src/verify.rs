//! Finite-difference gradient cases for every differentiable operation.
//!
//! Each case records one operation on random inputs, reduces it to a scalar
//! with a fixed random probe, and is checked in 64-bit and 32-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchNormMode, Tape, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_f32, grad_check_params_mixed, GradCheckReport, GradOp, ParamOp};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::topology::{build_network, Mode, NetworkSpec, TopologyConfig, TopologyKind};
use crate::transform::{self, ProjectionSpace, ProjectionSpec};

pub const TOL_F64: f64 = 1e-5;
pub const TOL_F32: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-4;
const NETWORK_BATCH: usize = 8;
/// Starting step for whole networks; it shrinks wherever a perturbation
/// crosses a ReLU kink.
pub const NETWORK_FD_STEP: f64 = 1e-3;

pub fn random<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0))).unwrap()
}

/// Random entries with magnitude in `[margin, 1)`.
pub fn random_away_from_zero<T: Scalar>(shape: &[usize], seed: u64, margin: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let mag = rng.gen_range(margin..1.0);
        T::from_f64_lossy(if rng.gen_bool(0.5) { mag } else { -mag })
    })
    .unwrap()
}

/// `sum(y * r)` for a fixed random `r`.
pub fn probe<T: Scalar>(t: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let r = t.constant(random(t.shape(y), seed));
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

#[derive(Clone, Debug)]
pub enum OpKind {
    Conv2d { stride: usize, padding: usize },
    Conv3d { stride: [usize; 3], padding: [usize; 3] },
    ConvTranspose { bias: bool },
    ConvTransposeZ { stride: usize },
    BatchNormTrain,
    BatchNormEval { mean: Vec<f64>, var: Vec<f64> },
    Relu,
    Add,
    Concat,
    Slice { start: usize, len: usize },
    GlobalAvgPool,
    Linear,
    PointwiseDynamic,
    Mse { target: Tensor<f64> },
    DepthToChannel { spec: ProjectionSpec },
    ChannelToDepth { spec: ProjectionSpec },
}

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub kind: OpKind,
    pub inputs: Vec<Tensor<f64>>,
    pub seed: u64,
}

impl GradOp for GradCase {
    fn apply<T: Scalar>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let y = match &self.kind {
            OpKind::Conv2d { stride, padding } => t.conv2d(v[0], v[1], Some(v[2]), *stride, *padding)?,
            OpKind::Conv3d { stride, padding } => t.conv3d(v[0], v[1], Some(v[2]), *stride, *padding)?,
            OpKind::ConvTranspose { bias } => t.conv_transpose(v[0], v[1], bias.then(|| v[2]))?,
            OpKind::ConvTransposeZ { stride } => t.conv_transpose_z(v[0], v[1], *stride)?,
            OpKind::BatchNormTrain => t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train)?.0,
            OpKind::BatchNormEval { mean, var } => {
                let mean: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
                let var: Vec<T> = var.iter().map(|&m| T::from_f64_lossy(m)).collect();
                t.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval { mean: &mean, var: &var })?.0
            }
            OpKind::Relu => t.relu(v[0]),
            OpKind::Add => t.add(v[0], v[1])?,
            OpKind::Concat => t.concat(v)?,
            OpKind::Slice { start, len } => t.slice_channels(v[0], *start, *len)?,
            OpKind::GlobalAvgPool => t.global_avg_pool(v[0])?,
            OpKind::Linear => t.linear(v[0], v[1], v[2])?,
            OpKind::PointwiseDynamic => t.pointwise_dynamic(v[0], v[1], v[2])?,
            OpKind::Mse { target } => {
                let c = t.constant(target.cast());
                return t.mse_loss(v[0], c);
            }
            OpKind::DepthToChannel { spec } => transform::depth_to_channel(t, v[0], spec, v[1])?,
            OpKind::ChannelToDepth { spec } => transform::channel_to_depth(t, v[0], spec, v[1])?,
        };
        probe(t, y, self.seed ^ 0x5eed)
    }
}

#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub name: String,
    pub f64_report: GradCheckReport,
    pub f32_report: GradCheckReport,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.f64_report.max_relative_error < TOL_F64 && self.f32_report.max_relative_error < TOL_F32
    }
}

impl GradCase {
    pub fn run(&self) -> Result<CaseOutcome> {
        let f64_report = grad_check(|t, v| self.apply(t, v), &self.inputs, FD_STEP)?;
        let narrow: Vec<Tensor<f32>> = self.inputs.iter().map(|t| t.cast()).collect();
        let f32_report = grad_check_f32(self, &narrow, FD_STEP)?;
        Ok(CaseOutcome { name: self.name.clone(), f64_report, f32_report })
    }
}

fn case(name: &str, kind: OpKind, shapes: &[&[usize]], seed: u64) -> GradCase {
    GradCase { name: name.to_string(), kind, inputs: shapes.iter().enumerate().map(|(i, s)| random(s, seed + i as u64)).collect(), seed }
}

/// Three random shapes for every differentiable tape operation and both
/// dimension transforms in both projection spaces.
pub fn standard_cases() -> Vec<GradCase> {
    let mut cases = Vec::new();
    let mut seed = 1000;
    let mut next = || {
        seed += 16;
        seed
    };

    for (s, p, x, w) in [
        (1, 0, [1, 2, 5, 5], [3, 2, 3, 3]),
        (1, 1, [1, 2, 5, 5], [3, 2, 3, 3]),
        (2, 1, [2, 3, 6, 4], [2, 3, 3, 3]),
        (1, 0, [2, 1, 5, 7], [4, 1, 1, 1]),
    ] {
        cases.push(case("conv2d", OpKind::Conv2d { stride: s, padding: p }, &[&x, &w, &[w[0]]], next()));
    }
    for (s, p, x, w) in [
        ([1; 3], [1; 3], [1, 2, 3, 4, 4], [2, 2, 3, 3, 3]),
        ([2, 2, 2], [1, 1, 1], [2, 2, 4, 4, 4], [3, 2, 3, 3, 3]),
        ([1, 2, 2], [1, 1, 1], [1, 3, 1, 4, 6], [2, 3, 3, 3, 3]),
        ([1; 3], [0; 3], [2, 2, 2, 3, 3], [3, 2, 1, 1, 1]),
    ] {
        cases.push(case("conv3d", OpKind::Conv3d { stride: s, padding: p }, &[&x, &w, &[w[0]]], next()));
    }
    for (bias, x, w) in [
        (false, vec![1, 2, 2, 3, 3], vec![2, 2, 2, 1, 1]),
        (true, vec![2, 3, 2, 2, 2], vec![3, 2, 2, 2, 2]),
        (true, vec![2, 3, 3, 4], vec![3, 4, 2, 2]),
    ] {
        let mut shapes: Vec<&[usize]> = vec![&x, &w];
        let b = [w[1]];
        if bias {
            shapes.push(&b);
        }
        cases.push(case("conv_transpose", OpKind::ConvTranspose { bias }, &shapes, next()));
    }
    for (stride, x, w) in
        [(2, [1, 2, 2, 3, 3], [2, 2, 2, 1, 1]), (4, [2, 1, 2, 2, 3], [1, 1, 4, 1, 1]), (1, [1, 3, 2, 2, 2], [3, 3, 1, 1, 1])]
    {
        cases.push(case("conv_transpose_z", OpKind::ConvTransposeZ { stride }, &[&x, &w], next()));
    }
    for shape in [vec![2, 3, 4], vec![3, 2, 2, 3], vec![2, 2, 2, 2, 3]] {
        let c = shape[1];
        cases.push(case("batch_norm(train)", OpKind::BatchNormTrain, &[&shape, &[c], &[c]], next()));
        let s = next();
        let mean = random::<f64>(&[c], s + 7).into_data();
        let var = random::<f64>(&[c], s + 8).data().iter().map(|v| v.abs() + 0.5).collect();
        cases.push(case("batch_norm(eval)", OpKind::BatchNormEval { mean, var }, &[&shape, &[c], &[c]], s));
    }
    for shape in [vec![7], vec![2, 3, 4], vec![1, 2, 2, 2, 2]] {
        let s = next();
        let mut c = case("relu", OpKind::Relu, &[], s);
        c.inputs = vec![random_away_from_zero(&shape, s, 0.1)];
        cases.push(c);
    }
    for shape in [vec![5], vec![2, 3, 4], vec![1, 2, 3, 2, 2]] {
        let s = next();
        cases.push(case("add", OpKind::Add, &[&shape, &shape], s));
        let target = random(&shape, s + 9);
        cases.push(case("mse_loss", OpKind::Mse { target }, &[&shape], next()));
    }
    for (a, b) in [(vec![2, 3, 4], vec![2, 1, 4]), (vec![1, 2, 2, 3], vec![1, 3, 2, 3]), (vec![2, 1, 2, 2, 2], vec![2, 2, 2, 2, 2])] {
        cases.push(case("concat", OpKind::Concat, &[&a, &b], next()));
        cases.push(case(
            "slice_channels",
            OpKind::Slice { start: 1, len: b[1] },
            &[&{
                let mut s = a.clone();
                s[1] += b[1];
                s
            }],
            next(),
        ));
        cases.push(case("global_avg_pool", OpKind::GlobalAvgPool, &[&b], next()));
    }
    for (n, i, o) in [(2, 3, 4), (1, 5, 2), (3, 2, 2)] {
        cases.push(case("linear", OpKind::Linear, &[&[n, i], &[o, i], &[o]], next()));
    }
    for (n, ci, co, s) in [(2, 2, 3, 5), (1, 3, 1, 4), (3, 1, 2, 6)] {
        cases.push(case("pointwise_dynamic", OpKind::PointwiseDynamic, &[&[n, ci, s], &[n, co * ci], &[n, co]], next()));
    }
    for space in [ProjectionSpace::Embed3d, ProjectionSpace::Embed2d] {
        for (c, d, u) in [(2, 2, 4), (3, 4, 8), (1, 1, 3)] {
            let spec = ProjectionSpec::depth_to_channel(c, d, u, space).unwrap();
            let gamma = spec.gamma_shape();
            cases.push(case(&format!("depth_to_channel({space})"), OpKind::DepthToChannel { spec }, &[&[2, c, d, 3, 2], &gamma], next()));
        }
        for (c, d, u) in [(4, 2, 6), (8, 4, 8), (3, 1, 2)] {
            let spec = ProjectionSpec::channel_to_depth(c, d, u, space).unwrap();
            let gamma = spec.gamma_shape();
            cases.push(case(&format!("channel_to_depth({space})"), OpKind::ChannelToDepth { spec }, &[&[2, c, 3, 2], &gamma], next()));
        }
    }
    cases
}

/// End-to-end gradient check of a whole network in train mode.
///
/// The batch is large enough that batch norm at the bottleneck, where every
/// sample is a single voxel, still normalizes over more than two values.
#[derive(Clone, Debug)]
pub struct NetworkCase {
    pub net: NetworkSpec<f32>,
    pub input: Tensor<f64>,
    pub tasks: Vec<usize>,
    pub seed: u64,
}

impl ParamOp for NetworkCase {
    fn apply<T: Scalar>(&self, t: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let x = t.constant(self.input.cast());
        let code = t.constant(self.net.codes(&self.tasks)?.cast());
        let f = self.net.graph.forward(t, store, x, code, Mode::Train)?;
        probe(t, f.vars[self.net.output], self.seed)
    }
}

impl NetworkCase {
    /// Tiny network of `kind` on a random batch cycling through the tasks.
    pub fn tiny(kind: TopologyKind, seed: u64) -> Result<Self> {
        let net = build_network::<f32>(&TopologyConfig::tiny(kind), seed)?;
        let input = random::<f32>(&net.input_shape(NETWORK_BATCH), seed + 1).cast();
        let tasks = (0..NETWORK_BATCH).map(|i| i % net.config.task_count).collect();
        Ok(Self { net, input, tasks, seed: seed + 2 })
    }

    /// Checks `per_param` sampled entries of every trainable parameter.
    pub fn run(&self, per_param: usize) -> Result<CaseOutcome> {
        let (f64_report, f32_report) = grad_check_params_mixed(self, &self.net.params, NETWORK_FD_STEP, per_param, self.seed)?;
        Ok(CaseOutcome { name: format!("network({})", self.net.config.kind), f64_report, f32_report })
    }
}
