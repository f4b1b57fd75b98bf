//! The four network topologies over a residual encoder-decoder skeleton.
//!
//! Networks are built as a [`Graph`] of layers plus a [`ParamStore`]. The same
//! graph is interpreted on a tape for training and inference and walked
//! symbolically for shape inference and resource counting.

mod config;
mod graph;
mod head;

pub use config::{TopologyConfig, TopologyKind, HEAD_HIDDEN, LEVELS};
pub use graph::{infer_shape, layer_macs, BnUpdate, Forward, Graph, Layer, Mode, Node, NodeId};
pub use head::{code_batch, controller_outputs, dynamic_head, one_hot, TaskCode};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, BN_MOMENTUM};
use crate::error::{Result, SspError};
use crate::interp::{make_postfix_upsampler, prefix_upsample, InterpKind};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::voxel::{SparseStack, Volume};

/// Scale of the controller weights relative to a unit fan-in bound.
const CONTROLLER_INIT: f32 = 0.1;
/// Scale of the output projection relative to a unit-gain fan-in bound.
const OUTPUT_INIT: f64 = 0.1;

/// A realized network: layer graph, parameters and landmarks.
#[derive(Clone, Debug)]
pub struct NetworkSpec<T> {
    pub config: TopologyConfig,
    pub graph: Graph,
    pub params: ParamStore<T>,
    /// Output of each encoder level; the last is the bottleneck.
    pub levels: Vec<NodeId>,
    /// Skip features handed to the decoder, one per level.
    pub skips: Vec<NodeId>,
    pub output: NodeId,
}

struct Builder<T> {
    graph: Graph,
    store: ParamStore<T>,
    shapes: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn node(&mut self, name: &str, layer: Layer) -> Result<NodeId> {
        let shape = match layer {
            Layer::Input | Layer::TaskCode => unreachable!("sources are pushed with explicit shapes"),
            ref l => infer_shape(l, &self.shapes, &self.store).map_err(|e| SspError::Config(format!("{name}: {e}")))?,
        };
        self.shapes.push(shape);
        Ok(self.graph.push(name, layer))
    }

    fn source(&mut self, name: &str, layer: Layer, shape: Vec<usize>) -> NodeId {
        self.shapes.push(shape);
        self.graph.push(name, layer)
    }

    fn param(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        self.store.add(name, value, trainable)
    }

    /// Kaiming-uniform fan-in values drawn in 32-bit so every precision
    /// starts from identical weights.
    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        self.uniform(shape, bound)
    }

    fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor<T> {
        let dist = Uniform::new_inclusive(-bound, bound);
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng) as f64)).expect("nonzero extents")
    }

    fn channels(&self, x: NodeId) -> usize {
        self.shapes[x][1]
    }

    fn is_3d(&self, x: NodeId) -> bool {
        self.shapes[x].len() == 5
    }

    fn conv(&mut self, name: &str, x: NodeId, c_out: usize, k: usize, stride: [usize; 3], bias: bool) -> Result<NodeId> {
        let c_in = self.channels(x);
        let mut shape = vec![c_out, c_in];
        shape.extend(std::iter::repeat_n(k, if self.is_3d(x) { 3 } else { 2 }));
        let fan_in = shape[1..].iter().product();
        let value = self.kaiming(&shape, fan_in);
        let w = self.param(format!("{name}.weight"), value, true);
        let b = bias.then(|| self.param(format!("{name}.bias"), Tensor::zeros(&[c_out]).unwrap(), true));
        let p = k / 2;
        self.node(name, Layer::Conv { x, w, b, stride, padding: [p; 3] })
    }

    fn bn(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let c = self.channels(x);
        let ones = Tensor::full(&[c], T::one()).unwrap();
        let zeros = Tensor::zeros(&[c]).unwrap();
        let scale = self.param(format!("{name}.scale"), ones.clone(), true);
        let shift = self.param(format!("{name}.shift"), zeros.clone(), true);
        let running_mean = self.param(format!("{name}.running_mean"), zeros, false);
        let running_var = self.param(format!("{name}.running_var"), ones, false);
        self.node(name, Layer::BatchNorm { x, scale, shift, running_mean, running_var })
    }

    fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.node(name, Layer::Relu { x })
    }

    /// `relu(bn(conv(relu(bn(conv(x))))) + skip)` with a 1x1 projection on
    /// the skip path when channels or resolution change.
    fn res_block(&mut self, name: &str, x: NodeId, c_out: usize, stride: [usize; 3]) -> Result<NodeId> {
        let h = self.conv(&format!("{name}.conv1"), x, c_out, 3, stride, false)?;
        let h = self.bn(&format!("{name}.bn1"), h)?;
        let h = self.relu(&format!("{name}.relu1"), h)?;
        let h = self.conv(&format!("{name}.conv2"), h, c_out, 3, [1; 3], false)?;
        let h = self.bn(&format!("{name}.bn2"), h)?;
        let skip =
            if self.channels(x) != c_out || stride != [1; 3] { self.conv(&format!("{name}.proj"), x, c_out, 1, stride, false)? } else { x };
        let s = self.node(&format!("{name}.add"), Layer::Add { a: h, b: skip })?;
        self.relu(&format!("{name}.relu2"), s)
    }

    /// Transposed convolution with kernel equal to stride, then norm and ReLU.
    fn up(&mut self, name: &str, x: NodeId, c_out: usize, stride: [usize; 3]) -> Result<NodeId> {
        let c_in = self.channels(x);
        let mut shape = vec![c_in, c_out];
        if self.is_3d(x) {
            shape.extend_from_slice(&stride);
        } else {
            shape.extend_from_slice(&stride[1..]);
        }
        let value = self.kaiming(&shape, c_in);
        let w = self.param(format!("{name}.weight"), value, true);
        let h = self.node(name, Layer::ConvTranspose { x, w, b: None })?;
        let h = self.bn(&format!("{name}.bn"), h)?;
        self.relu(&format!("{name}.relu"), h)
    }
}

/// Builds the network for `config` with parameters drawn from `seed`.
pub fn build_network<T: Scalar>(config: &TopologyConfig, seed: u64) -> Result<NetworkSpec<T>> {
    config.validate()?;
    let kind = config.kind;
    let ce = &config.encoder_channels;
    let [_, h, w] = config.patch;
    let d_in = config.input_depth();
    let zs = config.z_strides();
    let mut b = Builder { graph: Graph::default(), store: ParamStore::new(), shapes: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };

    let input = b.source("input", Layer::Input, vec![1, 1, d_in, h, w]);
    let code = b.source("task_code", Layer::TaskCode, vec![1, config.task_count]);
    let mut cur = if kind.encoder_is_3d() { input } else { b.node("fold", Layer::Fold { x: input })? };

    let mut levels = Vec::with_capacity(LEVELS);
    for k in 0..LEVELS {
        let stride = if k == 0 { [1; 3] } else { [if kind.encoder_is_3d() { zs[k] } else { 1 }, 2, 2] };
        cur = b.res_block(&format!("enc{}.block1", k + 1), cur, ce[k], stride)?;
        cur = b.res_block(&format!("enc{}.block2", k + 1), cur, ce[k], [1; 3])?;
        levels.push(cur);
    }

    let skips = match config.projection_specs()? {
        None => levels.clone(),
        Some(specs) => {
            let mut out = Vec::with_capacity(LEVELS);
            for (k, spec) in specs.into_iter().enumerate() {
                let shape = spec.gamma_shape();
                let value = b.kaiming(&shape, spec.lambda);
                let gamma = b.param(format!("skip{}.gamma", k + 1), value, true);
                let x = levels[k];
                let layer = if kind == TopologyKind::Hybrid3to2d {
                    Layer::DepthToChannel { x, spec, gamma }
                } else {
                    Layer::ChannelToDepth { x, spec, gamma }
                };
                let name = format!("skip{}.{}", k + 1, layer.kind_name());
                out.push(b.node(&name, layer)?);
            }
            out
        }
    };

    cur = skips[LEVELS - 1];
    for k in (0..LEVELS - 1).rev() {
        let stride = [if kind.decoder_is_3d() { zs[k + 1] } else { 1 }, 2, 2];
        cur = b.up(&format!("dec{}.up", k + 1), cur, ce[k], stride)?;
        cur = b.node(&format!("dec{}.concat", k + 1), Layer::Concat { parts: vec![cur, skips[k]] })?;
        cur = b.res_block(&format!("dec{}.block", k + 1), cur, ce[k], [1; 3])?;
    }

    let c1 = b.channels(cur);
    let ctx = b.channels(levels[LEVELS - 1]);
    let outs = controller_outputs(c1, HEAD_HIDDEN);
    // small, so task-specific offsets start well below the base head's scale
    let wc = b.uniform(&[outs, ctx + config.task_count], CONTROLLER_INIT / ((ctx + config.task_count) as f32).sqrt());
    let cw = b.param("head.controller.weight".into(), wc, true);
    // the bias carries a Kaiming-initialized base head that tasks perturb
    let mut bias = Vec::with_capacity(outs);
    let hb = (6.0 / c1 as f64).sqrt() as f32;
    let ob = (6.0 / HEAD_HIDDEN as f64).sqrt() as f32;
    for (len, bound) in [(HEAD_HIDDEN * c1, hb), (HEAD_HIDDEN, 0.0), (c1 * HEAD_HIDDEN, ob), (c1, 0.0)] {
        let t: Tensor<T> = if bound > 0.0 { b.uniform(&[len], bound) } else { Tensor::zeros(&[len]).unwrap() };
        bias.extend(t.into_data());
    }
    let cb = b.param("head.controller.bias".into(), Tensor::new(&[outs], bias)?, true);
    cur = b.node("head.dynamic", Layer::DynamicHead { x: cur, context: levels[LEVELS - 1], code, w: cw, b: cb, hidden: HEAD_HIDDEN })?;

    let out_channels = if kind.decoder_is_3d() { 1 } else { config.head_depth() };
    cur = b.conv("head.out", cur, out_channels, 1, [1; 3], true)?;
    // predictions start close to the (normalized) target mean
    if let Layer::Conv { w, .. } = b.graph.nodes[cur].layer {
        let fan_in = c1 as f64;
        let shape = b.store.value(w).shape().to_vec();
        let value = b.uniform(&shape, (OUTPUT_INIT * (3.0 / fan_in).sqrt()) as f32);
        b.store.get_mut(w).value = value;
    }
    if !kind.decoder_is_3d() {
        cur = b.node("unfold", Layer::Unfold { x: cur })?;
    }
    if config.interp == InterpKind::Postfix {
        let up = make_postfix_upsampler(config.ratio, 1)?;
        let kernel = b.param("postfix.kernel".into(), up.init_kernel(), true);
        cur = b.node("postfix", Layer::Postfix { x: cur, up, kernel })?;
    }

    let spec = NetworkSpec { config: config.clone(), graph: b.graph, params: b.store, levels, skips, output: cur };
    let out = &b.shapes[cur];
    if out[1..] != [1, config.patch[0], h, w] {
        return Err(SspError::Config(format!("network output {out:?} does not match patch {:?}", config.patch)));
    }
    Ok(spec)
}

impl<T: Scalar> NetworkSpec<T> {
    /// `[N, 1, D_in, H, W]`.
    pub fn input_shape(&self, n: usize) -> Vec<usize> {
        let [_, h, w] = self.config.patch;
        vec![n, 1, self.config.input_depth(), h, w]
    }

    pub fn output_shape(&self, n: usize) -> Vec<usize> {
        let [d, h, w] = self.config.patch;
        vec![n, 1, d, h, w]
    }

    /// Shapes of every node for a batch of `n`.
    pub fn shapes(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        self.graph.infer_shapes(&self.params, &self.input_shape(n), &[n, self.config.task_count])
    }

    pub fn codes(&self, tasks: &[usize]) -> Result<Tensor<T>> {
        let codes = tasks.iter().map(|&l| one_hot(l, self.config.task_count)).collect::<Result<Vec<_>>>()?;
        code_batch(&codes)
    }

    /// Records a forward pass; returns every node's variable and, in train
    /// mode, the observed batch statistics.
    pub fn forward_tape(&self, tape: &mut Tape<T>, input: crate::Var, tasks: &[usize], mode: Mode) -> Result<Forward<T>> {
        let want = self.input_shape(tasks.len());
        if tape.shape(input) != want.as_slice() {
            return Err(SspError::contract("input", format!("got {:?}, expected {want:?}", tape.shape(input))));
        }
        let code = tape.constant(self.codes(tasks)?);
        self.graph.forward(tape, &self.params, input, code, mode)
    }

    /// Eval-mode prediction for a batch `[N, 1, D_in, H, W]`.
    pub fn predict(&self, x: &Tensor<T>, tasks: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let f = self.forward_tape(&mut tape, input, tasks, Mode::Eval)?;
        Ok(tape.value(f.vars[self.output]).clone())
    }

    /// Maps a sparse stack to the tensor the network consumes: the pseudo
    /// grid for prefix interpolation, the stack itself otherwise.
    pub fn prepare_input(&self, x: &SparseStack) -> Result<Volume> {
        if x.ratio() != self.config.ratio {
            return Err(SspError::Config(format!("input ratio {} but network expects {}", x.ratio(), self.config.ratio)));
        }
        match self.config.interp {
            InterpKind::Prefix => prefix_upsample(x, self.config.interp_mode),
            InterpKind::Postfix | InterpKind::None => Ok(x.volume().clone()),
        }
    }

    /// Predicts the dense target grid for one patch-sized stack.
    pub fn forward(&self, x: &SparseStack, task: usize) -> Result<Volume> {
        let v = self.prepare_input(x)?;
        let y = self.predict(&v.to_tensor(), &[task])?;
        let [vz, vy, vx] = v.voxel_size();
        let vz = if self.config.interp == InterpKind::Prefix { vz } else { vz / self.config.ratio as f32 };
        Volume::from_tensor(&y, [vz, vy, vx])
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for u in updates {
            for (id, batch) in [(u.running_mean, &u.stats.mean), (u.running_var, &u.stats.var)] {
                for (r, &s) in self.params.get_mut(id).value.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * s;
                }
            }
        }
    }

    /// Same graph with parameters cast to another precision.
    pub fn cast<U: Scalar>(&self) -> NetworkSpec<U> {
        NetworkSpec {
            config: self.config.clone(),
            graph: self.graph.clone(),
            params: self.params.cast(),
            levels: self.levels.clone(),
            skips: self.skips.clone(),
            output: self.output,
        }
    }
}

#[cfg(test)]
mod tests;
