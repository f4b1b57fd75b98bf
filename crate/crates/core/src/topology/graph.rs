use crate::autograd::{BatchNormMode, BatchStats, Tape, Var};
use crate::error::{Result, SspError};
use crate::interp::PostfixUpsampler;
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::transform::{self, ProjectionSpec};

use super::head::{controller_outputs, dynamic_head};

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum Layer {
    Input,
    TaskCode,
    Conv { x: NodeId, w: ParamId, b: Option<ParamId>, stride: [usize; 3], padding: [usize; 3] },
    ConvTranspose { x: NodeId, w: ParamId, b: Option<ParamId> },
    BatchNorm { x: NodeId, scale: ParamId, shift: ParamId, running_mean: ParamId, running_var: ParamId },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Concat { parts: Vec<NodeId> },
    Fold { x: NodeId },
    Unfold { x: NodeId },
    DepthToChannel { x: NodeId, spec: ProjectionSpec, gamma: ParamId },
    ChannelToDepth { x: NodeId, spec: ProjectionSpec, gamma: ParamId },
    DynamicHead { x: NodeId, context: NodeId, code: NodeId, w: ParamId, b: ParamId, hidden: usize },
    Postfix { x: NodeId, up: PostfixUpsampler, kernel: ParamId },
}

impl Layer {
    pub fn inputs(&self) -> Vec<NodeId> {
        use Layer::*;
        match self {
            Input | TaskCode => vec![],
            Conv { x, .. }
            | ConvTranspose { x, .. }
            | BatchNorm { x, .. }
            | Relu { x }
            | Fold { x }
            | Unfold { x }
            | DepthToChannel { x, .. }
            | ChannelToDepth { x, .. }
            | Postfix { x, .. } => vec![*x],
            Add { a, b } => vec![*a, *b],
            Concat { parts } => parts.clone(),
            DynamicHead { x, context, code, .. } => vec![*x, *context, *code],
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        use Layer::*;
        match self {
            Conv { w, b, .. } | ConvTranspose { w, b, .. } => std::iter::once(*w).chain(*b).collect(),
            BatchNorm { scale, shift, running_mean, running_var, .. } => {
                vec![*scale, *shift, *running_mean, *running_var]
            }
            DepthToChannel { gamma, .. } | ChannelToDepth { gamma, .. } => vec![*gamma],
            DynamicHead { w, b, .. } => vec![*w, *b],
            Postfix { kernel, .. } => vec![*kernel],
            Input | TaskCode | Relu { .. } | Add { .. } | Concat { .. } | Fold { .. } | Unfold { .. } => vec![],
        }
    }

    pub fn kind_name(&self) -> &'static str {
        use Layer::*;
        match self {
            Input => "input",
            TaskCode => "task_code",
            Conv { .. } => "conv",
            ConvTranspose { .. } => "conv_transpose",
            BatchNorm { .. } => "batch_norm",
            Relu { .. } => "relu",
            Add { .. } => "add",
            Concat { .. } => "concat",
            Fold { .. } => "fold",
            Unfold { .. } => "unfold",
            DepthToChannel { .. } => "depth_to_channel",
            ChannelToDepth { .. } => "channel_to_depth",
            DynamicHead { .. } => "dynamic_head",
            Postfix { .. } => "postfix_upsample",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub layer: Layer,
}

/// Topologically ordered layer graph; node `i` only consumes nodes `< i`.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub nodes: Vec<Node>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one normalization layer in train mode.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats<T>,
}

pub struct Forward<T> {
    pub vars: Vec<Var>,
    pub bn: Vec<BnUpdate<T>>,
}

fn rename(name: &str, e: SspError) -> SspError {
    match e {
        SspError::Contract { op, detail } => SspError::Contract { op: format!("{name} ({op})"), detail },
        other => other,
    }
}

fn prod(s: &[usize]) -> usize {
    s.iter().product()
}

/// Output shape of `layer` given its input shapes. Mirrors the tape ops
/// without touching data.
pub fn infer_shape<T: Scalar>(layer: &Layer, shapes: &[Vec<usize>], store: &ParamStore<T>) -> Result<Vec<usize>> {
    use Layer::*;
    let bad = |d: String| Err(SspError::contract(layer.kind_name(), d));
    let pshape = |id: ParamId| store.value(id).shape().to_vec();
    Ok(match layer {
        Input | TaskCode => return bad("source nodes have no inferred shape".into()),
        Conv { x, w, stride, padding, .. } => {
            let xs = &shapes[*x];
            let ws = pshape(*w);
            if ws.len() != xs.len() || ws[1] != xs[1] {
                return bad(format!("input {xs:?} vs kernel {ws:?}"));
            }
            let off = 5 - xs.len();
            let mut out = vec![xs[0], ws[0]];
            for a in 0..xs.len() - 2 {
                let axis = a + off;
                let (i, k) = (xs[a + 2], ws[a + 2]);
                let p = padding[axis];
                if i + 2 * p < k {
                    return bad(format!("kernel {ws:?} exceeds input {xs:?}"));
                }
                out.push((i + 2 * p - k) / stride[axis] + 1);
            }
            out
        }
        ConvTranspose { x, w, .. } => {
            let xs = &shapes[*x];
            let ws = pshape(*w);
            if ws.len() != xs.len() || ws[0] != xs[1] {
                return bad(format!("input {xs:?} vs kernel {ws:?}"));
            }
            let mut out = vec![xs[0], ws[1]];
            out.extend((2..xs.len()).map(|a| xs[a] * ws[a]));
            out
        }
        BatchNorm { x, .. } | Relu { x } => shapes[*x].clone(),
        DynamicHead { x, .. } => shapes[*x].clone(),
        Add { a, b } => {
            if shapes[*a] != shapes[*b] {
                return bad(format!("{:?} vs {:?}", shapes[*a], shapes[*b]));
            }
            shapes[*a].clone()
        }
        Concat { parts } => {
            let mut out = shapes[parts[0]].clone();
            out[1] = parts.iter().map(|&p| shapes[p][1]).sum();
            out
        }
        Fold { x } => {
            let s = &shapes[*x];
            vec![s[0], s[2], s[3], s[4]]
        }
        Unfold { x } => {
            let s = &shapes[*x];
            vec![s[0], 1, s[1], s[2], s[3]]
        }
        DepthToChannel { x, spec, .. } => {
            let s = &shapes[*x];
            vec![s[0], spec.u, s[3], s[4]]
        }
        ChannelToDepth { x, spec, .. } => {
            let s = &shapes[*x];
            vec![s[0], spec.u / spec.depth, spec.depth, s[2], s[3]]
        }
        Postfix { x, up, .. } => {
            let mut s = shapes[*x].clone();
            s[2] *= up.ratio;
            s
        }
    })
}

/// Multiply-accumulates of one layer, excluding bias additions.
pub fn layer_macs<T: Scalar>(layer: &Layer, shapes: &[Vec<usize>], out: &[usize], store: &ParamStore<T>) -> u64 {
    use Layer::*;
    let pshape = |id: ParamId| store.value(id).shape().to_vec();
    match layer {
        Conv { w, .. } => {
            let ws = pshape(*w);
            (prod(out) * ws[1] * prod(&ws[2..])) as u64
        }
        ConvTranspose { x, w, .. } => {
            let ws = pshape(*w);
            (prod(&shapes[*x]) * ws[1] * prod(&ws[2..])) as u64
        }
        DepthToChannel { spec, .. } | ChannelToDepth { spec, .. } => (prod(out) * spec.lambda) as u64,
        DynamicHead { x, w, hidden, .. } => {
            let xs = &shapes[*x];
            let ws = pshape(*w);
            let sites = prod(&xs[2..]);
            (xs[0] * (ws[0] * ws[1] + 2 * sites * hidden * xs[1])) as u64
        }
        Postfix { x, up, .. } => (prod(&shapes[*x]) * up.ratio * up.channels) as u64,
        _ => 0,
    }
}

impl Graph {
    pub fn push(&mut self, name: impl Into<String>, layer: Layer) -> NodeId {
        self.nodes.push(Node { name: name.into(), layer });
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shapes of every node for the given source shapes.
    pub fn infer_shapes<T: Scalar>(&self, store: &ParamStore<T>, input: &[usize], code: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let s = match node.layer {
                Layer::Input => input.to_vec(),
                Layer::TaskCode => code.to_vec(),
                ref l => infer_shape(l, &shapes, store).map_err(|e| rename(&node.name, e))?,
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Records the graph on `tape`. Parameters enter through [`Tape::param`].
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: Var, code: Var, mode: Mode) -> Result<Forward<T>> {
        let mut vars: Vec<Var> = Vec::with_capacity(self.nodes.len());
        let mut bn = Vec::new();
        for node in &self.nodes {
            let v = self.apply(node, tape, store, &vars, input, code, mode, &mut bn).map_err(|e| rename(&node.name, e))?;
            vars.push(v);
        }
        Ok(Forward { vars, bn })
    }

    #[allow(clippy::too_many_arguments)]
    fn apply<T: Scalar>(
        &self,
        node: &Node,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        vars: &[Var],
        input: Var,
        code: Var,
        mode: Mode,
        bn: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        use Layer::*;
        Ok(match &node.layer {
            Input => input,
            TaskCode => code,
            Conv { x, w, b, stride, padding } => {
                let wv = tape.param(store, *w);
                let bv = b.map(|b| tape.param(store, b));
                if tape.shape(vars[*x]).len() == 4 {
                    if stride[1] != stride[2] || padding[1] != padding[2] {
                        return Err(SspError::contract("conv2d", "anisotropic 2D stride or padding"));
                    }
                    tape.conv2d(vars[*x], wv, bv, stride[1], padding[1])?
                } else {
                    tape.conv3d(vars[*x], wv, bv, *stride, *padding)?
                }
            }
            ConvTranspose { x, w, b } => {
                let wv = tape.param(store, *w);
                let bv = b.map(|b| tape.param(store, b));
                tape.conv_transpose(vars[*x], wv, bv)?
            }
            BatchNorm { x, scale, shift, running_mean, running_var } => {
                let s = tape.param(store, *scale);
                let h = tape.param(store, *shift);
                match mode {
                    Mode::Train => {
                        let (y, stats) = tape.batch_norm(vars[*x], s, h, BatchNormMode::Train)?;
                        bn.push(BnUpdate {
                            running_mean: *running_mean,
                            running_var: *running_var,
                            stats: stats.expect("train mode reports statistics"),
                        });
                        y
                    }
                    Mode::Eval => {
                        let mode = BatchNormMode::Eval { mean: store.value(*running_mean).data(), var: store.value(*running_var).data() };
                        tape.batch_norm(vars[*x], s, h, mode)?.0
                    }
                }
            }
            Relu { x } => tape.relu(vars[*x]),
            Add { a, b } => tape.add(vars[*a], vars[*b])?,
            Concat { parts } => {
                let p: Vec<Var> = parts.iter().map(|&i| vars[i]).collect();
                tape.concat(&p)?
            }
            Fold { x } => transform::fold_input_to_2d(tape, vars[*x])?,
            Unfold { x } => transform::unfold_output_to_3d(tape, vars[*x])?,
            DepthToChannel { x, spec, gamma } => {
                let g = tape.param(store, *gamma);
                transform::depth_to_channel(tape, vars[*x], spec, g)?
            }
            ChannelToDepth { x, spec, gamma } => {
                let g = tape.param(store, *gamma);
                transform::channel_to_depth(tape, vars[*x], spec, g)?
            }
            DynamicHead { x, context, code, w, b, hidden } => {
                let wv = tape.param(store, *w);
                let bv = tape.param(store, *b);
                debug_assert_eq!(store.value(*w).shape()[0], controller_outputs(tape.shape(vars[*x])[1], *hidden));
                dynamic_head(tape, vars[*x], vars[*context], vars[*code], wv, bv, *hidden)?
            }
            Postfix { x, up, kernel } => {
                let k = tape.param(store, *kernel);
                up.apply(tape, vars[*x], k)?
            }
        })
    }
}
