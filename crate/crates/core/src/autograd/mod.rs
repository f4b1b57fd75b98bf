//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value plus whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse.

mod kernels;

use crate::error::{Result, SspError};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use kernels::{ConvDims, ConvTransposeDims};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, dims: ConvTransposeDims },
    BatchNorm { x: Var, scale: Var, shift: Var, xhat: Vec<T>, inv_std: Vec<T>, layout: [usize; 3], batch_stats: bool },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Reshape(Var),
    GlobalAvgPool { x: Var, inner: usize },
    Linear { x: Var, w: Var, b: Var, dims: [usize; 3] },
    Slice { x: Var, start: usize, layout: [usize; 4] },
    PointwiseDynamic { x: Var, w: Var, b: Var, dims: [usize; 4] },
    Scale(Var, T),
    Sum(Var),
    MseLoss { pred: Var, target: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Normalization mode for [`Tape::batch_norm`].
pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics and report them.
    Train,
    /// Normalize with the given running mean and variance.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch mean and unbiased variance observed in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradients of every recorded parameter into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}

fn spatial3(op: &str, shape: &[usize]) -> Result<[usize; 3]> {
    match shape.len() {
        4 => Ok([1, shape[2], shape[3]]),
        5 => Ok([shape[2], shape[3], shape[4]]),
        r => Err(SspError::contract(op, format!("expected rank 4 or 5 input, got rank {r}"))),
    }
}

fn add_into<T: Scalar>(acc: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match acc {
        Some(a) => {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x = *x + *y;
            }
        }
        None => *acc = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records parameter `id` from `store`; frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    fn conv_dims(&self, op: &str, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], padding: [usize; 3]) -> Result<ConvDims> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let rank = xs.len();
        if ws.len() != rank {
            return Err(SspError::contract(op, format!("kernel rank {} does not match input rank {rank}", ws.len())));
        }
        let input = spatial3(op, xs)?;
        let kernel = if rank == 4 { [1, ws[2], ws[3]] } else { [ws[2], ws[3], ws[4]] };
        if ws[1] != xs[1] {
            return Err(SspError::contract(op, format!("axis 1 (channels): input has {}, kernel expects {}", xs[1], ws[1])));
        }
        if let Some(axis) = (0..3).find(|&a| kernel[a] % 2 == 0 && !(rank == 4 && a == 0)) {
            return Err(SspError::contract(op, format!("kernel extent {} on spatial axis {axis} must be odd", kernel[axis])));
        }
        if stride.contains(&0) {
            return Err(SspError::contract(op, "stride must be positive"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(SspError::contract(op, format!("bias shape {:?} does not match {} output channels", self.shape(b), ws[0])));
            }
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * padding[a];
            if padded < kernel[a] {
                return Err(SspError::contract(op, format!("spatial axis {a}: kernel {} exceeds padded extent {padded}", kernel[a])));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(ConvDims { n: xs[0], c_in: xs[1], input, c_out: ws[0], kernel, stride, padding, output })
    }

    fn conv_impl(&mut self, op: &str, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        let dims = self.conv_dims(op, x, w, b, stride, padding)?;
        let data = kernels::conv_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &dims);
        let mut shape = vec![dims.n, dims.c_out];
        if self.value(x).rank() == 5 {
            shape.push(dims.output[0]);
        }
        shape.extend_from_slice(&dims.output[1..]);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Conv { x, w, b, dims }, needs))
    }

    /// 2D cross-correlation of `[N, C_in, H, W]` with `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        if self.value(x).rank() != 4 {
            return Err(SspError::contract("conv2d", format!("input must be [N,C,H,W], got {:?}", self.shape(x))));
        }
        self.conv_impl("conv2d", x, w, b, [1, stride, stride], [0, padding, padding])
    }

    /// 3D cross-correlation of `[N, C_in, D, H, W]` with `[C_out, C_in, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        if self.value(x).rank() != 5 {
            return Err(SspError::contract("conv3d", format!("input must be [N,C,D,H,W], got {:?}", self.shape(x))));
        }
        self.conv_impl("conv3d", x, w, b, stride, padding)
    }

    /// Transposed convolution with kernel extent equal to stride on every axis.
    ///
    /// Kernel layout is `[C_in, C_out, k...]`; works on rank 4 and rank 5 inputs.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let op = "conv_transpose";
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let input = spatial3(op, &xs)?;
        if ws.len() != xs.len() {
            return Err(SspError::contract(op, format!("kernel rank {} does not match input rank {}", ws.len(), xs.len())));
        }
        if ws[0] != xs[1] {
            return Err(SspError::contract(op, format!("axis 1 (channels): input has {}, kernel expects {}", xs[1], ws[0])));
        }
        let stride = if xs.len() == 4 { [1, ws[2], ws[3]] } else { [ws[2], ws[3], ws[4]] };
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(SspError::contract(op, format!("bias shape {:?} does not match {} output channels", self.shape(b), ws[1])));
            }
        }
        let dims = ConvTransposeDims { n: xs[0], c_in: xs[1], input, c_out: ws[1], stride };
        let data = kernels::conv_transpose_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &dims);
        let out = dims.output();
        let mut shape = vec![dims.n, dims.c_out];
        if xs.len() == 5 {
            shape.push(out[0]);
        }
        shape.extend_from_slice(&out[1..]);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConvTranspose { x, w, b, dims }, needs))
    }

    /// Transposed convolution along Z only: kernel `[C, C, kd, 1, 1]` with `kd == stride_z`.
    pub fn conv_transpose_z(&mut self, x: Var, w: Var, stride_z: usize) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 5 || ws[3] != 1 || ws[4] != 1 || ws[0] != ws[1] {
            return Err(SspError::Config(format!("conv_transpose_z kernel must be [C, C, kd, 1, 1], got {ws:?}")));
        }
        if ws[2] != stride_z {
            return Err(SspError::Config(format!("conv_transpose_z requires kd == stride_z (kd={}, stride_z={stride_z})", ws[2])));
        }
        if self.value(x).rank() != 5 {
            return Err(SspError::contract("conv_transpose_z", format!("input must be [N,C,D,H,W], got {:?}", self.shape(x))));
        }
        self.conv_transpose(x, w, None)
    }

    /// Batch normalization over channel axis 1.
    pub fn batch_norm(&mut self, x: Var, scale: Var, shift: Var, mode: BatchNormMode<'_, T>) -> Result<(Var, Option<BatchStats<T>>)> {
        let op = "batch_norm";
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(SspError::contract(op, "input needs a channel axis"));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        for (name, v) in [("scale", scale), ("shift", shift)] {
            if self.shape(v) != [c] {
                return Err(SspError::contract(op, format!("{name} shape {:?} does not match {c} channels", self.shape(v))));
            }
        }
        let count = (n * inner) as f64;
        let data = self.value(x).data();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += data[(b * c + ch) * inner..][..inner].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
                    }
                    let m = s / count;
                    let mut q = 0.0;
                    for b in 0..n {
                        q += data[(b * c + ch) * inner..][..inner].iter().map(|v| (v.to_f64_lossy() - m).powi(2)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count;
                }
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let stats = BatchStats {
                    mean: mean.iter().map(|&m| T::from_f64_lossy(m)).collect(),
                    var: var.iter().map(|&v| T::from_f64_lossy(v * unbiased)).collect(),
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(SspError::contract(op, "running statistics do not match channel count"));
                }
                (mean.iter().map(|v| v.to_f64_lossy()).collect(), var.iter().map(|v| v.to_f64_lossy()).collect(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64_lossy(1.0 / (v + BN_EPS).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    let h = (data[i] - mean_t[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = sc[ch] * h + sh[ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        let batch_stats = stats.is_some();
        let v = self.push(
            Tensor::from_parts(xs, out),
            Op::BatchNorm { x, scale, shift, xhat, inv_std, layout: [n, c, inner], batch_stats },
            needs,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(SspError::contract("add", format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), needs))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(SspError::contract("mul", format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, factor), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.to_f64_lossy()).sum();
        let value = Tensor::scalar(T::from_f64_lossy(total));
        let needs = self.needs(x);
        self.push(value, Op::Sum(x), needs)
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| SspError::contract("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(SspError::contract("concat", "inputs need a channel axis"));
        }
        let outer = base[0];
        let inner: usize = base[2..].iter().product();
        let mut recorded = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(SspError::contract("concat", format!("shape {s:?} incompatible with {base:?} outside axis 1")));
            }
            recorded.push((p, s[1]));
        }
        let total: usize = recorded.iter().map(|&(_, c)| c).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for b in 0..outer {
            for &(p, c) in &recorded {
                data.extend_from_slice(&self.value(p).data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = base;
        shape[1] = total;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { parts: recorded, outer, inner }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Averages every axis after the channel axis: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(SspError::contract("global_avg_pool", format!("expected spatial axes, got {xs:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let denom = T::from_usize(inner).unwrap();
        let data = self.value(x).data().chunks(inner).map(|c| T::from_f64_lossy(kernels::sum_wide(c)) / denom).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![xs[0], xs[1]], data), Op::GlobalAvgPool { x, inner }, needs))
    }

    /// `[N, I] x [O, I]^T + [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.shape(b) != [ws[0]] {
            return Err(SspError::contract("linear", format!("incompatible shapes x {xs:?}, w {ws:?}, b {:?}", self.shape(b))));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out: Vec<T> = (0..n).flat_map(|_| self.value(b).data().iter().copied()).collect();
        T::gemm(
            n,
            i,
            o,
            T::one(),
            self.value(x).data(),
            (i as isize, 1),
            self.value(w).data(),
            (1, i as isize),
            T::one(),
            &mut out,
            (o as isize, 1),
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![n, o], out), Op::Linear { x, w, b, dims: [n, i, o] }, needs))
    }

    /// Selects `len` entries of axis 1 starting at `start`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || len == 0 || start + len > xs[1] {
            return Err(SspError::contract("slice_channels", format!("range {start}..{} outside axis 1 of {xs:?}", start + len)));
        }
        let inner: usize = xs[2..].iter().product();
        let c = xs[1];
        let mut data = Vec::with_capacity(xs[0] * len * inner);
        for b in 0..xs[0] {
            data.extend_from_slice(&self.value(x).data()[(b * c + start) * inner..(b * c + start + len) * inner]);
        }
        let mut shape = xs.clone();
        shape[1] = len;
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { x, start, layout: [xs[0], c, len, inner] }, needs))
    }

    /// Per-sample 1x1 convolution with generated weights.
    ///
    /// `x: [N, C_in, ...]`, `w: [N, C_out * C_in]` (row-major `C_out x C_in`), `b: [N, C_out]`.
    pub fn pointwise_dynamic(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let op = "pointwise_dynamic";
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b);
        let ws = self.shape(w);
        if xs.len() < 3 || bs.len() != 2 || ws.len() != 2 || bs[0] != xs[0] || ws[0] != xs[0] {
            return Err(SspError::contract(op, format!("incompatible shapes x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, ci, co) = (xs[0], xs[1], bs[1]);
        if ws[1] != ci * co {
            return Err(SspError::contract(op, format!("generated weights hold {} values, need {co}x{ci}", ws[1])));
        }
        let s: usize = xs[2..].iter().product();
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * co * s];
        for k in 0..n {
            let y = &mut out[k * co * s..(k + 1) * co * s];
            for (o, chunk) in y.chunks_mut(s).enumerate() {
                chunk.fill(bv[k * co + o]);
            }
            T::gemm(
                co,
                ci,
                s,
                T::one(),
                &wv[k * co * ci..],
                (ci as isize, 1),
                &xv[k * ci * s..],
                (s as isize, 1),
                T::one(),
                y,
                (s as isize, 1),
            );
        }
        let mut shape = xs;
        shape[1] = co;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::PointwiseDynamic { x, w, b, dims: [n, ci, co, s] }, needs))
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(SspError::contract("mse_loss", format!("pred {:?} vs target {:?}", self.shape(pred), self.shape(target))));
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let sq: f64 = p.iter().zip(t).map(|(&a, &b)| (a - b).to_f64_lossy().powi(2)).sum();
        let value = Tensor::scalar(T::from_f64_lossy(sq / p.len() as f64));
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(value, Op::MseLoss { pred, target }, needs))
    }

    /// Fingerprint of every ReLU activation pattern on the tape. Two passes
    /// with equal fingerprints lie on the same linear piece of every ReLU.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.relu_inputs() {
            for v in t.data() {
                h = (h ^ u64::from(*v > T::zero())).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Pre-activations of every ReLU in recording order.
    pub fn relu_inputs(&self) -> Vec<&Tensor<T>> {
        self.nodes
            .iter()
            .filter_map(|node| match node.op {
                Op::Relu(x) => Some(self.value(x)),
                _ => None,
            })
            .collect()
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(SspError::contract("backward", format!("loss must have one element, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    params.push((id, Var(i)));
                    continue;
                }
                Op::Constant => {
                    grads[i] = None;
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut send = |v: Var, data: Vec<T>| {
            if self.needs(v) {
                let shape = self.shape(v).to_vec();
                add_into(&mut grads[v.0], Tensor::from_parts(shape, data));
            }
        };
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Conv { x, w, b, dims } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let r = kernels::conv_backward(self.value(*x).data(), self.value(*w).data(), g.data(), dims, need);
                if let Some(gx) = r.input {
                    send(*x, gx);
                }
                if let Some(gw) = r.weight {
                    send(*w, gw);
                }
                if let (Some(b), Some(gb)) = (b, r.bias) {
                    send(*b, gb);
                }
            }
            Op::ConvTranspose { x, w, b, dims } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let r = kernels::conv_transpose_backward(self.value(*x).data(), self.value(*w).data(), g.data(), dims, need);
                if let Some(gx) = r.input {
                    send(*x, gx);
                }
                if let Some(gw) = r.weight {
                    send(*w, gw);
                }
                if let (Some(b), Some(gb)) = (b, r.bias) {
                    send(*b, gb);
                }
            }
            Op::BatchNorm { x, scale, shift, xhat, inv_std, layout, batch_stats } => {
                let [n, c, inner] = *layout;
                let gd = g.data();
                let mut gsum = vec![0.0f64; c];
                let mut gxhat = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for i in off..off + inner {
                            let gi = gd[i].to_f64_lossy();
                            gsum[ch] += gi;
                            gxhat[ch] += gi * xhat[i].to_f64_lossy();
                        }
                    }
                }
                if self.needs(*x) {
                    let sc = self.value(*scale).data();
                    let m = (n * inner) as f64;
                    let mut gx = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * inner;
                            let k = sc[ch] * inv_std[ch];
                            if *batch_stats {
                                // combined in f64: the three terms nearly cancel
                                let kf = k.to_f64_lossy();
                                for i in off..off + inner {
                                    let v = m * gd[i].to_f64_lossy() - gsum[ch] - xhat[i].to_f64_lossy() * gxhat[ch];
                                    gx[i] = T::from_f64_lossy(kf * v / m);
                                }
                            } else {
                                for i in off..off + inner {
                                    gx[i] = k * gd[i];
                                }
                            }
                        }
                    }
                    send(*x, gx);
                }
                send(*scale, gxhat.iter().map(|&v| T::from_f64_lossy(v)).collect());
                send(*shift, gsum.iter().map(|&v| T::from_f64_lossy(v)).collect());
            }
            Op::Relu(x) => {
                let gx = g.data().iter().zip(self.value(*x).data()).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect();
                send(*x, gx);
            }
            Op::Add(a, b) => {
                send(*a, g.data().to_vec());
                send(*b, g.into_data());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.data().iter().zip(bv).map(|(&gv, &y)| gv * y).collect());
                send(*b, g.data().iter().zip(av).map(|(&gv, &x)| gv * x).collect());
            }
            Op::Scale(x, f) => send(*x, g.data().iter().map(|&v| v * *f).collect()),
            Op::Sum(x) => {
                let gv = g.data()[0];
                send(*x, vec![gv; self.value(*x).len()]);
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|&(_, c)| c).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    let mut gp = Vec::with_capacity(outer * c * inner);
                    for b in 0..*outer {
                        gp.extend_from_slice(&g.data()[(b * total + offset) * inner..(b * total + offset + c) * inner]);
                    }
                    send(p, gp);
                    offset += c;
                }
            }
            Op::Reshape(x) => send(*x, g.into_data()),
            Op::GlobalAvgPool { x, inner } => {
                let denom = T::from_usize(*inner).unwrap();
                let gx = g.data().iter().flat_map(|&v| std::iter::repeat_n(v / denom, *inner)).collect();
                send(*x, gx);
            }
            Op::Linear { x, w, b, dims } => {
                let [n, i, o] = *dims;
                let gd = g.data();
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); n * i];
                    T::gemm(
                        n,
                        o,
                        i,
                        T::one(),
                        gd,
                        (o as isize, 1),
                        self.value(*w).data(),
                        (i as isize, 1),
                        T::zero(),
                        &mut gx,
                        (i as isize, 1),
                    );
                    send(*x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); o * i];
                    T::gemm(
                        o,
                        n,
                        i,
                        T::one(),
                        gd,
                        (1, o as isize),
                        self.value(*x).data(),
                        (i as isize, 1),
                        T::zero(),
                        &mut gw,
                        (i as isize, 1),
                    );
                    send(*w, gw);
                }
                let mut gb = vec![T::zero(); o];
                for row in gd.chunks(o) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                send(*b, gb);
            }
            Op::Slice { x, start, layout } => {
                let [n, c, len, inner] = *layout;
                let mut gx = vec![T::zero(); n * c * inner];
                for b in 0..n {
                    gx[(b * c + start) * inner..(b * c + start + len) * inner]
                        .copy_from_slice(&g.data()[b * len * inner..(b + 1) * len * inner]);
                }
                send(*x, gx);
            }
            Op::PointwiseDynamic { x, w, b, dims } => {
                let [n, ci, co, s] = *dims;
                let (xv, wv, gd) = (self.value(*x).data(), self.value(*w).data(), g.data());
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); n * ci * s];
                    for k in 0..n {
                        T::gemm(
                            ci,
                            co,
                            s,
                            T::one(),
                            &wv[k * co * ci..],
                            (1, ci as isize),
                            &gd[k * co * s..],
                            (s as isize, 1),
                            T::zero(),
                            &mut gx[k * ci * s..],
                            (s as isize, 1),
                        );
                    }
                    send(*x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; n * co * ci];
                    for k in 0..n {
                        kernels::gemm_reduce(
                            co,
                            s,
                            ci,
                            &gd[k * co * s..],
                            (s as isize, 1),
                            &xv[k * ci * s..],
                            (1, s as isize),
                            &mut gw[k * co * ci..(k + 1) * co * ci],
                        );
                    }
                    send(*w, kernels::narrow(gw));
                }
                let gb = gd.chunks(s).map(|c| T::from_f64_lossy(kernels::sum_wide(c))).collect();
                send(*b, gb);
            }
            Op::MseLoss { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let k = g.data()[0] * T::from_f64_lossy(2.0 / p.len() as f64);
                let gp: Vec<T> = p.iter().zip(t).map(|(&a, &b)| k * (a - b)).collect();
                if self.needs(*target) {
                    send(*target, gp.iter().map(|&v| -v).collect());
                }
                send(*pred, gp);
            }
        }
    }
}

#[cfg(test)]
mod tests;
