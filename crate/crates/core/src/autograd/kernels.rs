//! Convolution kernels over `[N, C, D, H, W]` buffers (2D convolutions run with `D = 1`).
//!
//! Forward and input-gradient passes parallelize over the batch axis. Weight
//! gradients are reduced from per-sample partials in sample order so results
//! do not depend on scheduling.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Longest shared dimension handed to one gemm call by [`gemm_reduce`].
const REDUCE_CHUNK: usize = 4096;

/// `acc += a * b` for a long shared dimension `k`.
///
/// Partial products over at most [`REDUCE_CHUNK`] terms are summed in f64, so
/// gradient reductions over whole volumes keep their accuracy in 32-bit.
/// `acc` is a contiguous row-major `m x n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_reduce<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (isize, isize),
    b: &[T],
    b_strides: (isize, isize),
    acc: &mut [f64],
) {
    let mut part = vec![T::zero(); m * n];
    let mut p0 = 0;
    while p0 < k {
        let len = REDUCE_CHUNK.min(k - p0);
        let a_off = p0 * a_strides.1 as usize;
        let b_off = p0 * b_strides.0 as usize;
        T::gemm(m, len, n, T::one(), &a[a_off..], a_strides, &b[b_off..], b_strides, T::zero(), &mut part, (n as isize, 1));
        for (s, v) in acc.iter_mut().zip(&part) {
            *s += v.to_f64_lossy();
        }
        p0 += len;
    }
}

pub(crate) fn sum_wide<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.to_f64_lossy()).sum()
}

pub(crate) fn narrow<T: Scalar>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64_lossy).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub input: [usize; 3],
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvDims {
    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the unfolded patch matrix.
    fn patch_rows(&self) -> usize {
        self.c_in * self.taps()
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    /// Dimensions of the full correlation that maps the output gradient back
    /// onto the input, when the convolution has unit stride.
    fn flipped(&self) -> Option<ConvDims> {
        if self.stride != [1, 1, 1] || self.is_pointwise() {
            return None;
        }
        let mut padding = [0; 3];
        for a in 0..3 {
            padding[a] = (self.kernel[a] - 1).checked_sub(self.padding[a])?;
        }
        Some(ConvDims {
            n: self.n,
            c_in: self.c_out,
            input: self.output,
            c_out: self.c_in,
            kernel: self.kernel,
            stride: [1, 1, 1],
            padding,
            output: self.input,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

/// Valid output-column range for kernel tap `tap` along an axis.
fn valid_range(out: usize, stride: usize, pad: usize, tap: usize, extent: usize) -> (usize, usize) {
    // i = o*stride + tap - pad must lie in [0, extent)
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > tap { ((extent + pad - tap - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfolds the input patches contributing to output depth plane `od` into
/// `col` (`patch_rows x plane`).
fn im2col_plane<T: Scalar>(x: &[T], d: &ConvDims, od: usize, col: &mut [T]) {
    let [id_n, ih_n, iw_n] = d.input;
    let [_, oh_n, ow_n] = d.output;
    let [kd, kh, kw] = d.kernel;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.padding;
    let plane = d.plane();
    let mut row = 0;
    for ci in 0..d.c_in {
        for a in 0..kd {
            let zi = (od * sd + a) as isize - pd as isize;
            for b in 0..kh {
                for c in 0..kw {
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    row += 1;
                    if zi < 0 || zi >= id_n as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * id_n + zi as usize) * ih_n * iw_n..][..ih_n * iw_n];
                    let (w_lo, w_hi) = valid_range(ow_n, sw, pw, c, iw_n);
                    for oh in 0..oh_n {
                        let out_row = &mut dst[oh * ow_n..(oh + 1) * ow_n];
                        let yi = (oh * sh + b) as isize - ph as isize;
                        if yi < 0 || yi >= ih_n as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[yi as usize * iw_n..(yi as usize + 1) * iw_n];
                        out_row[..w_lo].fill(T::zero());
                        out_row[w_hi..].fill(T::zero());
                        if sw == 1 {
                            let start = w_lo + c - pw;
                            out_row[w_lo..w_hi].copy_from_slice(&src_row[start..start + (w_hi - w_lo)]);
                        } else {
                            for ow in w_lo..w_hi {
                                out_row[ow] = src_row[ow * sw + c - pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds an unfolded gradient plane back onto the input gradient.
fn col2im_plane_add<T: Scalar>(col: &[T], d: &ConvDims, od: usize, gx: &mut [T]) {
    let [id_n, ih_n, iw_n] = d.input;
    let [_, oh_n, ow_n] = d.output;
    let [kd, kh, kw] = d.kernel;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.padding;
    let plane = d.plane();
    let mut row = 0;
    for ci in 0..d.c_in {
        for a in 0..kd {
            let zi = (od * sd + a) as isize - pd as isize;
            for b in 0..kh {
                for c in 0..kw {
                    let src = &col[row * plane..(row + 1) * plane];
                    row += 1;
                    if zi < 0 || zi >= id_n as isize {
                        continue;
                    }
                    let dst = &mut gx[(ci * id_n + zi as usize) * ih_n * iw_n..][..ih_n * iw_n];
                    let (w_lo, w_hi) = valid_range(ow_n, sw, pw, c, iw_n);
                    for oh in 0..oh_n {
                        let yi = (oh * sh + b) as isize - ph as isize;
                        if yi < 0 || yi >= ih_n as isize {
                            continue;
                        }
                        let dst_row = &mut dst[yi as usize * iw_n..(yi as usize + 1) * iw_n];
                        let src_row = &src[oh * ow_n..(oh + 1) * ow_n];
                        for ow in w_lo..w_hi {
                            let xi = ow * sw + c - pw;
                            dst_row[xi] = dst_row[xi] + src_row[ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let in_n = d.c_in * d.in_volume();
    let out_vol = d.out_volume();
    let out_n = d.c_out * out_vol;
    let k = d.patch_rows();
    let plane = d.plane();
    let mut out = vec![T::zero(); d.n * out_n];
    out.par_chunks_mut(out_n).enumerate().for_each(|(n, y)| {
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(out_vol).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let xn = &x[n * in_n..(n + 1) * in_n];
        if d.is_pointwise() {
            T::gemm(
                d.c_out,
                d.c_in,
                out_vol,
                T::one(),
                w,
                (d.c_in as isize, 1),
                xn,
                (out_vol as isize, 1),
                T::one(),
                y,
                (out_vol as isize, 1),
            );
            return;
        }
        let mut col = vec![T::zero(); k * plane];
        for od in 0..d.output[0] {
            im2col_plane(xn, d, od, &mut col);
            T::gemm(
                d.c_out,
                k,
                plane,
                T::one(),
                w,
                (k as isize, 1),
                &col,
                (plane as isize, 1),
                T::one(),
                &mut y[od * plane..],
                (out_vol as isize, 1),
            );
        }
    });
    out
}

/// `[C_out, C_in, k...]` to `[C_in, C_out, k...]` with every kernel axis reversed.
fn flip_weight<T: Scalar>(w: &[T], d: &ConvDims) -> Vec<T> {
    let taps = d.taps();
    let mut out = vec![T::zero(); w.len()];
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            let src = &w[(co * d.c_in + ci) * taps..][..taps];
            let dst = &mut out[(ci * d.c_out + co) * taps..][..taps];
            for (t, v) in src.iter().enumerate() {
                dst[taps - 1 - t] = *v;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Scalar>(x: &[T], w: &[T], gout: &[T], d: &ConvDims, need: (bool, bool, bool)) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let in_n = d.c_in * d.in_volume();
    let out_vol = d.out_volume();
    let out_n = d.c_out * out_vol;
    let k = d.patch_rows();
    let plane = d.plane();

    let bias = need_b.then(|| {
        let mut gb = vec![0.0; d.c_out];
        for n in 0..d.n {
            for (co, g) in gb.iter_mut().enumerate() {
                *g += sum_wide(&gout[n * out_n + co * out_vol..][..out_vol]);
            }
        }
        narrow(gb)
    });

    let weight = need_w.then(|| {
        let partials: Vec<Vec<f64>> = (0..d.n)
            .into_par_iter()
            .map(|n| {
                let xn = &x[n * in_n..(n + 1) * in_n];
                let gn = &gout[n * out_n..(n + 1) * out_n];
                let mut gw = vec![0.0; d.c_out * k];
                if d.is_pointwise() {
                    gemm_reduce(d.c_out, out_vol, d.c_in, gn, (out_vol as isize, 1), xn, (1, out_vol as isize), &mut gw);
                    return gw;
                }
                // accumulated transposed, `[k, c_out]`, which suits the gemm kernel better
                let mut gwt = vec![0.0; k * d.c_out];
                let mut col = vec![T::zero(); k * plane];
                for od in 0..d.output[0] {
                    im2col_plane(xn, d, od, &mut col);
                    gemm_reduce(k, plane, d.c_out, &col, (plane as isize, 1), &gn[od * plane..], (1, out_vol as isize), &mut gwt);
                }
                for (r, row) in gwt.chunks(d.c_out).enumerate() {
                    for (co, v) in row.iter().enumerate() {
                        gw[co * k + r] = *v;
                    }
                }
                gw
            })
            .collect();
        let mut total = vec![0.0; d.c_out * k];
        for part in partials {
            for (t, p) in total.iter_mut().zip(part) {
                *t += p;
            }
        }
        narrow(total)
    });

    let input = need_x.then(|| {
        if let Some(flipped) = d.flipped().filter(|_| d.c_in >= d.c_out) {
            return conv_forward(gout, &flip_weight(w, d), None, &flipped);
        }
        let mut gx = vec![T::zero(); d.n * in_n];
        gx.par_chunks_mut(in_n).enumerate().for_each(|(n, gxn)| {
            let gn = &gout[n * out_n..(n + 1) * out_n];
            if d.is_pointwise() {
                T::gemm(
                    d.c_in,
                    d.c_out,
                    out_vol,
                    T::one(),
                    w,
                    (1, d.c_in as isize),
                    gn,
                    (out_vol as isize, 1),
                    T::zero(),
                    gxn,
                    (out_vol as isize, 1),
                );
                return;
            }
            let mut col = vec![T::zero(); k * plane];
            for od in 0..d.output[0] {
                T::gemm(
                    k,
                    d.c_out,
                    plane,
                    T::one(),
                    w,
                    (1, k as isize),
                    &gn[od * plane..],
                    (out_vol as isize, 1),
                    T::zero(),
                    &mut col,
                    (plane as isize, 1),
                );
                col2im_plane_add(&col, d, od, gxn);
            }
        });
        gx
    });

    ConvGrads { input, weight, bias }
}

/// Transposed convolution whose kernel equals its stride (non-overlapping taps).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvTransposeDims {
    pub n: usize,
    pub c_in: usize,
    pub input: [usize; 3],
    pub c_out: usize,
    pub stride: [usize; 3],
}

impl ConvTransposeDims {
    pub fn output(&self) -> [usize; 3] {
        [self.input[0] * self.stride[0], self.input[1] * self.stride[1], self.input[2] * self.stride[2]]
    }

    fn taps(&self) -> usize {
        self.stride.iter().product()
    }
}

/// Maps `(row of the [C_out*taps, S_in] product, input voxel)` onto output offsets.
fn for_each_tap(d: &ConvTransposeDims, mut f: impl FnMut(usize, usize, usize)) {
    let [id, ih, iw] = d.input;
    let [sd, sh, sw] = d.stride;
    let [_, oh, ow] = d.output();
    let s_in = id * ih * iw;
    let out_vol = id * sd * oh * ow;
    for co in 0..d.c_out {
        for a in 0..sd {
            for b in 0..sh {
                for c in 0..sw {
                    let row = ((co * sd + a) * sh + b) * sw + c;
                    for z in 0..id {
                        for y in 0..ih {
                            let src = (z * ih + y) * iw;
                            let dst = co * out_vol + ((z * sd + a) * oh + y * sh + b) * ow + c;
                            for x in 0..iw {
                                f(row * s_in + src + x, dst + x * sw, co);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_transpose_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvTransposeDims) -> Vec<T> {
    let s_in: usize = d.input.iter().product();
    let in_n = d.c_in * s_in;
    let rows = d.c_out * d.taps();
    let out_n = rows * s_in;
    let mut out = vec![T::zero(); d.n * out_n];
    out.par_chunks_mut(out_n).enumerate().for_each(|(n, y)| {
        let mut prod = vec![T::zero(); rows * s_in];
        T::gemm(
            rows,
            d.c_in,
            s_in,
            T::one(),
            w,
            (1, rows as isize),
            &x[n * in_n..],
            (s_in as isize, 1),
            T::zero(),
            &mut prod,
            (s_in as isize, 1),
        );
        for_each_tap(d, |src, dst, co| {
            y[dst] = prod[src] + bias.map_or(T::zero(), |b| b[co]);
        });
    });
    out
}

pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    d: &ConvTransposeDims,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let s_in: usize = d.input.iter().product();
    let in_n = d.c_in * s_in;
    let rows = d.c_out * d.taps();
    let out_n = rows * s_in;

    let gathered: Vec<Vec<T>> = (0..d.n)
        .into_par_iter()
        .map(|n| {
            let g = &gout[n * out_n..(n + 1) * out_n];
            let mut m = vec![T::zero(); rows * s_in];
            for_each_tap(d, |src, dst, _| m[src] = g[dst]);
            m
        })
        .collect();

    let bias = need_b.then(|| {
        let per_co = d.taps() * s_in;
        let mut gb = vec![0.0; d.c_out];
        for m in &gathered {
            for (co, g) in gb.iter_mut().enumerate() {
                *g += sum_wide(&m[co * per_co..(co + 1) * per_co]);
            }
        }
        narrow(gb)
    });

    let weight = need_w.then(|| {
        let mut gw = vec![0.0; d.c_in * rows];
        for (n, m) in gathered.iter().enumerate() {
            gemm_reduce(d.c_in, s_in, rows, &x[n * in_n..], (s_in as isize, 1), m, (1, s_in as isize), &mut gw);
        }
        narrow(gw)
    });

    let input = need_x.then(|| {
        let mut gx = vec![T::zero(); d.n * in_n];
        gx.par_chunks_mut(in_n).zip(gathered.par_iter()).for_each(|(gxn, m)| {
            T::gemm(d.c_in, rows, s_in, T::one(), w, (rows as isize, 1), m, (s_in as isize, 1), T::zero(), gxn, (s_in as isize, 1));
        });
        gx
    });

    ConvGrads { input, weight, bias }
}
