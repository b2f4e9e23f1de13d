//! Forward and backward kernels for the differentiable primitives.
//!
//! All kernels accept `(H, W, C)` feature maps or batched `(B, H, W, C)`
//! ones and preserve the convention of their input. Convolution is
//! cross-correlation (no kernel flip). Every kernel has a fixed internal
//! summation order, and parallel variants only split work across disjoint
//! output regions, so results are bit-identical to serial execution.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::rng::RngKey;
use crate::{Error, Result};

/// Spatial padding policy for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so that `out = ceil(in / stride)` per spatial axis.
    Same,
    /// No padding: `out = floor((in - k) / stride) + 1`.
    Valid,
}

pub(crate) struct ConvGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub(crate) fn conv_geometry(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
    stride: usize,
) -> Result<ConvGeometry> {
    match padding {
        Padding::Valid => {
            if kh > h {
                return Err(Error::dim(format!(
                    "kernel height {kh} exceeds input height {h}"
                )));
            }
            if kw > w {
                return Err(Error::dim(format!(
                    "kernel width {kw} exceeds input width {w}"
                )));
            }
            Ok(ConvGeometry {
                out_h: (h - kh) / stride + 1,
                out_w: (w - kw) / stride + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
        Padding::Same => {
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
            if kh > h + pad_h || kw > w + pad_w {
                return Err(Error::dim(format!(
                    "kernel {kh}x{kw} exceeds padded input {}x{}",
                    h + pad_h,
                    w + pad_w
                )));
            }
            Ok(ConvGeometry {
                out_h,
                out_w,
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
            })
        }
    }
}

fn check_kernel_shape<S: Scalar>(
    kernels: &Tensor<S>,
    in_channels: usize,
) -> Result<(usize, usize, usize)> {
    let ks = kernels.shape();
    if ks.len() != 4 {
        return Err(Error::dim(format!(
            "kernels must be rank-4 (kh,kw,Cin,Cout), got {ks:?}"
        )));
    }
    if ks[2] != in_channels {
        return Err(Error::dim(format!(
            "input channel axis = {in_channels} but kernel Cin axis = {}",
            ks[2]
        )));
    }
    Ok((ks[0], ks[1], ks[3]))
}

/// 2D cross-correlation with optional `Same` zero padding.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor<S>> {
    if stride == 0 {
        return Err(Error::Param("conv2d stride must be positive".into()));
    }
    let dims = input.spatial_dims()?;
    let (kh, kw, cout) = check_kernel_shape(kernels, dims.channels)?;
    if bias.shape() != [cout] {
        return Err(Error::dim(format!(
            "bias shape {:?} does not match Cout = {cout}",
            bias.shape()
        )));
    }
    let geo = conv_geometry(dims.height, dims.width, kh, kw, padding, stride)?;

    let mut out = Tensor::zeros(dims.shape(geo.out_h, geo.out_w, cout));
    let in_data = input.data();
    let k = kernels.data();
    let b = bias.data();
    let (h, w, cin) = (dims.height, dims.width, dims.channels);
    let (out_w, pad_top, pad_left) = (geo.out_w, geo.pad_top, geo.pad_left);

    out.data_mut()
        .par_chunks_mut(out_w * cout)
        .enumerate()
        .for_each(|(row_idx, out_row)| {
            let batch = row_idx / geo.out_h;
            let oy = row_idx % geo.out_h;
            let in_base = batch * h * w * cin;
            for ox in 0..out_w {
                let px = &mut out_row[ox * cout..(ox + 1) * cout];
                px.copy_from_slice(b);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad_top as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad_left as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let in_px = in_base + (iy as usize * w + ix as usize) * cin;
                        let k_px = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let v = in_data[in_px + ci];
                            let k_row = &k[k_px + ci * cout..k_px + (ci + 1) * cout];
                            for (acc, &kv) in px.iter_mut().zip(k_row) {
                                *acc += v * kv;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernels, and bias.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    grad_out: &Tensor<S>,
    padding: Padding,
    stride: usize,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let dims = input.spatial_dims()?;
    let (kh, kw, cout) = check_kernel_shape(kernels, dims.channels)?;
    let geo = conv_geometry(dims.height, dims.width, kh, kw, padding, stride)?;
    let (h, w, cin) = (dims.height, dims.width, dims.channels);
    let g = grad_out.data();
    let in_data = input.data();
    let k = kernels.data();

    // Kernel and bias gradients: each thread owns one cout column.
    let mut grad_k = Tensor::zeros(vec![kh, kw, cin, cout]);
    let mut grad_b = Tensor::zeros(vec![cout]);
    {
        let gk = grad_k.data_mut();
        // SAFETY-free trick: transpose loop so each co is written once.
        let mut partials: Vec<(usize, Vec<S>, S)> = (0..cout)
            .into_par_iter()
            .map(|co| {
                let mut acc_k = vec![S::ZERO; kh * kw * cin];
                let mut acc_b = S::ZERO;
                for batch in 0..dims.batch {
                    for oy in 0..geo.out_h {
                        for ox in 0..geo.out_w {
                            let gv = g[((batch * geo.out_h + oy) * geo.out_w + ox) * cout + co];
                            acc_b += gv;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - geo.pad_top as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - geo.pad_left as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    let in_px =
                                        (batch * h * w + iy as usize * w + ix as usize) * cin;
                                    let a_px = (ky * kw + kx) * cin;
                                    for ci in 0..cin {
                                        acc_k[a_px + ci] += gv * in_data[in_px + ci];
                                    }
                                }
                            }
                        }
                    }
                }
                (co, acc_k, acc_b)
            })
            .collect();
        partials.sort_by_key(|(co, _, _)| *co);
        for (co, acc_k, acc_b) in partials {
            for (i, v) in acc_k.into_iter().enumerate() {
                gk[i * cout + co] = v;
            }
            grad_b.data_mut()[co] = acc_b;
        }
    }

    // Input gradient: gather over the outputs each input position feeds.
    let mut grad_in = Tensor::zeros(input.shape().to_vec());
    grad_in
        .data_mut()
        .par_chunks_mut(w * cin)
        .enumerate()
        .for_each(|(row_idx, gin_row)| {
            let batch = row_idx / h;
            let iy = row_idx % h;
            for ix in 0..w {
                let gin_px = &mut gin_row[ix * cin..(ix + 1) * cin];
                for ky in 0..kh {
                    let oy_num = iy + geo.pad_top;
                    if oy_num < ky || (oy_num - ky) % stride != 0 {
                        continue;
                    }
                    let oy = (oy_num - ky) / stride;
                    if oy >= geo.out_h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ox_num = ix + geo.pad_left;
                        if ox_num < kx || (ox_num - kx) % stride != 0 {
                            continue;
                        }
                        let ox = (ox_num - kx) / stride;
                        if ox >= geo.out_w {
                            continue;
                        }
                        let g_px = ((batch * geo.out_h + oy) * geo.out_w + ox) * cout;
                        let k_px = (ky * kw + kx) * cin * cout;
                        for (ci, gin) in gin_px.iter_mut().enumerate() {
                            let k_row = &k[k_px + ci * cout..k_px + (ci + 1) * cout];
                            let mut acc = S::ZERO;
                            for (co, &kv) in k_row.iter().enumerate() {
                                acc += g[g_px + co] * kv;
                            }
                            *gin += acc;
                        }
                    }
                }
            }
        });

    Ok((grad_in, grad_k, grad_b))
}

/// Stride-2 transposed 3x3 convolution: doubles both spatial dimensions.
///
/// Equivalent to scatter-adding `input[i,j] * kernel` into the output with
/// the top-left kernel tap landing at `(2i - 1, 2j - 1)`.
pub fn transposed_conv2d<S: Scalar>(input: &Tensor<S>, kernels: &Tensor<S>) -> Result<Tensor<S>> {
    let dims = input.spatial_dims()?;
    let (kh, kw, cout) = check_kernel_shape(kernels, dims.channels)?;
    if kh != 3 || kw != 3 {
        return Err(Error::dim(format!(
            "transposed_conv2d expects a 3x3 kernel, got {kh}x{kw}"
        )));
    }
    let (h, w, cin) = (dims.height, dims.width, dims.channels);
    let (out_h, out_w) = (2 * h, 2 * w);
    let in_data = input.data();
    let k = kernels.data();

    let mut out = Tensor::zeros(dims.shape(out_h, out_w, cout));
    // Gather form of the scatter: deterministic and parallel over rows.
    out.data_mut()
        .par_chunks_mut(out_w * cout)
        .enumerate()
        .for_each(|(row_idx, out_row)| {
            let batch = row_idx / out_h;
            let oy = row_idx % out_h;
            for ox in 0..out_w {
                let px = &mut out_row[ox * cout..(ox + 1) * cout];
                for ky in 0..3usize {
                    // oy = 2*iy + ky - 1  =>  iy = (oy + 1 - ky) / 2
                    let iy_num = oy as isize + 1 - ky as isize;
                    if iy_num < 0 || iy_num % 2 != 0 {
                        continue;
                    }
                    let iy = (iy_num / 2) as usize;
                    if iy >= h {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix_num = ox as isize + 1 - kx as isize;
                        if ix_num < 0 || ix_num % 2 != 0 {
                            continue;
                        }
                        let ix = (ix_num / 2) as usize;
                        if ix >= w {
                            continue;
                        }
                        let in_px = (batch * h * w + iy * w + ix) * cin;
                        let k_px = (ky * 3 + kx) * cin * cout;
                        for ci in 0..cin {
                            let v = in_data[in_px + ci];
                            let k_row = &k[k_px + ci * cout..k_px + (ci + 1) * cout];
                            for (acc, &kv) in px.iter_mut().zip(k_row) {
                                *acc += v * kv;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`transposed_conv2d`]. The input gradient is the adjoint:
/// a stride-2 cross-correlation of the upstream gradient with the kernel.
pub fn transposed_conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let dims = input.spatial_dims()?;
    let (_, _, cout) = check_kernel_shape(kernels, dims.channels)?;
    let (h, w, cin) = (dims.height, dims.width, dims.channels);
    let (out_h, out_w) = (2 * h, 2 * w);
    let g = grad_out.data();
    let in_data = input.data();
    let k = kernels.data();

    let mut grad_in = Tensor::zeros(input.shape().to_vec());
    grad_in
        .data_mut()
        .par_chunks_mut(w * cin)
        .enumerate()
        .for_each(|(row_idx, gin_row)| {
            let batch = row_idx / h;
            let iy = row_idx % h;
            for ix in 0..w {
                let gin_px = &mut gin_row[ix * cin..(ix + 1) * cin];
                for ky in 0..3usize {
                    let oy = 2 * iy as isize + ky as isize - 1;
                    if oy < 0 || oy as usize >= out_h {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ox = 2 * ix as isize + kx as isize - 1;
                        if ox < 0 || ox as usize >= out_w {
                            continue;
                        }
                        let g_px = ((batch * out_h + oy as usize) * out_w + ox as usize) * cout;
                        let k_px = (ky * 3 + kx) * cin * cout;
                        for (ci, gin) in gin_px.iter_mut().enumerate() {
                            let k_row = &k[k_px + ci * cout..k_px + (ci + 1) * cout];
                            let mut acc = S::ZERO;
                            for (co, &kv) in k_row.iter().enumerate() {
                                acc += g[g_px + co] * kv;
                            }
                            *gin += acc;
                        }
                    }
                }
            }
        });

    let mut grad_k = Tensor::zeros(vec![3, 3, cin, cout]);
    {
        let gk = grad_k.data_mut();
        let mut partials: Vec<(usize, Vec<S>)> = (0..cout)
            .into_par_iter()
            .map(|co| {
                let mut acc_k = vec![S::ZERO; 9 * cin];
                for batch in 0..dims.batch {
                    for iy in 0..h {
                        for ix in 0..w {
                            let in_px = (batch * h * w + iy * w + ix) * cin;
                            for ky in 0..3usize {
                                let oy = 2 * iy as isize + ky as isize - 1;
                                if oy < 0 || oy as usize >= out_h {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let ox = 2 * ix as isize + kx as isize - 1;
                                    if ox < 0 || ox as usize >= out_w {
                                        continue;
                                    }
                                    let gv = g[((batch * out_h + oy as usize) * out_w
                                        + ox as usize)
                                        * cout
                                        + co];
                                    let a_px = (ky * 3 + kx) * cin;
                                    for ci in 0..cin {
                                        acc_k[a_px + ci] += gv * in_data[in_px + ci];
                                    }
                                }
                            }
                        }
                    }
                }
                (co, acc_k)
            })
            .collect();
        partials.sort_by_key(|(co, _)| *co);
        for (co, acc_k) in partials {
            for (i, v) in acc_k.into_iter().enumerate() {
                gk[i * cout + co] = v;
            }
        }
    }
    Ok((grad_in, grad_k))
}

/// 2x2 max pooling with stride 2. Returns the pooled map and the linear
/// input offset of each winner (ties break to the first in row-major order).
pub fn max_pool2d<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<u32>)> {
    let dims = input.spatial_dims()?;
    let (h, w, c) = (dims.height, dims.width, dims.channels);
    if h % 2 != 0 {
        return Err(Error::dim(format!("max_pool2d needs even height, got {h}")));
    }
    if w % 2 != 0 {
        return Err(Error::dim(format!("max_pool2d needs even width, got {w}")));
    }
    let (out_h, out_w) = (h / 2, w / 2);
    let in_data = input.data();
    let mut out = Tensor::zeros(dims.shape(out_h, out_w, c));
    let mut argmax = vec![0u32; out.numel()];

    out.data_mut()
        .par_chunks_mut(out_w * c)
        .zip(argmax.par_chunks_mut(out_w * c))
        .enumerate()
        .for_each(|(row_idx, (out_row, arg_row))| {
            let batch = row_idx / out_h;
            let oy = row_idx % out_h;
            for ox in 0..out_w {
                for ch in 0..c {
                    let mut best = S::from_f64(f64::NEG_INFINITY);
                    let mut best_at = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let off = ((batch * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            let v = in_data[off];
                            if v > best {
                                best = v;
                                best_at = off as u32;
                            }
                        }
                    }
                    out_row[ox * c + ch] = best;
                    arg_row[ox * c + ch] = best_at;
                }
            }
        });
    Ok((out, argmax))
}

/// Routes each upstream gradient to its argmax position.
pub fn max_pool2d_backward<S: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<S>,
) -> Tensor<S> {
    let mut grad_in = Tensor::zeros(input_shape.to_vec());
    let gin = grad_in.data_mut();
    for (&at, &g) in argmax.iter().zip(grad_out.data()) {
        gin[at as usize] += g;
    }
    grad_in
}

/// Whether batch statistics or running statistics drive the normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Infer,
}

/// Per-channel running statistics owned by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<S: Scalar> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> BnState<S> {
    pub fn fresh(channels: usize) -> Self {
        BnState {
            mean: vec![S::ZERO; channels],
            var: vec![S::ONE; channels],
        }
    }
}

/// Context saved by the forward pass for the backward pass.
pub struct BnSaved<S: Scalar> {
    pub normalized: Tensor<S>,
    pub inv_std: Vec<S>,
    pub mode: BatchNormMode,
}

pub struct BnOutput<S: Scalar> {
    pub output: Tensor<S>,
    pub saved: BnSaved<S>,
    /// EMA-updated running stats; `None` in infer mode.
    pub new_state: Option<BnState<S>>,
}

/// Exponential moving-average momentum for the running statistics.
pub const BN_MOMENTUM: f64 = 0.99;

/// Batch normalization over `(batch, H, W)` per channel. Train mode uses
/// (biased) batch statistics and reports EMA-updated running statistics;
/// infer mode normalizes with the provided running statistics.
pub fn batch_norm<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    mode: BatchNormMode,
    state: &BnState<S>,
    epsilon: f64,
) -> Result<BnOutput<S>> {
    let dims = input.spatial_dims()?;
    let c = dims.channels;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(format!(
            "gamma/beta must have shape [{c}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if state.mean.len() != c || state.var.len() != c {
        return Err(Error::dim(format!(
            "running stats sized {} do not match {c} channels",
            state.mean.len()
        )));
    }
    if epsilon <= 0.0 {
        return Err(Error::Param("batch_norm epsilon must be positive".into()));
    }
    let n = dims.batch * dims.height * dims.width;
    let in_data = input.data();

    let (mean, var, new_state) = match mode {
        BatchNormMode::Infer => (state.mean.clone(), state.var.clone(), None),
        BatchNormMode::Train => {
            let inv_n = S::from_f64(1.0 / n as f64);
            let mut mean = vec![S::ZERO; c];
            for px in in_data.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(px) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m *= inv_n;
            }
            let mut var = vec![S::ZERO; c];
            for px in in_data.chunks_exact(c) {
                for (ch, (vr, &v)) in var.iter_mut().zip(px).enumerate() {
                    let d = v - mean[ch];
                    *vr += d * d;
                }
            }
            for vr in var.iter_mut() {
                *vr *= inv_n;
            }
            let momentum = S::from_f64(BN_MOMENTUM);
            let one_minus = S::ONE - momentum;
            let new_state = BnState {
                mean: state
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| momentum * r + one_minus * b)
                    .collect(),
                var: state
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| momentum * r + one_minus * b)
                    .collect(),
            };
            (mean, var, Some(new_state))
        }
    };

    let eps = S::from_f64(epsilon);
    let inv_std: Vec<S> = var.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();

    let mut normalized = Tensor::zeros(input.shape().to_vec());
    let mut output = Tensor::zeros(input.shape().to_vec());
    {
        let norm = normalized.data_mut();
        let out = output.data_mut();
        let g = gamma.data();
        let b = beta.data();
        for (px, (norm_px, out_px)) in in_data
            .chunks_exact(c)
            .zip(norm.chunks_exact_mut(c).zip(out.chunks_exact_mut(c)))
        {
            for ch in 0..c {
                let xhat = (px[ch] - mean[ch]) * inv_std[ch];
                norm_px[ch] = xhat;
                out_px[ch] = g[ch] * xhat + b[ch];
            }
        }
    }

    Ok(BnOutput {
        output,
        saved: BnSaved {
            normalized,
            inv_std,
            mode,
        },
        new_state,
    })
}

/// Gradients of [`batch_norm`] with respect to input, gamma, and beta.
pub fn batch_norm_backward<S: Scalar>(
    saved: &BnSaved<S>,
    gamma: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let c = gamma.numel();
    let n = saved.normalized.numel() / c;
    let g = grad_out.data();
    let xhat = saved.normalized.data();
    let gam = gamma.data();

    let mut grad_gamma = vec![S::ZERO; c];
    let mut grad_beta = vec![S::ZERO; c];
    for (g_px, x_px) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            grad_gamma[ch] += g_px[ch] * x_px[ch];
            grad_beta[ch] += g_px[ch];
        }
    }

    let mut grad_in = Tensor::zeros(saved.normalized.shape().to_vec());
    match saved.mode {
        BatchNormMode::Infer => {
            // Constants: dx = g * gamma * inv_std.
            let gin = grad_in.data_mut();
            for (gin_px, g_px) in gin.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                for ch in 0..c {
                    gin_px[ch] = g_px[ch] * gam[ch] * saved.inv_std[ch];
                }
            }
        }
        BatchNormMode::Train => {
            // dxhat = g * gamma; dx = inv_std/N * (N*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
            let sum_dxhat: Vec<S> = (0..c).map(|ch| grad_beta[ch] * gam[ch]).collect();
            let sum_dxhat_xhat: Vec<S> = (0..c).map(|ch| grad_gamma[ch] * gam[ch]).collect();
            let n_s = S::from_f64(n as f64);
            let inv_n = S::ONE / n_s;
            let gin = grad_in.data_mut();
            for ((gin_px, g_px), x_px) in gin
                .chunks_exact_mut(c)
                .zip(g.chunks_exact(c))
                .zip(xhat.chunks_exact(c))
            {
                for ch in 0..c {
                    let dxhat = g_px[ch] * gam[ch];
                    gin_px[ch] = saved.inv_std[ch]
                        * inv_n
                        * (n_s * dxhat - sum_dxhat[ch] - x_px[ch] * sum_dxhat_xhat[ch]);
                }
            }
        }
    }

    let grad_gamma = Tensor::new(vec![c], grad_gamma).expect("shape by construction");
    let grad_beta = Tensor::new(vec![c], grad_beta).expect("shape by construction");
    (grad_in, grad_gamma, grad_beta)
}

/// Elementwise `max(0, x)`.
pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| v.maximum(S::ZERO))
}

/// ReLU gradient; the subgradient at exactly zero is zero.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let mut grad_in = Tensor::zeros(input.shape().to_vec());
    for ((gi, &x), &g) in grad_in
        .data_mut()
        .iter_mut()
        .zip(input.data())
        .zip(grad_out.data())
    {
        if x > S::ZERO {
            *gi = g;
        }
    }
    grad_in
}

/// Per-pixel softmax over the channel axis, stabilized by max subtraction.
pub fn softmax_channels<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let dims = input.spatial_dims()?;
    let c = dims.channels;
    if c < 2 {
        return Err(Error::Param(format!(
            "softmax_channels needs at least 2 classes, got {c}"
        )));
    }
    let mut out = Tensor::zeros(input.shape().to_vec());
    out.data_mut()
        .par_chunks_mut(c)
        .zip(input.data().par_chunks(c))
        .for_each(|(out_px, in_px)| {
            let mut max = in_px[0];
            for &v in &in_px[1..] {
                max = max.maximum(v);
            }
            let mut sum = S::ZERO;
            for (o, &v) in out_px.iter_mut().zip(in_px) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            let inv = S::ONE / sum;
            for o in out_px.iter_mut() {
                *o *= inv;
            }
        });
    Ok(out)
}

/// Softmax Jacobian-vector product: `dz_i = s_i * (g_i - sum_j g_j s_j)`.
pub fn softmax_channels_backward<S: Scalar>(output: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let c = *output.shape().last().expect("softmax output has channels");
    let mut grad_in = Tensor::zeros(output.shape().to_vec());
    grad_in
        .data_mut()
        .par_chunks_mut(c)
        .zip(output.data().par_chunks(c))
        .zip(grad_out.data().par_chunks(c))
        .for_each(|((gin_px, s_px), g_px)| {
            let mut dot = S::ZERO;
            for (&s, &g) in s_px.iter().zip(g_px) {
                dot += s * g;
            }
            for ((gi, &s), &g) in gin_px.iter_mut().zip(s_px).zip(g_px) {
                *gi = s * (g - dot);
            }
        });
    grad_in
}

/// Inverted dropout: zeroes each element with probability `p` and scales
/// survivors by `1/(1-p)`. The mask is a pure function of `(key, element
/// index)`, so identical keys always produce identical masks.
pub fn dropout<S: Scalar>(input: &Tensor<S>, p: f64, key: RngKey) -> Result<Tensor<S>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Param(format!(
            "dropout p must be in [0, 1), got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(input.clone());
    }
    let scale = S::from_f64(1.0 / (1.0 - p));
    let mut out = Tensor::zeros(input.shape().to_vec());
    out.data_mut()
        .par_chunks_mut(4096)
        .zip(input.data().par_chunks(4096))
        .enumerate()
        .for_each(|(chunk_idx, (out_chunk, in_chunk))| {
            let base = chunk_idx * 4096;
            for (i, (o, &v)) in out_chunk.iter_mut().zip(in_chunk).enumerate() {
                if key.uniform((base + i) as u64) >= p {
                    *o = v * scale;
                }
            }
        });
    Ok(out)
}

/// Dropout gradient: the identical keyed mask applied to the upstream grad.
pub fn dropout_backward<S: Scalar>(grad_out: &Tensor<S>, p: f64, key: RngKey) -> Tensor<S> {
    if p == 0.0 {
        return grad_out.clone();
    }
    let scale = S::from_f64(1.0 / (1.0 - p));
    let mut grad_in = Tensor::zeros(grad_out.shape().to_vec());
    for (i, (gi, &g)) in grad_in
        .data_mut()
        .iter_mut()
        .zip(grad_out.data())
        .enumerate()
    {
        if key.uniform(i as u64) >= p {
            *gi = g * scale;
        }
    }
    grad_in
}

/// Concatenate feature maps along the channel axis, in argument order.
pub fn concat_channels<S: Scalar>(inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Param("concat_channels needs at least one input".into()))?;
    let dims = first.spatial_dims()?;
    let mut total_c = 0usize;
    for (i, t) in inputs.iter().enumerate() {
        let d = t.spatial_dims()?;
        if (d.batch, d.height, d.width) != (dims.batch, dims.height, dims.width) {
            return Err(Error::dim(format!(
                "concat input {i} has spatial dims {}x{}x{}, expected {}x{}x{}",
                d.batch, d.height, d.width, dims.batch, dims.height, dims.width
            )));
        }
        total_c += d.channels;
    }
    let px_count = dims.batch * dims.height * dims.width;
    let mut out = Tensor::zeros(dims.shape(dims.height, dims.width, total_c));
    let out_data = out.data_mut();
    let mut offset = 0usize;
    for t in inputs {
        let c = *t.shape().last().unwrap();
        let src = t.data();
        for px in 0..px_count {
            out_data[px * total_c + offset..px * total_c + offset + c]
                .copy_from_slice(&src[px * c..(px + 1) * c]);
        }
        offset += c;
    }
    Ok(out)
}

/// Epsilon clamp inside the cross-entropy logarithm.
pub const CROSS_ENTROPY_EPS: f64 = 1e-8;

/// Weighted cross-entropy of a softmax map against integer labels:
/// `-(sum_px w[y_px] * ln(max(S[y_px], eps))) / sum_px w[y_px]`.
///
/// Returns the loss and the summed weight (the normalizer). A batch whose
/// labels all carry zero weight yields a zero loss.
pub fn weighted_cross_entropy_value<S: Scalar>(
    softmax: &Tensor<S>,
    labels: &[u8],
    class_weights: &[S],
) -> Result<(S, S)> {
    let classes = *softmax
        .shape()
        .last()
        .ok_or_else(|| Error::dim("cross-entropy input has no channel axis".to_string()))?;
    let pixels = softmax.numel() / classes;
    if labels.len() != pixels {
        return Err(Error::dim(format!(
            "mask has {} pixels but softmax map has {pixels}",
            labels.len()
        )));
    }
    if class_weights.len() != classes {
        return Err(Error::dim(format!(
            "{} class weights for {classes} classes",
            class_weights.len()
        )));
    }
    let eps = S::from_f64(CROSS_ENTROPY_EPS);
    let data = softmax.data();
    let mut weighted_logloss = S::ZERO;
    let mut weight_total = S::ZERO;
    for (px, &label) in labels.iter().enumerate() {
        let class = label as usize;
        if class >= classes {
            return Err(Error::Label(format!(
                "label {label} at pixel {px} outside [0, {classes})"
            )));
        }
        let w = class_weights[class];
        let s = data[px * classes + class].maximum(eps);
        weighted_logloss += w * s.ln();
        weight_total += w;
    }
    let loss = if weight_total > S::ZERO {
        -weighted_logloss / weight_total
    } else {
        S::ZERO
    };
    Ok((loss, weight_total))
}

/// Extract channels `[from, from+count)` of a feature map.
pub fn slice_channels<S: Scalar>(
    input: &Tensor<S>,
    from: usize,
    count: usize,
) -> Result<Tensor<S>> {
    let dims = input.spatial_dims()?;
    if from + count > dims.channels {
        return Err(Error::dim(format!(
            "channel slice {from}..{} out of range of {} channels",
            from + count,
            dims.channels
        )));
    }
    let px_count = dims.batch * dims.height * dims.width;
    let src = input.data();
    let mut out = Tensor::zeros(dims.shape(dims.height, dims.width, count));
    let dst = out.data_mut();
    for px in 0..px_count {
        dst[px * count..(px + 1) * count]
            .copy_from_slice(&src[px * dims.channels + from..px * dims.channels + from + count]);
    }
    Ok(out)
}
