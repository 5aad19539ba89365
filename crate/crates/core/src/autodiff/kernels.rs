//! Raw forward/backward compute kernels on flat row-major buffers.
//!
//! Every loop nest has a fixed iteration order; accumulation order is part of
//! the contract because repeated runs must be bitwise identical. Keep the
//! orders stable when touching these.

/// Range of index `a` such that `a*stride - pad + k` lands in `[0, other_len)`.
/// The coupling is symmetric, so the same helper serves gather and scatter loops.
#[inline]
pub fn coupled_range(a_len: usize, other_len: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let s = stride as i64;
    let shift = pad as i64 - k as i64;
    let lo = if shift > 0 { (shift + s - 1) / s } else { 0 };
    let top = other_len as i64 - 1 + shift;
    let hi = if top < 0 { 0 } else { top / s + 1 };
    let lo = lo.max(0) as usize;
    let hi = (hi.max(0) as usize).min(a_len);
    (lo, hi.max(lo))
}

pub fn conv2d_out_dim(in_dim: usize, k: usize, stride: usize, pad: usize) -> usize {
    (in_dim + 2 * pad - k) / stride + 1
}

pub fn conv_transpose2d_out_dim(in_dim: usize, k: usize, stride: usize, pad: usize) -> usize {
    (in_dim - 1) * stride + k - 2 * pad
}

/// Cross-correlation of zero-padded input with the kernel, plus per-channel bias.
/// input [n, cin, h, w], weight [cout, cin, kh, kw], bias [cout].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(w, kw, stride, pad);
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for co in 0..cout {
            let out_plane = &mut out[(bn * cout + co) * oh * ow..(bn * cout + co + 1) * oh * ow];
            out_plane.fill(bias[co]);
            for ci in 0..cin {
                let in_plane = &input[(bn * cin + ci) * h * w..(bn * cin + ci + 1) * h * w];
                for ki in 0..kh {
                    let (oh_lo, oh_hi) = coupled_range(oh, h, stride, pad, ki);
                    for kj in 0..kw {
                        let wv = weight[((co * cin + ci) * kh + ki) * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = coupled_range(ow, w, stride, pad, kj);
                        for oy in oh_lo..oh_hi {
                            let iy = oy * stride + ki - pad;
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let ix0 = ow_lo + kj - pad;
                                let len = ow_hi - ow_lo;
                                let src = &in_row[ix0..ix0 + len];
                                let dst = &mut out_row[ow_lo..ow_hi];
                                for (d, s) in dst.iter_mut().zip(src.iter()) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in ow_lo..ow_hi {
                                    let ix = ox * stride + kj - pad;
                                    out_row[ox] += wv * in_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of conv2d for input, weight, and bias. Mirrors the forward loop nest.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    grad_out: &[f64],
    input: &[f64],
    weight: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(w, kw, stride, pad);
    let mut d_input = vec![0.0; input.len()];
    let mut d_weight = vec![0.0; weight.len()];
    let mut d_bias = vec![0.0; cout];
    for bn in 0..n {
        for co in 0..cout {
            let g_plane = &grad_out[(bn * cout + co) * oh * ow..(bn * cout + co + 1) * oh * ow];
            let mut acc = 0.0;
            for g in g_plane {
                acc += g;
            }
            d_bias[co] += acc;
            for ci in 0..cin {
                let in_plane = &input[(bn * cin + ci) * h * w..(bn * cin + ci + 1) * h * w];
                let di_plane_base = (bn * cin + ci) * h * w;
                for ki in 0..kh {
                    let (oh_lo, oh_hi) = coupled_range(oh, h, stride, pad, ki);
                    for kj in 0..kw {
                        let widx = ((co * cin + ci) * kh + ki) * kw + kj;
                        let wv = weight[widx];
                        let (ow_lo, ow_hi) = coupled_range(ow, w, stride, pad, kj);
                        let mut dw_acc = 0.0;
                        for oy in oh_lo..oh_hi {
                            let iy = oy * stride + ki - pad;
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            let di_row = &mut d_input[di_plane_base + iy * w..di_plane_base + (iy + 1) * w];
                            for ox in ow_lo..ow_hi {
                                let ix = ox * stride + kj - pad;
                                let g = g_row[ox];
                                di_row[ix] += g * wv;
                                dw_acc += g * in_row[ix];
                            }
                        }
                        d_weight[widx] += dw_acc;
                    }
                }
            }
        }
    }
    (d_input, d_weight, d_bias)
}

/// Transposed convolution (fractionally-strided scatter-add).
/// input [n, cin, h, w], weight [cin, cout, kh, kw], bias [cout].
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_transpose2d_out_dim(h, kh, stride, pad);
    let ow = conv_transpose2d_out_dim(w, kw, stride, pad);
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for co in 0..cout {
            out[(bn * cout + co) * oh * ow..(bn * cout + co + 1) * oh * ow].fill(bias[co]);
        }
        for ci in 0..cin {
            let in_plane = &input[(bn * cin + ci) * h * w..(bn * cin + ci + 1) * h * w];
            for co in 0..cout {
                let out_base = (bn * cout + co) * oh * ow;
                for ki in 0..kh {
                    let (ih_lo, ih_hi) = coupled_range(h, oh, stride, pad, ki);
                    for kj in 0..kw {
                        let wv = weight[((ci * cout + co) * kh + ki) * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (iw_lo, iw_hi) = coupled_range(w, ow, stride, pad, kj);
                        for iy in ih_lo..ih_hi {
                            let oy = iy * stride + ki - pad;
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            let out_row = &mut out[out_base + oy * ow..out_base + (oy + 1) * ow];
                            for ix in iw_lo..iw_hi {
                                let ox = ix * stride + kj - pad;
                                out_row[ox] += wv * in_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of conv_transpose2d. The input gradient is the adjoint gather,
/// which is exactly a conv2d read pattern with the same weight.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward(
    grad_out: &[f64],
    input: &[f64],
    weight: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let oh = conv_transpose2d_out_dim(h, kh, stride, pad);
    let ow = conv_transpose2d_out_dim(w, kw, stride, pad);
    let mut d_input = vec![0.0; input.len()];
    let mut d_weight = vec![0.0; weight.len()];
    let mut d_bias = vec![0.0; cout];
    for bn in 0..n {
        for co in 0..cout {
            let g_plane = &grad_out[(bn * cout + co) * oh * ow..(bn * cout + co + 1) * oh * ow];
            let mut acc = 0.0;
            for g in g_plane {
                acc += g;
            }
            d_bias[co] += acc;
        }
        for ci in 0..cin {
            let in_plane = &input[(bn * cin + ci) * h * w..(bn * cin + ci + 1) * h * w];
            let di_base = (bn * cin + ci) * h * w;
            for co in 0..cout {
                let g_base = (bn * cout + co) * oh * ow;
                for ki in 0..kh {
                    let (ih_lo, ih_hi) = coupled_range(h, oh, stride, pad, ki);
                    for kj in 0..kw {
                        let widx = ((ci * cout + co) * kh + ki) * kw + kj;
                        let wv = weight[widx];
                        let (iw_lo, iw_hi) = coupled_range(w, ow, stride, pad, kj);
                        let mut dw_acc = 0.0;
                        for iy in ih_lo..ih_hi {
                            let oy = iy * stride + ki - pad;
                            let g_row = &grad_out[g_base + oy * ow..g_base + (oy + 1) * ow];
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            let di_row = &mut d_input[di_base + iy * w..di_base + (iy + 1) * w];
                            for ix in iw_lo..iw_hi {
                                let ox = ix * stride + kj - pad;
                                let g = g_row[ox];
                                di_row[ix] += g * wv;
                                dw_acc += g * in_row[ix];
                            }
                        }
                        d_weight[widx] += dw_acc;
                    }
                }
            }
        }
    }
    (d_input, d_weight, d_bias)
}

/// Per-channel batch statistics over (N, H, W). Returns (mean, biased variance).
pub fn batch_stats(input: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bn in 0..n {
            let plane = &input[(bn * c + ch) * hw..(bn * c + ch + 1) * hw];
            for v in plane {
                s += v;
            }
        }
        mean[ch] = s / m;
        let mu = mean[ch];
        let mut sq = 0.0;
        for bn in 0..n {
            let plane = &input[(bn * c + ch) * hw..(bn * c + ch + 1) * hw];
            for v in plane {
                let d = v - mu;
                sq += d * d;
            }
        }
        var[ch] = sq / m;
    }
    (mean, var)
}

/// Normalize with given per-channel stats: gamma * (x - mean)/sqrt(var + eps) + beta.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_apply(
    input: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for bn in 0..n {
        for ch in 0..c {
            let inv_std = 1.0 / (var[ch] + eps).sqrt();
            let scale = gamma[ch] * inv_std;
            let shift = beta[ch] - mean[ch] * scale;
            let base = (bn * c + ch) * hw;
            for i in 0..hw {
                out[base + i] = input[base + i] * scale + shift;
            }
        }
    }
    out
}

/// Backward through train-mode batch norm (gradients flow through the batch
/// statistics). Returns (d_input, d_gamma, d_beta).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_train_backward(
    grad_out: &[f64],
    input: &[f64],
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut d_input = vec![0.0; input.len()];
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for ch in 0..c {
        let inv_std = 1.0 / (var[ch] + eps).sqrt();
        let mu = mean[ch];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for bn in 0..n {
            let base = (bn * c + ch) * hw;
            for i in 0..hw {
                let g = grad_out[base + i];
                let x_hat = (input[base + i] - mu) * inv_std;
                sum_g += g;
                sum_gx += g * x_hat;
            }
        }
        d_gamma[ch] = sum_gx;
        d_beta[ch] = sum_g;
        let k = gamma[ch] * inv_std;
        let mean_g = sum_g / m;
        let mean_gx = sum_gx / m;
        for bn in 0..n {
            let base = (bn * c + ch) * hw;
            for i in 0..hw {
                let g = grad_out[base + i];
                let x_hat = (input[base + i] - mu) * inv_std;
                d_input[base + i] = k * (g - mean_g - x_hat * mean_gx);
            }
        }
    }
    (d_input, d_gamma, d_beta)
}

/// Backward through eval-mode batch norm (running stats are constants).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_eval_backward(
    grad_out: &[f64],
    input: &[f64],
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d_input = vec![0.0; input.len()];
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for ch in 0..c {
        let inv_std = 1.0 / (var[ch] + eps).sqrt();
        let k = gamma[ch] * inv_std;
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for bn in 0..n {
            let base = (bn * c + ch) * hw;
            for i in 0..hw {
                let g = grad_out[base + i];
                sum_g += g;
                sum_gx += g * (input[base + i] - mean[ch]) * inv_std;
                d_input[base + i] = g * k;
            }
        }
        d_gamma[ch] = sum_gx;
        d_beta[ch] = sum_g;
    }
    (d_input, d_gamma, d_beta)
}

/// Row softmax over the trailing axis with max subtraction for overflow safety.
pub fn softmax_rows_forward(input: &[f64], row_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for (row_in, row_out) in input.chunks_exact(row_len).zip(out.chunks_exact_mut(row_len)) {
        let max = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, x) in row_out.iter_mut().zip(row_in.iter()) {
            let e = (x - max).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in row_out.iter_mut() {
            *o *= inv;
        }
    }
    out
}

pub fn softmax_rows_backward(grad_out: &[f64], output: &[f64], row_len: usize) -> Vec<f64> {
    let mut d_input = vec![0.0; output.len()];
    for ((g_row, y_row), d_row) in grad_out
        .chunks_exact(row_len)
        .zip(output.chunks_exact(row_len))
        .zip(d_input.chunks_exact_mut(row_len))
    {
        let mut dot = 0.0;
        for (g, y) in g_row.iter().zip(y_row.iter()) {
            dot += g * y;
        }
        for ((d, g), y) in d_row.iter_mut().zip(g_row.iter()).zip(y_row.iter()) {
            *d = y * (g - dot);
        }
    }
    d_input
}

/// Batched matrix product: a [b, m, k] x b [b, k, n] -> [b, m, n].
pub fn matmul_batched_forward(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let a_mat = &a[bi * m * k..(bi + 1) * m * k];
        let b_mat = &b[bi * k * n..(bi + 1) * k * n];
        let o_mat = &mut out[bi * m * n..(bi + 1) * m * n];
        for mi in 0..m {
            let o_row = &mut o_mat[mi * n..(mi + 1) * n];
            for ki in 0..k {
                let av = a_mat[mi * k + ki];
                if av == 0.0 {
                    continue;
                }
                let b_row = &b_mat[ki * n..(ki + 1) * n];
                for (o, bv) in o_row.iter_mut().zip(b_row.iter()) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

pub fn matmul_batched_backward(
    grad_out: &[f64],
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut d_a = vec![0.0; a.len()];
    let mut d_b = vec![0.0; b.len()];
    for bi in 0..batch {
        let a_mat = &a[bi * m * k..(bi + 1) * m * k];
        let b_mat = &b[bi * k * n..(bi + 1) * k * n];
        let g_mat = &grad_out[bi * m * n..(bi + 1) * m * n];
        let da_mat = &mut d_a[bi * m * k..(bi + 1) * m * k];
        // dA[m,k] = sum_n g[m,n] * b[k,n]
        for mi in 0..m {
            let g_row = &g_mat[mi * n..(mi + 1) * n];
            let da_row = &mut da_mat[mi * k..(mi + 1) * k];
            for ki in 0..k {
                let b_row = &b_mat[ki * n..(ki + 1) * n];
                let mut acc = 0.0;
                for (g, bv) in g_row.iter().zip(b_row.iter()) {
                    acc += g * bv;
                }
                da_row[ki] += acc;
            }
        }
        // dB[k,n] = sum_m a[m,k] * g[m,n]
        let db_mat = &mut d_b[bi * k * n..(bi + 1) * k * n];
        for ki in 0..k {
            let db_row = &mut db_mat[ki * n..(ki + 1) * n];
            for mi in 0..m {
                let av = a_mat[mi * k + ki];
                if av == 0.0 {
                    continue;
                }
                let g_row = &g_mat[mi * n..(mi + 1) * n];
                for (d, g) in db_row.iter_mut().zip(g_row.iter()) {
                    *d += av * g;
                }
            }
        }
    }
    (d_a, d_b)
}

/// 2x2 max pooling with stride 2. Returns (output, argmax flat indices into input).
/// Ties resolve to the lowest row-major index via strict greater-than.
pub fn maxpool2_forward(
    input: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for plane in 0..n * c {
        let in_base = plane * h * w;
        let out_base = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = in_base + (2 * oy) * w + 2 * ox;
                let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = candidates[0];
                let mut best_v = input[best];
                for &cand in &candidates[1..] {
                    if input[cand] > best_v {
                        best_v = input[cand];
                        best = cand;
                    }
                }
                out[out_base + oy * ow + ox] = best_v;
                argmax[out_base + oy * ow + ox] = best;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(grad_out: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut d_input = vec![0.0; input_len];
    for (g, &idx) in grad_out.iter().zip(argmax.iter()) {
        d_input[idx] += g;
    }
    d_input
}

/// [b, r, c] -> [b, c, r] for the trailing two axes.
pub fn transpose_last2(input: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for bi in 0..batch {
        let src = &input[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for ri in 0..r {
            for ci in 0..c {
                dst[ci * r + ri] = src[ri * c + ci];
            }
        }
    }
    out
}
