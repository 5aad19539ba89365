//! Shared helpers for integration tests: naive reference kernels written as
//! straight loops over padded coordinates, independent of the production
//! implementations, plus random tensor generators.

use gle_core::rng::Rng;
use gle_core::Tensor;

pub fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.range(lo, hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("finite random data")
}

/// Six-nested-loop conv2d reference: gathers over kernel positions with
/// explicit signed padded coordinates.
pub fn naive_conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, cin, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (cout, _, kh, kw) = {
        let s = weight.shape();
        (s[0], s[1], s[2], s[3])
    };
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                                    let xi = ((bn * cin + ci) * h + iy as usize) * w + ix as usize;
                                    let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                    acc += x[xi] * wt[wi];
                                }
                            }
                        }
                    }
                    out[((bn * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![n, cout, oh, ow], out).unwrap()
}

/// Transposed-conv reference in gather form: for each output pixel, find the
/// input pixels whose stride-placed kernel covers it. This inverts the loop
/// structure of a scatter-add implementation, so it is an independent oracle.
pub fn naive_conv_transpose2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, cin, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (_, cout, kh, kw) = {
        let s = weight.shape();
        (s[0], s[1], s[2], s[3])
    };
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                // oy = iy*stride + ky - pad  =>  iy = (oy + pad - ky)/stride
                                let ny = oy as i64 + pad as i64 - ky as i64;
                                let nx = ox as i64 + pad as i64 - kx as i64;
                                if ny >= 0
                                    && nx >= 0
                                    && ny % stride as i64 == 0
                                    && nx % stride as i64 == 0
                                {
                                    let iy = ny / stride as i64;
                                    let ix = nx / stride as i64;
                                    if iy < h as i64 && ix < w as i64 {
                                        let xi =
                                            ((bn * cin + ci) * h + iy as usize) * w + ix as usize;
                                        let wi = ((ci * cout + co) * kh + ky) * kw + kx;
                                        acc += x[xi] * wt[wi];
                                    }
                                }
                            }
                        }
                    }
                    out[((bn * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![n, cout, oh, ow], out).unwrap()
}

/// Triple-loop batched matmul reference with (m, n, k) accumulation order.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (batch, m, k) = {
        let s = a.shape();
        (s[0], s[1], s[2])
    };
    let n = b.shape()[2];
    let av = a.data();
    let bv = b.data();
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        for mi in 0..m {
            for ni in 0..n {
                let mut acc = 0.0;
                for ki in 0..k {
                    acc += av[(bi * m + mi) * k + ki] * bv[(bi * k + ki) * n + ni];
                }
                out[(bi * m + mi) * n + ni] = acc;
            }
        }
    }
    Tensor::from_vec(vec![batch, m, n], out).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "oracle shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
