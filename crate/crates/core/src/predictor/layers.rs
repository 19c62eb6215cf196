//! Layer kernels shared by the forward and backward passes.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c = a * b` (or `c += a * b` when `accumulate`), all row-major.
///
/// `a` is logically `m x k`; stored as `k x m` when `trans_a`.
/// `b` is logically `k x n`; stored as `n x k` when `trans_b`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    assert_eq!(c.len(), m * n, "output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    F::gemm(m, k, n, a, rsa, csa, b, rsb, csb, c, accumulate);
}

pub fn gelu_cdf<F: Real>(x: F) -> F {
    F::from_f64(0.5).unwrap() * (F::one() + (x * F::from_f64(FRAC_1_SQRT_2).unwrap()).erf())
}

/// Exact GELU `x * Phi(x)`; returns the outputs and caches `Phi(x)`.
pub fn gelu_forward<F: Real>(pre: &[F]) -> (Vec<F>, Vec<F>) {
    let cdf: Vec<F> = pre.iter().map(|&x| gelu_cdf(x)).collect();
    let out = pre.iter().zip(&cdf).map(|(&x, &p)| x * p).collect();
    (out, cdf)
}

/// In-place `grad *= Phi(x) + x * phi(x)`.
pub fn gelu_backward<F: Real>(pre: &[F], cdf: &[F], grad: &mut [F]) {
    let norm = F::from_f64(1.0 / (2.0 * PI).sqrt()).unwrap();
    let half = F::from_f64(0.5).unwrap();
    for ((g, &x), &p) in grad.iter_mut().zip(pre).zip(cdf) {
        let density = norm * (-half * x * x).exp();
        *g = *g * (p + x * density);
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax<F: Real>(x: &[F]) -> Vec<F> {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax<F: Real>(x: &[F]) -> Vec<F> {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
    x.iter().map(|&v| v - lse).collect()
}

/// `y = W x + b` with `W` stored `[out, in]`.
pub fn linear<F: Real>(w: &[F], b: &[F], x: &[F]) -> Vec<F> {
    let inputs = x.len();
    debug_assert_eq!(w.len(), b.len() * inputs);
    w.chunks_exact(inputs)
        .zip(b)
        .map(|(row, &bias)| row.iter().zip(x).fold(bias, |acc, (&wi, &xi)| acc + wi * xi))
        .collect()
}

/// Accumulates `dW += dy x^T`, `db += dy` and returns `dx = W^T dy`.
pub fn linear_backward<F: Real>(w: &[F], x: &[F], dy: &[F], dw: &mut [F], db: &mut [F]) -> Vec<F> {
    let inputs = x.len();
    let mut dx = vec![F::zero(); inputs];
    for (o, &g) in dy.iter().enumerate() {
        db[o] += g;
        let row = &w[o * inputs..(o + 1) * inputs];
        let drow = &mut dw[o * inputs..(o + 1) * inputs];
        for i in 0..inputs {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct NormCache<F> {
    pub normalized: Vec<F>,
    pub inv_std: F,
}

pub fn layer_norm<F: Real>(x: &[F], gamma: &[F], beta: &[F]) -> (Vec<F>, NormCache<F>) {
    let n = F::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv_std = F::one() / (var + F::from_f64(LAYER_NORM_EPS).unwrap()).sqrt();
    let normalized: Vec<F> = x.iter().map(|&v| (v - mean) * inv_std).collect();
    let y = normalized
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&h, (&g, &b))| h * g + b)
        .collect();
    (y, NormCache { normalized, inv_std })
}

pub fn layer_norm_backward<F: Real>(
    cache: &NormCache<F>,
    gamma: &[F],
    dy: &[F],
    dgamma: &mut [F],
    dbeta: &mut [F],
) -> Vec<F> {
    let n = F::from_usize(dy.len()).unwrap();
    let mut dxhat = Vec::with_capacity(dy.len());
    let (mut sum, mut dot) = (F::zero(), F::zero());
    for i in 0..dy.len() {
        dgamma[i] += dy[i] * cache.normalized[i];
        dbeta[i] += dy[i];
        let d = dy[i] * gamma[i];
        sum += d;
        dot += d * cache.normalized[i];
        dxhat.push(d);
    }
    dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(&d, &h)| cache.inv_std / n * (n * d - sum - h * dot))
        .collect()
}

/// Geometry of a 3x3x3 convolution with padding 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub stride_t: usize,
    pub stride_s: usize,
}

pub const KERNEL: usize = 3;
pub const KERNEL_VOLUME: usize = KERNEL * KERNEL * KERNEL;

/// Output extent of a padded 3-tap convolution: `floor((L - 1) / s) + 1`.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

impl ConvGeom {
    pub fn new(in_channels: usize, out_channels: usize, input: [usize; 3], stride_t: usize, stride_s: usize) -> Self {
        let output = [
            conv_out_len(input[0], stride_t),
            conv_out_len(input[1], stride_s),
            conv_out_len(input[2], stride_s),
        ];
        ConvGeom {
            in_channels,
            out_channels,
            input,
            output,
            stride_t,
            stride_s,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * KERNEL_VOLUME
    }

    pub fn positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.input.iter().product::<usize>()
    }

    /// Visits every contiguous run of valid taps as
    /// `(patch-matrix offset, input offset, run length)`; consecutive taps in
    /// a run step by 1 in the patch matrix and by `stride_s` in the input.
    fn for_each_run(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let [ti, hi, wi] = self.input;
        let [to, ho, wo] = self.output;
        let p = self.positions();
        let s = self.stride_s;
        for c in 0..self.in_channels {
            for kt in 0..KERNEL {
                for kh in 0..KERNEL {
                    for kw in 0..KERNEL {
                        let row = ((c * KERNEL + kt) * KERNEL + kh) * KERNEL + kw;
                        // iw = ow * s + kw - 1 must land in [0, wi)
                        let ow_start = usize::from(kw == 0);
                        let ow_end = (wi + 1 - kw).div_ceil(s).min(wo);
                        if ow_end <= ow_start {
                            continue;
                        }
                        let len = ow_end - ow_start;
                        for ot in 0..to {
                            let Some(it) = (ot * self.stride_t + kt).checked_sub(1).filter(|&v| v < ti) else {
                                continue;
                            };
                            for oh in 0..ho {
                                let Some(ih) = (oh * s + kh).checked_sub(1).filter(|&v| v < hi) else {
                                    continue;
                                };
                                let src = ((c * ti + it) * hi + ih) * wi + ow_start * s + kw - 1;
                                let dst = row * p + (ot * ho + oh) * wo + ow_start;
                                visit(dst, src, len);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Unfolds the input into a `[in_channels * 27, positions]` patch matrix.
    pub fn im2col<F: Real>(&self, input: &[F]) -> Vec<F> {
        assert_eq!(input.len(), self.input_len(), "conv input size");
        let s = self.stride_s;
        let mut cols = vec![F::zero(); self.patch_len() * self.positions()];
        self.for_each_run(|dst, src, len| {
            for (j, v) in cols[dst..dst + len].iter_mut().enumerate() {
                *v = input[src + j * s];
            }
        });
        cols
    }

    /// Scatter-adds a patch-matrix gradient back onto the input volume.
    pub fn col2im<F: Real>(&self, cols: &[F]) -> Vec<F> {
        let s = self.stride_s;
        let mut grad = vec![F::zero(); self.input_len()];
        self.for_each_run(|dst, src, len| {
            for (j, &v) in cols[dst..dst + len].iter().enumerate() {
                grad[src + j * s] += v;
            }
        });
        grad
    }

    /// Pre-activation output `[out_channels, positions]` and the patch matrix.
    pub fn forward<F: Real>(&self, weight: &[F], bias: &[F], input: &[F]) -> (Vec<F>, Vec<F>) {
        let cols = self.im2col(input);
        let p = self.positions();
        let mut out = vec![F::zero(); self.out_channels * p];
        for (row, &b) in out.chunks_exact_mut(p).zip(bias) {
            row.fill(b);
        }
        matmul(weight, &cols, &mut out, self.out_channels, self.patch_len(), p, false, false, true);
        (out, cols)
    }

    /// Accumulates weight/bias gradients; returns the input gradient if requested.
    pub fn backward<F: Real>(
        &self,
        weight: &[F],
        cols: &[F],
        dout: &[F],
        dweight: &mut [F],
        dbias: &mut [F],
        want_input_grad: bool,
    ) -> Option<Vec<F>> {
        let p = self.positions();
        let k = self.patch_len();
        for (db, row) in dbias.iter_mut().zip(dout.chunks_exact(p)) {
            *db += row.iter().copied().sum::<F>();
        }
        // dW[out, k] += dout[out, p] * cols[k, p]^T
        matmul(dout, cols, dweight, self.out_channels, p, k, false, true, true);
        if !want_input_grad {
            return None;
        }
        // dcols[k, p] = W[out, k]^T * dout[out, p]
        let mut dcols = vec![F::zero(); k * p];
        matmul(weight, dout, &mut dcols, k, self.out_channels, p, true, false, false);
        Some(self.col2im(&dcols))
    }
}
