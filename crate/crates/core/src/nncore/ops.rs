//! Row-wise kernels. Every output row depends only on its own input row and
//! is accumulated in a fixed order, so results do not depend on how many rows
//! are processed together.

use crate::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * *v;
    }
}

/// `out[r] = x[r] · W` for `W: [in, out]`.
pub fn matmul<S: Scalar>(x: &[S], w: &Tensor<S>, out: &mut [S]) {
    let (n_in, n_out) = (w.rows(), w.cols());
    debug_assert_eq!(x.len() / n_in, out.len() / n_out);
    for (xr, or) in x.chunks_exact(n_in).zip(out.chunks_exact_mut(n_out)) {
        or.fill(S::zero());
        for (k, &a) in xr.iter().enumerate() {
            axpy(a, w.row(k), or);
        }
    }
}

/// Backward of [`matmul`]: `dx[r] (+)= dy[r] · Wᵀ`, `dW += x[r]ᵀ dy[r]`.
pub fn matmul_backward<S: Scalar>(
    x: &[S],
    w: &Tensor<S>,
    dy: &[S],
    dx: Option<&mut [S]>,
    dw: &mut Tensor<S>,
) {
    let (n_in, n_out) = (w.rows(), w.cols());
    for (xr, dyr) in x.chunks_exact(n_in).zip(dy.chunks_exact(n_out)) {
        for (k, &a) in xr.iter().enumerate() {
            if a != S::zero() {
                axpy(a, dyr, dw.row_mut(k));
            }
        }
    }
    if let Some(dx) = dx {
        for (dxr, dyr) in dx.chunks_exact_mut(n_in).zip(dy.chunks_exact(n_out)) {
            for (k, o) in dxr.iter_mut().enumerate() {
                *o += dot(dyr, w.row(k));
            }
        }
    }
}

/// Layer norm over rows of width `gain.len()`; stores normalized rows and
/// reciprocal std for the backward pass.
pub fn layer_norm<S: Scalar>(
    x: &[S],
    gain: &[S],
    bias: &[S],
    out: &mut [S],
    xhat: &mut [S],
    rstd: &mut [S],
) {
    let d = gain.len();
    let inv_d = S::one() / S::c(d as f64);
    let eps = S::c(LN_EPS);
    for (r, ((xr, or), hr)) in x
        .chunks_exact(d)
        .zip(out.chunks_exact_mut(d))
        .zip(xhat.chunks_exact_mut(d))
        .enumerate()
    {
        let mean = xr.iter().copied().sum::<S>() * inv_d;
        let mut var = S::zero();
        for v in xr {
            let c = *v - mean;
            var += c * c;
        }
        let rs = S::one() / (var * inv_d + eps).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            hr[i] = h;
            or[i] = gain[i] * h + bias[i];
        }
    }
}

/// Accumulates `dx += LN'ᵀ dy` and the gain/bias gradients.
pub fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    xhat: &[S],
    rstd: &[S],
    gain: &[S],
    dgain: &mut [S],
    dbias: &mut [S],
    dx: &mut [S],
) {
    let d = gain.len();
    let inv_d = S::one() / S::c(d as f64);
    let mut dxhat = vec![S::zero(); d];
    for (r, ((dyr, hr), dxr)) in dy
        .chunks_exact(d)
        .zip(xhat.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let mut mean_dxhat = S::zero();
        let mut mean_dxhat_h = S::zero();
        for i in 0..d {
            dgain[i] += dyr[i] * hr[i];
            dbias[i] += dyr[i];
            let g = dyr[i] * gain[i];
            dxhat[i] = g;
            mean_dxhat += g;
            mean_dxhat_h += g * hr[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_h *= inv_d;
        for i in 0..d {
            dxr[i] += rstd[r] * (dxhat[i] - mean_dxhat - hr[i] * mean_dxhat_h);
        }
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = [1.0, 1.0, 0.0, 2.0];
        let mut out = [0.0; 6];
        matmul(&x, &w, &mut out);
        assert_eq!(out, [5.0, 7.0, 9.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let mut out = [0.0; 4];
        let mut h = [0.0; 4];
        let mut r = [0.0; 1];
        layer_norm(&x, &[1.0; 4], &[0.0; 4], &mut out, &mut h, &mut r);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn silu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
