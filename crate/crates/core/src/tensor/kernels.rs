//! Forward and backward kernels for the primitive ops.
//!
//! Forward kernels are public and usable without a tape. Backward kernels take
//! the upstream gradient and whatever the forward pass cached.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::argument(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split_axis(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..len {
                max = max.max(src[base + k * inner]);
            }
            let mut total = T::zero();
            for k in 0..len {
                let e = (src[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                total += e;
            }
            for k in 0..len {
                out[base + k * inner] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, grad: &[T], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(y.shape(), axis).expect("axis validated in forward");
    let y = y.data();
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for k in 0..len {
                dot += grad[base + k * inner] * y[base + k * inner];
            }
            for k in 0..len {
                let idx = base + k * inner;
                out[idx] = y[idx] * (grad[idx] - dot);
            }
        }
    }
    out
}

/// Normalized values and per-row inverse standard deviations kept for backward.
#[derive(Debug, Clone)]
pub(crate) struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_cached<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let dim = *x
        .shape()
        .last()
        .ok_or_else(|| Error::argument("layer_norm needs rank >= 1"))?;
    if gamma.shape() != [dim] || beta.shape() != [dim] {
        return Err(Error::argument(format!(
            "layer_norm affine shapes {:?}/{:?} do not match last axis {dim}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::argument("layer_norm eps must be positive"));
    }
    let rows = x.numel() / dim;
    let n = T::of_usize(dim);
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(x.numel());
    let mut xhat = Vec::with_capacity(x.numel());
    let mut rstd = Vec::with_capacity(rows);
    for row in x.data().chunks_exact(dim) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for (k, &v) in row.iter().enumerate() {
            let h = (v - mean) * r;
            xhat.push(h);
            out.push(g[k] * h + b[k]);
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, NormCache { xhat, rstd }))
}

/// Returns (dx, dgamma, dbeta) for layer normalization.
pub(crate) fn layer_norm_backward<T: Real>(cache: &NormCache<T>, gamma: &[T], grad: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dim = gamma.len();
    let n = T::of_usize(dim);
    let mut dx = vec![T::zero(); grad.len()];
    let mut dgamma = vec![T::zero(); dim];
    let mut dbeta = vec![T::zero(); dim];
    for (row, r) in cache.rstd.iter().enumerate() {
        let off = row * dim;
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for k in 0..dim {
            let g = grad[off + k];
            let h = cache.xhat[off + k];
            dgamma[k] += g * h;
            dbeta[k] += g;
            let d = g * gamma[k];
            mean_d += d;
            mean_dx += d * h;
        }
        mean_d /= n;
        mean_dx /= n;
        for k in 0..dim {
            let d = grad[off + k] * gamma[k];
            dx[off + k] = *r * (d - mean_d - cache.xhat[off + k] * mean_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch statistics for a `[B, C, H, W]` input, per channel.
pub(crate) struct BatchStats<T> {
    pub mean: Vec<T>,
    pub biased_var: Vec<T>,
}

pub(crate) fn batch_stats<T: Real>(x: &Tensor<T>) -> Result<BatchStats<T>> {
    let [b, c, h, w] = dims4(x, "batch_norm input")?;
    let plane = h * w;
    let count = T::of_usize(b * plane);
    let data = x.data();
    let mut mean = vec![T::zero(); c];
    let mut biased_var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for n in 0..b {
            let off = (n * c + ch) * plane;
            s += data[off..off + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for n in 0..b {
            let off = (n * c + ch) * plane;
            v += data[off..off + plane].iter().map(|&x| (x - m) * (x - m)).sum::<T>();
        }
        mean[ch] = m;
        biased_var[ch] = v / count;
    }
    Ok(BatchStats { mean, biased_var })
}

/// Per-channel affine normalization `gamma * (x - mean) * rstd + beta`.
pub(crate) fn channel_normalize<T: Real>(
    x: &Tensor<T>,
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let [b, c, h, w] = dims4(x, "batch_norm input")?;
    if mean.len() != c || gamma.len() != c || beta.len() != c || var.len() != c {
        return Err(Error::argument(format!(
            "batch_norm parameters do not match {c} channels"
        )));
    }
    let plane = h * w;
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.numel());
    let mut out = Vec::with_capacity(x.numel());
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            for &v in &x.data()[off..off + plane] {
                let hv = (v - mean[ch]) * rstd[ch];
                xhat.push(hv);
                out.push(gamma[ch] * hv + beta[ch]);
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, NormCache { xhat, rstd }))
}

/// Returns (dx, dgamma, dbeta). With `batch_stats` the mean and variance are
/// treated as functions of the input, otherwise as constants.
pub(crate) fn batch_norm_backward<T: Real>(
    shape: &[usize],
    cache: &NormCache<T>,
    gamma: &[T],
    grad: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = T::of_usize(b * plane);
    let mut dx = vec![T::zero(); grad.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for n in 0..b {
            let off = (n * c + ch) * plane;
            for (&g, &xh) in grad[off..off + plane].iter().zip(&cache.xhat[off..off + plane]) {
                dgamma[ch] += g * xh;
                dbeta[ch] += g;
                let d = g * gamma[ch];
                mean_d += d;
                mean_dx += d * xh;
            }
        }
        mean_d /= count;
        mean_dx /= count;
        let r = cache.rstd[ch];
        for n in 0..b {
            let off = (n * c + ch) * plane;
            for k in off..off + plane {
                let d = grad[k] * gamma[ch];
                dx[k] = if batch_stats {
                    r * (d - mean_d - cache.xhat[k] * mean_dx)
                } else {
                    r * d
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn dims4<T: Real>(x: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::argument(format!("{what} must be rank 4, got {s:?}"))),
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `x` is `[B, Cin, H, W]`, `kernel` is `[Cout, Cin, k, k]`, `bias` is `[Cout]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, padding: usize) -> Result<Tensor<T>> {
    let [b, cin, h, w] = dims4(x, "conv2d input")?;
    let [cout, kcin, kh, kw] = dims4(kernel, "conv2d kernel")?;
    if kcin != cin {
        return Err(Error::argument(format!(
            "conv2d channel mismatch: input has {cin}, kernel expects {kcin}"
        )));
    }
    if kh != kw {
        return Err(Error::argument("conv2d kernel must be square"));
    }
    if bias.shape() != [cout] {
        return Err(Error::argument(format!(
            "conv2d bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::argument("conv2d kernel larger than padded input"));
    }
    let (oh, ow) = (h + 2 * padding - kh + 1, w + 2 * padding - kw + 1);
    let (xd, kd, bd) = (x.data(), kernel.data(), bias.data());
    let mut out = vec![T::zero(); b * cout * oh * ow];
    for n in 0..b {
        for o in 0..cout {
            let plane = &mut out[(n * cout + o) * oh * ow..(n * cout + o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..cin {
                let src = &xd[(n * cin + c) * h * w..(n * cin + c + 1) * h * w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = kd[((o * cin + c) * kh + ki) * kw + kj];
                        if wv == T::zero() {
                            continue;
                        }
                        for y in 0..oh {
                            let sy = y + ki;
                            if sy < padding || sy - padding >= h {
                                continue;
                            }
                            let row = &src[(sy - padding) * w..(sy - padding + 1) * w];
                            let dst = &mut plane[y * ow..(y + 1) * ow];
                            for (xo, d) in dst.iter_mut().enumerate() {
                                let sx = xo + kj;
                                if sx >= padding && sx - padding < w {
                                    *d += wv * row[sx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cout, oh, ow], out)
}

/// Returns (dx, dkernel, dbias) for [`conv2d`].
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: usize,
    grad: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let k = kernel.shape();
    let (cout, kh, kw) = (k[0], k[2], k[3]);
    let (oh, ow) = (h + 2 * padding - kh + 1, w + 2 * padding - kw + 1);
    let (xd, kd) = (x.data(), kernel.data());
    let mut dx = vec![T::zero(); xd.len()];
    let mut dk = vec![T::zero(); kd.len()];
    let mut db = vec![T::zero(); cout];
    for n in 0..b {
        for o in 0..cout {
            let g = &grad[(n * cout + o) * oh * ow..(n * cout + o + 1) * oh * ow];
            db[o] += g.iter().copied().sum::<T>();
            for c in 0..cin {
                let base = (n * cin + c) * h * w;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let kidx = ((o * cin + c) * kh + ki) * kw + kj;
                        let wv = kd[kidx];
                        let mut acc = T::zero();
                        for y in 0..oh {
                            let sy = y + ki;
                            if sy < padding || sy - padding >= h {
                                continue;
                            }
                            let row = base + (sy - padding) * w;
                            for xo in 0..ow {
                                let sx = xo + kj;
                                if sx >= padding && sx - padding < w {
                                    let gv = g[y * ow + xo];
                                    acc += gv * xd[row + sx - padding];
                                    dx[row + sx - padding] += gv * wv;
                                }
                            }
                        }
                        dk[kidx] += acc;
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// `y = x W^T + b` on the last axis; `x` is `[..., in]`, `w` is `[out, in]`.
pub(crate) fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (out_dim, in_dim) = match *w.shape() {
        [o, i] => (o, i),
        ref s => return Err(Error::argument(format!("linear weight must be rank 2, got {s:?}"))),
    };
    if x.shape().last() != Some(&in_dim) {
        return Err(Error::argument(format!(
            "linear input {:?} does not end in {in_dim}",
            x.shape()
        )));
    }
    if let Some(b) = b {
        if b.shape() != [out_dim] {
            return Err(Error::argument(format!(
                "linear bias {:?} does not match {out_dim} outputs",
                b.shape()
            )));
        }
    }
    let rows = x.numel() / in_dim;
    let wd = w.data();
    let mut out = Vec::with_capacity(rows * out_dim);
    for row in x.data().chunks_exact(in_dim) {
        for o in 0..out_dim {
            let wr = &wd[o * in_dim..(o + 1) * in_dim];
            let mut acc = b.map_or(T::zero(), |b| b.data()[o]);
            for (a, c) in row.iter().zip(wr) {
                acc += *a * *c;
            }
            out.push(acc);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    Tensor::new(shape, out)
}

/// Returns (dx, dw, db) for [`linear`].
pub(crate) fn linear_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, grad: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); wd.len()];
    let mut db = vec![T::zero(); out_dim];
    for (r, row) in x.data().chunks_exact(in_dim).enumerate() {
        let g = &grad[r * out_dim..(r + 1) * out_dim];
        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let gv = g[o];
            if gv == T::zero() {
                continue;
            }
            db[o] += gv;
            let wr = &wd[o * in_dim..(o + 1) * in_dim];
            let dwr = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dxr[i] += gv * wr[i];
                dwr[i] += gv * row[i];
            }
        }
    }
    (dx, dw, db)
}

/// Batched matrix product of `[G, m, k]` and `[G, k, n]`.
pub(crate) fn bmm<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (g, m, k) = match *a.shape() {
        [g, m, k] => (g, m, k),
        ref s => return Err(Error::argument(format!("bmm lhs must be rank 3, got {s:?}"))),
    };
    let n = match *b.shape() {
        [bg, bk, n] if bg == g && bk == k => n,
        ref s => {
            return Err(Error::argument(format!(
                "bmm rhs {s:?} incompatible with lhs {:?}",
                a.shape()
            )))
        }
    };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); g * m * n];
    for gi in 0..g {
        for i in 0..m {
            let dst = &mut out[(gi * m + i) * n..(gi * m + i + 1) * n];
            for p in 0..k {
                let av = ad[(gi * m + i) * k + p];
                let br = &bd[(gi * k + p) * n..(gi * k + p + 1) * n];
                for (d, &bv) in dst.iter_mut().zip(br) {
                    *d += av * bv;
                }
            }
        }
    }
    Tensor::new(vec![g, m, n], out)
}

/// Returns (da, db) for [`bmm`].
pub(crate) fn bmm_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, grad: &[T]) -> (Vec<T>, Vec<T>) {
    let (g, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[2];
    let (ad, bd) = (a.data(), b.data());
    let mut da = vec![T::zero(); ad.len()];
    let mut db = vec![T::zero(); bd.len()];
    for gi in 0..g {
        for i in 0..m {
            let gr = &grad[(gi * m + i) * n..(gi * m + i + 1) * n];
            for p in 0..k {
                let br = &bd[(gi * k + p) * n..(gi * k + p + 1) * n];
                let mut acc = T::zero();
                for (gv, bv) in gr.iter().zip(br) {
                    acc += *gv * *bv;
                }
                da[(gi * m + i) * k + p] += acc;
                let av = ad[(gi * m + i) * k + p];
                let dbr = &mut db[(gi * k + p) * n..(gi * k + p + 1) * n];
                for (d, gv) in dbr.iter_mut().zip(gr) {
                    *d += av * *gv;
                }
            }
        }
    }
    (da, db)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub(crate) fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

const GELU_COEF: f64 = 0.044_715;

fn gelu_inner<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    c * (x + T::of(GELU_COEF) * x * x * x)
}

/// GELU, tanh approximation.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    T::of(0.5) * x * (T::one() + gelu_inner(x).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let t = gelu_inner(x).tanh();
    let du = c * (T::one() + T::of(3.0 * GELU_COEF) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_of_log_weights() {
        let x = t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let y = softmax(&x, 0).unwrap();
        for (got, want) in y.data().iter().zip([1.0 / 6.0, 1.0 / 3.0, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]);
        let y = softmax(&x, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let one = t(&[3], &[1.0; 3]);
        let zero = t(&[3], &[0.0; 3]);
        let y = layer_norm(&t(&[3], &[5.0; 3]), &one, &zero, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0; 3]);

        let y = layer_norm(&t(&[2], &[1.0, -1.0]), &t(&[2], &[1.0; 2]), &t(&[2], &[0.0; 2]), 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);

        let y = layer_norm(&t(&[3], &[1.0, 2.0, 7.0]), &zero, &t(&[3], &[0.5; 3]), 1e-5).unwrap();
        assert_eq!(y.data(), &[0.5; 3]);

        assert!(layer_norm(&t(&[3], &[1.0; 3]), &t(&[2], &[1.0; 2]), &zero, 1e-5).is_err());
        assert!(layer_norm(&t(&[3], &[1.0; 3]), &one, &zero, 0.0).is_err());
    }

    #[test]
    fn conv_identity_kernels() {
        let x = t(&[1, 2, 3, 3], &(0..18).map(f64::from).collect::<Vec<_>>());
        let eye = t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(conv2d(&x, &eye, &t(&[2], &[0.0; 2]), 0).unwrap(), x);

        let x1 = t(&[1, 1, 4, 4], &(0..16).map(f64::from).collect::<Vec<_>>());
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let y = conv2d(&x1, &t(&[1, 1, 3, 3], &delta), &t(&[1], &[0.0]), 1).unwrap();
        assert_eq!(y, x1);
    }

    #[test]
    fn conv_receptive_field_sums() {
        let x = t(&[1, 1, 4, 4], &[1.0; 16]);
        let y = conv2d(&x, &t(&[1, 1, 3, 3], &[1.0; 9]), &t(&[1], &[0.0]), 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.data()[5], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = t(&[1, 2, 3, 3], &[0.0; 18]);
        let k = t(&[1, 3, 1, 1], &[0.0; 3]);
        assert!(matches!(conv2d(&x, &k, &t(&[1], &[0.0]), 0), Err(Error::Argument(_))));
    }

    #[test]
    fn activations_at_zero() {
        assert_eq!(silu(0.0f64), 0.0);
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((silu_grad(0.0f64) - 0.5).abs() < 1e-15);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
    }
}
