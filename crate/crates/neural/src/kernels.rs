//! Raw numeric kernels shared by forward ops and their vector-Jacobian
//! products. Reductions accumulate in `f64`.

use crate::scalar::{MatRef, Scalar};

pub(crate) fn permute<T: Scalar>(shape: &[usize], data: &[T], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out_shape, out);
    }
    // Innermost axis handled as a strided run, the rest with an odometer.
    let last = nd - 1;
    let run = out_shape[last];
    let run_stride = strides[last];
    let mut idx = vec![0usize; nd];
    loop {
        let base: usize = (0..last).map(|a| idx[a] * strides[a]).sum();
        if run_stride == 1 {
            out.extend_from_slice(&data[base..base + run]);
        } else {
            out.extend((0..run).map(|r| data[base + r * run_stride]));
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = 0.0f64;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = (v - max).exp();
            *d = e;
            sum += e.as_f64();
        }
        let inv = T::from_f64_lossy(1.0 / sum);
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((ys, gs), dst) in y
        .chunks_exact(cols)
        .zip(g.chunks_exact(cols))
        .zip(out.chunks_exact_mut(cols))
    {
        let dot: f64 = ys.iter().zip(gs).map(|(&a, &b)| (a * b).as_f64()).sum();
        let dot = T::from_f64_lossy(dot);
        for ((d, &yv), &gv) in dst.iter_mut().zip(ys).zip(gs) {
            *d = yv * (gv - dot);
        }
    }
    out
}

/// Returns (output, normalised input, reciprocal std per row).
pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for c in 0..d {
            let h = T::from_f64_lossy((row[c].as_f64() - mean) * rs);
            xhat[r * d + c] = h;
            y[r * d + c] = h * gamma[c] + beta[c];
        }
        rstd.push(T::from_f64_lossy(rs));
    }
    (y, xhat, rstd)
}

/// Returns (d input, d gamma, d beta).
pub(crate) fn layer_norm_backward<T: Scalar>(
    g: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); g.len()];
    let mut ggamma = vec![0.0f64; d];
    let mut gbeta = vec![0.0f64; d];
    let mut gxhat = vec![T::zero(); d];
    for (r, &rs) in rstd.iter().enumerate() {
        let gs = &g[r * d..(r + 1) * d];
        let hs = &xhat[r * d..(r + 1) * d];
        let mut mean_g = 0.0f64;
        let mut mean_gh = 0.0f64;
        for c in 0..d {
            ggamma[c] += (gs[c] * hs[c]).as_f64();
            gbeta[c] += gs[c].as_f64();
            gxhat[c] = gs[c] * gamma[c];
            mean_g += gxhat[c].as_f64();
            mean_gh += (gxhat[c] * hs[c]).as_f64();
        }
        let mean_g = T::from_f64_lossy(mean_g / d as f64);
        let mean_gh = T::from_f64_lossy(mean_gh / d as f64);
        for c in 0..d {
            gx[r * d + c] = rs * (gxhat[c] - mean_g - hs[c] * mean_gh);
        }
    }
    let ggamma = ggamma.into_iter().map(T::from_f64_lossy).collect();
    let gbeta = gbeta.into_iter().map(T::from_f64_lossy).collect();
    (gx, ggamma, gbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
fn fast_tanh<T: Scalar>(u: T) -> T {
    // libm tanh is several times slower than exp; the absolute error of
    // this form stays at the rounding level.
    let lim = T::from_f64_lossy(9.0);
    if u > lim {
        return T::one();
    }
    if u < -lim {
        return -T::one();
    }
    let e = (u + u).exp();
    (e - T::one()) / (e + T::one())
}

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + fast_tanh(c * (x + k * x * x * x)))
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let th = fast_tanh(c * (x + k * x * x * x));
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub t_out: usize,
}

/// Unfolded input for one batch item: `[c_in * kernel, t_out]`.
fn im2col<T: Scalar>(x: &[T], geom: &ConvGeometry) -> Vec<T> {
    let rows = geom.c_in * geom.kernel;
    let mut cols = vec![T::zero(); rows * geom.t_out];
    for i in 0..geom.c_in {
        let xi = &x[i * geom.t_in..(i + 1) * geom.t_in];
        for p in 0..geom.kernel {
            let dst = &mut cols[(i * geom.kernel + p) * geom.t_out..(i * geom.kernel + p + 1) * geom.t_out];
            for (t, d) in dst.iter_mut().enumerate() {
                *d = xi[t * geom.stride + p];
            }
        }
    }
    cols
}

pub(crate) fn conv1d<T: Scalar>(x: &[T], w: &[T], geom: &ConvGeometry) -> Vec<T> {
    let rows = geom.c_in * geom.kernel;
    let per_in = geom.c_in * geom.t_in;
    let per_out = geom.c_out * geom.t_out;
    let mut out = vec![T::zero(); geom.batch * per_out];
    for b in 0..geom.batch {
        let cols = im2col(&x[b * per_in..(b + 1) * per_in], geom);
        T::gemm(
            MatRef::new(w, geom.c_out, rows),
            MatRef::new(&cols, rows, geom.t_out),
            T::zero(),
            &mut out[b * per_out..(b + 1) * per_out],
        );
    }
    out
}

pub(crate) fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    geom: &ConvGeometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let rows = geom.c_in * geom.kernel;
    let per_in = geom.c_in * geom.t_in;
    let per_out = geom.c_out * geom.t_out;
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    let mut gcols = vec![T::zero(); rows * geom.t_out];
    for b in 0..geom.batch {
        let gb = &g[b * per_out..(b + 1) * per_out];
        if let Some(gw) = gw.as_mut() {
            let cols = im2col(&x[b * per_in..(b + 1) * per_in], geom);
            T::gemm(
                MatRef::new(gb, geom.c_out, geom.t_out),
                MatRef::new(&cols, rows, geom.t_out).t(),
                T::one(),
                gw,
            );
        }
        if let Some(gx) = gx.as_mut() {
            T::gemm(
                MatRef::new(w, geom.c_out, rows).t(),
                MatRef::new(gb, geom.c_out, geom.t_out),
                T::zero(),
                &mut gcols,
            );
            let gxb = &mut gx[b * per_in..(b + 1) * per_in];
            for i in 0..geom.c_in {
                for p in 0..geom.kernel {
                    let src = &gcols[(i * geom.kernel + p) * geom.t_out..(i * geom.kernel + p + 1) * geom.t_out];
                    for (t, &v) in src.iter().enumerate() {
                        gxb[i * geom.t_in + t * geom.stride + p] += v;
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Mean cross-entropy (as `f64`) and the softmax probabilities.
pub(crate) fn cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> (f64, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = 0.0f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label].as_f64();
        for c in 0..classes {
            probs[r * classes + c] = T::from_f64_lossy((row[c].as_f64() - lse).exp());
        }
    }
    (total / labels.len() as f64, probs)
}

/// Column of the relative-bias table for query `i` and key `j`.
#[inline]
pub(crate) fn rel_index(i: usize, j: usize, max_offset: usize) -> usize {
    let offset = (j as isize - i as isize).clamp(-(max_offset as isize), max_offset as isize);
    (offset + max_offset as isize) as usize
}
