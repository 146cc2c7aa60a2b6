//! Forward kernels shared by the tape and by gradient-free callers.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return dim_err(format!(
            "matmul: cannot multiply {:?} by {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::new(&[m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

/// `m×k` times `k×n`, i-k-j loop order.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a: m×n`, `b: k×n`, giving `m×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul_raw(a, &bt, m, n, k)
}

/// `aᵀ · g` for `a: m×k`, `g: m×n`, giving `k×n`.
pub fn matmul_tn(a: &[f64], g: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

pub fn batch_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1]
    {
        return dim_err(format!(
            "batch_matmul: cannot multiply {:?} by {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
    let mut data = Vec::with_capacity(bs * m * n);
    for s in 0..bs {
        data.extend(matmul_raw(
            &a.data()[s * m * k..(s + 1) * m * k],
            &b.data()[s * k * n..(s + 1) * k * n],
            m,
            k,
            n,
        ));
    }
    Tensor::new(&[bs, m, n], data)
}

pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let (batch, r, c) = match x.shape() {
        [r, c] => (1, *r, *c),
        [b, r, c] => (*b, *r, *c),
        s => return dim_err(format!("transpose: expected 2-d or 3-d, got {s:?}")),
    };
    let mut data = vec![0.0; x.numel()];
    for s in 0..batch {
        let src = &x.data()[s * r * c..(s + 1) * r * c];
        let dst = &mut data[s * r * c..(s + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape.swap(nd - 2, nd - 1);
    Tensor::new(&shape, data)
}

/// `(outer, len, inner)` strides around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        return dim_err(format!(
            "softmax: axis {axis} invalid for shape {:?}",
            x.shape()
        ));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for r in 0..inner {
            let base = o * len * inner + r;
            let m = (0..len)
                .map(|j| src[base + j * inner])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[base + j * inner] - m).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                out[base + j * inner] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_dims(x: &Tensor, k: &Tensor, padding: usize) -> Result<[usize; 7]> {
    if x.ndim() != 3 || k.ndim() != 4 {
        return dim_err(format!(
            "conv2d: expected D×H×W input and D×C×kh×kw kernel, got {:?} and {:?}",
            x.shape(),
            k.shape()
        ));
    }
    let (d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kd, c, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if kd != d {
        return dim_err(format!(
            "conv2d: kernel {:?} expects {kd} input channels, input {:?} has {d}",
            k.shape(),
            x.shape()
        ));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return dim_err(format!(
            "conv2d: kernel {kh}×{kw} larger than padded input {:?}",
            x.shape()
        ));
    }
    Ok([d, h, w, c, kh, kw, 0])
}

/// Stride-1 zero-padded cross-correlation.
///
/// Input is `D×H×W`, kernel is `D×C×kh×kw`, output is `C×H'×W'` with
/// `H' = H + 2·padding − kh + 1`.
pub fn conv2d(x: &Tensor, k: &Tensor, padding: usize) -> Result<Tensor> {
    let [d, h, w, c, kh, kw, _] = conv_dims(x, k, padding)?;
    let (oh, ow) = (h + 2 * padding - kh + 1, w + 2 * padding - kw + 1);
    let col = im2col(x.data(), [d, h, w], kh, kw, padding);
    let kt = kernel_rows(k.data(), [d, c, kh, kw]);
    let out = matmul_raw(&kt, &col, c, d * kh * kw, oh * ow);
    Tensor::new(&[c, oh, ow], out)
}

/// Patch matrix with rows `(d, ky, kx)` and one column per output position;
/// out-of-bounds taps are zero.
fn im2col(x: &[f64], [d, h, w]: [usize; 3], kh: usize, kw: usize, padding: usize) -> Vec<f64> {
    let (oh, ow) = (h + 2 * padding - kh + 1, w + 2 * padding - kw + 1);
    let mut col = vec![0.0; d * kh * kw * oh * ow];
    for_each_tap([d, h, w], kh, kw, padding, |row, pos, xi| col[row * oh * ow + pos] = x[xi]);
    col
}

/// Calls `f(row, pos, input_index)` for every in-bounds tap.
fn for_each_tap(
    [d, h, w]: [usize; 3],
    kh: usize,
    kw: usize,
    padding: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (oh, ow) = (h + 2 * padding - kh + 1, w + 2 * padding - kw + 1);
    for di in 0..d {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (di * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        f(row, oy * ow + ox, (di * h + iy as usize) * w + ix as usize);
                    }
                }
            }
        }
    }
}

/// `D×C×kh×kw` kernel as a `C × (D·kh·kw)` matrix.
fn kernel_rows(k: &[f64], [d, c, kh, kw]: [usize; 4]) -> Vec<f64> {
    let taps = kh * kw;
    let mut out = vec![0.0; c * d * taps];
    for di in 0..d {
        for ci in 0..c {
            let src = &k[(di * c + ci) * taps..(di * c + ci + 1) * taps];
            out[(ci * d + di) * taps..(ci * d + di + 1) * taps].copy_from_slice(src);
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    padding: usize,
    g: &[f64],
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let [d, h, w, c, kh, kw, _] = conv_dims(x, k, padding).expect("validated in forward");
    let (oh, ow) = (h + 2 * padding - kh + 1, w + 2 * padding - kw + 1);
    let (rows, taps) = (d * kh * kw, kh * kw);
    let dk = want_k.then(|| {
        let col = im2col(x.data(), [d, h, w], kh, kw, padding);
        let dkt = matmul_nt(g, &col, c, oh * ow, rows);
        let mut dk = vec![0.0; dkt.len()];
        for di in 0..d {
            for ci in 0..c {
                let src = &dkt[(ci * d + di) * taps..(ci * d + di + 1) * taps];
                dk[(di * c + ci) * taps..(di * c + ci + 1) * taps].copy_from_slice(src);
            }
        }
        dk
    });
    let dx = want_x.then(|| {
        let kt = kernel_rows(k.data(), [d, c, kh, kw]);
        let dcol = matmul_tn(&kt, g, rows, c, oh * ow);
        let mut dx = vec![0.0; x.numel()];
        for_each_tap([d, h, w], kh, kw, padding, |row, pos, xi| dx[xi] += dcol[row * oh * ow + pos]);
        dx
    });
    (dx, dk)
}

fn expect_chw(op: &str, x: &Tensor) -> Result<(usize, usize)> {
    if x.ndim() != 3 {
        return dim_err(format!("{op}: expected C×H×W, got {:?}", x.shape()));
    }
    Ok((x.shape()[0], x.shape()[1] * x.shape()[2]))
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, plane) = expect_chw("global_avg_pool", x)?;
    let data = (0..c)
        .map(|ch| x.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(&[c], data)
}

/// Returns the pooled values and the flat argmax index per channel.
pub fn global_max_pool(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, plane) = expect_chw("global_max_pool", x)?;
    let mut vals = Vec::with_capacity(c);
    let mut idx = Vec::with_capacity(c);
    for ch in 0..c {
        let (_, best) = argmin_argmax(&x.data()[ch * plane..(ch + 1) * plane]);
        idx.push(ch * plane + best);
        vals.push(x.data()[ch * plane + best]);
    }
    Ok((Tensor::new(&[c], vals)?, idx))
}

/// First-occurrence argmin and argmax.
pub fn argmin_argmax(v: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[lo] {
            lo = i;
        }
        if x > v[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    if x.ndim() != 2 || heads == 0 || x.shape()[1] % heads != 0 {
        return dim_err(format!(
            "split_heads: {:?} cannot split into {heads} heads",
            x.shape()
        ));
    }
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let dh = d / heads;
    let mut data = vec![0.0; x.numel()];
    for s in 0..heads {
        for i in 0..t {
            data[(s * t + i) * dh..(s * t + i + 1) * dh]
                .copy_from_slice(&x.data()[i * d + s * dh..i * d + (s + 1) * dh]);
        }
    }
    Tensor::new(&[heads, t, dh], data)
}

pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 {
        return dim_err(format!("merge_heads: expected S×T×d, got {:?}", x.shape()));
    }
    let (heads, t, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = heads * dh;
    let mut data = vec![0.0; x.numel()];
    for s in 0..heads {
        for i in 0..t {
            data[i * d + s * dh..i * d + (s + 1) * dh]
                .copy_from_slice(&x.data()[(s * t + i) * dh..(s * t + i + 1) * dh]);
        }
    }
    Tensor::new(&[t, d], data)
}

/// Arithmetic mean over the leading axis, summed in index order.
pub fn mean_axis0(x: &Tensor) -> Result<Tensor> {
    if x.ndim() < 2 {
        return dim_err(format!("mean_axis0: need ≥2 axes, got {:?}", x.shape()));
    }
    let s = x.shape()[0];
    let stride = x.numel() / s;
    let mut out = vec![0.0; stride];
    for k in 0..s {
        for (o, v) in out.iter_mut().zip(&x.data()[k * stride..(k + 1) * stride]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= s as f64);
    Tensor::new(&x.shape()[1..], out)
}

/// `Σ_g w[g] · items[g]`.
pub fn weighted_sum(w: &Tensor, items: &Tensor) -> Result<Tensor> {
    let g = w.numel();
    if items.ndim() < 2 || items.shape()[0] != g {
        return dim_err(format!(
            "weighted_sum: weights {:?} vs items {:?}",
            w.shape(),
            items.shape()
        ));
    }
    let stride = items.numel() / g;
    let mut out = vec![0.0; stride];
    for k in 0..g {
        let wk = w.data()[k];
        for (o, v) in out.iter_mut().zip(&items.data()[k * stride..(k + 1) * stride]) {
            *o += wk * v;
        }
    }
    Tensor::new(&items.shape()[1..], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_bad_axis() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn split_merge_inverse() {
        let x = Tensor::from_fn(&[5, 8], |i| i as f64);
        let y = merge_heads(&split_heads(&x, 4).unwrap()).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[3, 1, 3, 3]);
        assert!(conv2d(&x, &k, 1).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
