//! Shared helpers for the integration suites: naive-loop oracles and a
//! central finite-difference gradient checker.

#![allow(dead_code)]

use lctr_core::autograd::{Tape, Var};
use lctr_core::model::{LctrModel, ModelConfig};
use lctr_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor for relative error, so coordinates whose true
/// gradient is ~0 are compared absolutely at the FD noise level.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Checks every coordinate of every input of a scalar function built on a
/// tape. Returns the worst relative error.
pub fn check_op(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.numel()]);
        for k in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k], numeric));
        }
    }
    worst
}

/// Toy model small enough for exhaustive finite differences.
pub fn toy_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.backbone.image_size = 16;
    cfg.backbone.patch_size = 4;
    cfg.backbone.embed_dim = 8;
    cfg.backbone.num_heads = 2;
    cfg.backbone.num_blocks = 2;
    cfg.backbone.mlp_ratio = 2.0;
    cfg.backbone.num_classes = 3;
    cfg.cdm.num_classes = 3;
    cfg.cdm.embed_dim = 8;
    cfg
}

/// Compares analytic and central-difference gradients of the full model loss
/// on `coords` random parameter coordinates. Returns `(worst rel err, n)`.
pub fn full_model_gradcheck(model: &mut LctrModel, image: &Tensor, label: usize, coords: usize, seed: u64) -> (f64, usize) {
    let g = model.sample_grad(image, label).unwrap();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let pi = r.random_range(0..model.store.len());
        let k = r.random_range(0..model.store.params()[pi].numel());
        let orig = model.store.params()[pi].tensor.data()[k];
        model.store.params_mut()[pi].tensor.data_mut()[k] = orig + FD_STEP;
        let lp = model.loss(image, label).unwrap();
        model.store.params_mut()[pi].tensor.data_mut()[k] = orig - FD_STEP;
        let lm = model.loss(image, label).unwrap();
        model.store.params_mut()[pi].tensor.data_mut()[k] = orig;
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let e = rel_err(g.grads[pi][k], numeric);
        if e > FD_TOL {
            eprintln!(
                "  {}[{k}]: analytic {:.6e} numeric {:.6e}",
                model.store.params()[pi].name, g.grads[pi][k], numeric
            );
        }
        worst = worst.max(e);
    }
    (worst, coords)
}

/// Naive `m×k · k×n`.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(&[m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let mut s = 0.0;
        for p in 0..k {
            s += a.at(&[i, p]) * b.at(&[p, j]);
        }
        s
    })
}

/// Six-loop zero-padded cross-correlation, `D×H×W` with `D×C×kh×kw`.
pub fn naive_conv2d(x: &Tensor, k: &Tensor, pad: usize) -> Tensor {
    let (d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c, kh, kw) = (k.shape()[1], k.shape()[2], k.shape()[3]);
    let (oh, ow) = (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for di in 0..d {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = oy as isize + ky as isize - pad as isize;
                            let ix = ox as isize + kx as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += x.at(&[di, iy as usize, ix as usize]) * k.at(&[di, ci, ky, kx]);
                            }
                        }
                    }
                }
                let o = out.offset(&[ci, oy, ox]);
                out.data_mut()[o] = s;
            }
        }
    }
    out
}

/// Random row-stochastic `t×t` matrix.
pub fn random_stochastic(rng: &mut ChaCha8Rng, t: usize) -> Tensor {
    let mut m = Tensor::from_fn(&[t, t], |_| rng.random_range(0.01..1.0));
    for row in m.data_mut().chunks_mut(t) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    m
}

/// Double-loop relation vector: `r[j] = (1/T) Σ_i A[0,i] · A[i, j+1]`.
pub fn oracle_relation_vector(a: &Tensor) -> Vec<f64> {
    let t = a.shape()[0];
    (0..t - 1)
        .map(|j| {
            let mut s = 0.0;
            for i in 0..t {
                s += a.at(&[0, i]) * a.at(&[i, j + 1]);
            }
            s / t as f64
        })
        .collect()
}

/// Flood-fill box oracle: explicit stack, 8-neighbourhood, strict threshold
/// on the min-max normalized map, largest area with first-seen tie break.
pub fn oracle_box(h: &Tensor, ratio: f64) -> Option<(usize, usize, usize, usize)> {
    let (rows, cols) = (h.shape()[0], h.shape()[1]);
    let lo = h.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = h.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return None;
    }
    let norm: Vec<f64> = h.data().iter().map(|v| (v - lo) / (hi - lo)).collect();
    let fg: Vec<bool> = norm.iter().map(|&v| v > ratio * 1.0).collect();
    let mut seen = vec![false; rows * cols];
    let mut best: Option<(usize, (usize, usize, usize, usize))> = None;
    for y in 0..rows {
        for x in 0..cols {
            if !fg[y * cols + x] || seen[y * cols + x] {
                continue;
            }
            let mut stack = vec![(y, x)];
            seen[y * cols + x] = true;
            let mut area = 0;
            let (mut x0, mut y0, mut x1, mut y1) = (x, y, x + 1, y + 1);
            while let Some((cy, cx)) = stack.pop() {
                area += 1;
                x0 = x0.min(cx);
                y0 = y0.min(cy);
                x1 = x1.max(cx + 1);
                y1 = y1.max(cy + 1);
                for ny in cy.saturating_sub(1)..=(cy + 1).min(rows - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(cols - 1) {
                        if fg[ny * cols + nx] && !seen[ny * cols + nx] {
                            seen[ny * cols + nx] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            if best.map_or(true, |(a, _)| area > a) {
                best = Some((area, (x0, y0, x1, y1)));
            }
        }
    }
    best.map(|(_, b)| b)
}
