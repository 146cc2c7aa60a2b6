//! Miniature vision transformer: patch embedding, pre-norm blocks and the
//! per-block attention record consumed by the localization heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, LctrError, Result};
use crate::init::trunc_normal;
use crate::kernels;
use crate::tensor::{ParamId, ParamStore, Tensor};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;
/// Pixel normalization applied before patch projection: `(v − mean) / std`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 32,
            num_heads: 4,
            num_blocks: 4,
            mlp_ratio: 4.0,
            num_classes: 5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LctrError::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.embed_dim == 0 {
            return bad("image_size, patch_size and embed_dim must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return bad(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        Ok(())
    }

    /// Patch-grid side length (`w = h = H / P`).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl BackboneParams {
    /// Registers freshly initialized backbone parameters under `backbone.*`.
    pub fn init<R: Rng>(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let hidden = cfg.hidden_dim();
        let mut tn = |shape: &[usize]| trunc_normal(rng, shape, INIT_STD);
        let patch_w = store.add("backbone.patch.weight", tn(&[cfg.patch_dim(), d]))?;
        let patch_b = store.add("backbone.patch.bias", Tensor::zeros(&[d]))?;
        let cls_token = store.add("backbone.cls_token", tn(&[1, d]))?;
        let pos_embed = store.add("backbone.pos_embed", tn(&[cfg.num_tokens(), d]))?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for l in 0..cfg.num_blocks {
            let p = |s: &str| format!("backbone.blocks.{l}.{s}");
            blocks.push(BlockParams {
                ln1_gain: store.add(p("norm1.gain"), Tensor::full(&[d], 1.0))?,
                ln1_bias: store.add(p("norm1.bias"), Tensor::zeros(&[d]))?,
                q_w: store.add(p("attn.q.weight"), tn(&[d, d]))?,
                q_b: store.add(p("attn.q.bias"), Tensor::zeros(&[d]))?,
                k_w: store.add(p("attn.k.weight"), tn(&[d, d]))?,
                k_b: store.add(p("attn.k.bias"), Tensor::zeros(&[d]))?,
                v_w: store.add(p("attn.v.weight"), tn(&[d, d]))?,
                v_b: store.add(p("attn.v.bias"), Tensor::zeros(&[d]))?,
                proj_w: store.add(p("attn.proj.weight"), tn(&[d, d]))?,
                proj_b: store.add(p("attn.proj.bias"), Tensor::zeros(&[d]))?,
                ln2_gain: store.add(p("norm2.gain"), Tensor::full(&[d], 1.0))?,
                ln2_bias: store.add(p("norm2.bias"), Tensor::zeros(&[d]))?,
                fc1_w: store.add(p("mlp.fc1.weight"), tn(&[d, hidden]))?,
                fc1_b: store.add(p("mlp.fc1.bias"), Tensor::zeros(&[hidden]))?,
                fc2_w: store.add(p("mlp.fc2.weight"), tn(&[hidden, d]))?,
                fc2_b: store.add(p("mlp.fc2.bias"), Tensor::zeros(&[d]))?,
            });
        }
        Ok(Self {
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
        })
    }
}

/// Tape handles for every parameter of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    /// Copies every parameter onto `tape`; `track` controls gradient tracking.
    pub fn bind(tape: &mut Tape, store: &ParamStore, track: bool) -> Self {
        let vars = store
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.grad = None;
                t.requires_grad = track;
                tape.leaf(t)
            })
            .collect();
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Adds `scale ×` each tape gradient into the matching parameter's grad.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore, scale: f64) {
        for (i, &v) in self.0.iter().enumerate() {
            let p = &mut store.params_mut()[i].tensor;
            match tape.grad(v) {
                Some(g) => {
                    let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
                    p.accumulate_grad(&scaled);
                }
                None => p.accumulate_grad(&vec![0.0; p.numel()]),
            }
        }
    }

    /// Per-parameter gradients from `tape`, zero-filled where absent.
    pub fn gradients(&self, tape: &Tape, store: &ParamStore) -> Vec<Vec<f64>> {
        self.0
            .iter()
            .zip(store.iter())
            .map(|(&v, p)| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect()
    }
}

/// Token matrix on a tape; row 0 is the class token, rows `1..=N` are patch
/// tokens in row-major grid order.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
}

impl TokenSequence {
    pub const CLASS_INDEX: usize = 0;
}

/// Attention maps of every block of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// `A_l`, each `S×(N+1)×(N+1)`.
    pub per_block: Vec<Tensor>,
    /// Head means `A'_l`, each `(N+1)×(N+1)`.
    pub averaged: Vec<Tensor>,
}

impl AttentionRecord {
    pub fn from_blocks(per_block: Vec<Tensor>) -> Result<Self> {
        let averaged = per_block
            .iter()
            .map(kernels::mean_axis0)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            per_block,
            averaged,
        })
    }

    /// Builds a record directly from head-averaged maps (single head each).
    pub fn from_averaged(averaged: Vec<Tensor>) -> Result<Self> {
        let per_block = averaged
            .iter()
            .map(|a| {
                let mut shape = vec![1];
                shape.extend_from_slice(a.shape());
                a.reshaped(&shape)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(per_block)
    }

    pub fn num_blocks(&self) -> usize {
        self.per_block.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.averaged.first().map_or(0, |a| a.shape()[0])
    }

    /// Largest deviation of any head row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in &self.per_block {
            let t = *a.shape().last().unwrap();
            for row in a.data().chunks(t) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        worst
    }
}

/// Splits a `3×H×W` image into row-major `P×P` patches flattened in
/// `(channel, dy, dx)` order, normalizing pixels with [`PIXEL_MEAN`] and
/// [`PIXEL_STD`].
pub fn patchify(image: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    cfg.validate()?;
    let s = cfg.image_size;
    if image.shape() != [3, s, s] {
        return dim_err(format!(
            "image shape {:?} does not match configured 3×{s}×{s}",
            image.shape()
        ));
    }
    let (p, g) = (cfg.patch_size, cfg.grid());
    let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..g {
        for px in 0..g {
            for c in 0..3 {
                for dy in 0..p {
                    let row = (c * s + py * p + dy) * s + px * p;
                    data.extend(image.data()[row..row + p].iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
                }
            }
        }
    }
    Tensor::new(&[cfg.num_patches(), cfg.patch_dim()], data)
}

/// `[x_cls; F(x_p¹); …; F(x_pᴺ)] + pos`.
pub fn embed(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &BackboneConfig,
    params: &BackboneParams,
    vars: &Bindings,
) -> Result<TokenSequence> {
    let patches = tape.constant(patchify(image, cfg)?);
    let proj = tape.matmul(patches, vars.var(params.patch_w))?;
    let proj = tape.add_bias(proj, vars.var(params.patch_b))?;
    let seq = tape.concat_axis0(vars.var(params.cls_token), proj)?;
    let tokens = tape.add(seq, vars.var(params.pos_embed))?;
    Ok(TokenSequence { tokens })
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Pre-norm block. Returns the new sequence and the post-softmax attention
/// `A_l` (`S×T×T`) computed from this block's input.
pub fn block_forward(
    tape: &mut Tape,
    x: TokenSequence,
    cfg: &BackboneConfig,
    bp: &BlockParams,
    vars: &Bindings,
) -> Result<(TokenSequence, Var)> {
    let v = |id| vars.var(id);
    let h = tape.layer_norm(x.tokens, v(bp.ln1_gain), v(bp.ln1_bias), LN_EPS)?;
    let q = linear(tape, h, v(bp.q_w), v(bp.q_b))?;
    let k = linear(tape, h, v(bp.k_w), v(bp.k_b))?;
    let val = linear(tape, h, v(bp.v_w), v(bp.v_b))?;
    let q = tape.split_heads(q, cfg.num_heads)?;
    let k = tape.split_heads(k, cfg.num_heads)?;
    let val = tape.split_heads(val, cfg.num_heads)?;
    let kt = tape.transpose(k)?;
    let scores = tape.batch_matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (cfg.head_dim() as f64).sqrt());
    let attn = tape.softmax(scores, 2)?;
    let ctx = tape.batch_matmul(attn, val)?;
    let ctx = tape.merge_heads(ctx)?;
    let out = linear(tape, ctx, v(bp.proj_w), v(bp.proj_b))?;
    let x1 = tape.add(x.tokens, out)?;
    let h2 = tape.layer_norm(x1, v(bp.ln2_gain), v(bp.ln2_bias), LN_EPS)?;
    let m = linear(tape, h2, v(bp.fc1_w), v(bp.fc1_b))?;
    let m = tape.gelu(m);
    let m = linear(tape, m, v(bp.fc2_w), v(bp.fc2_b))?;
    let x2 = tape.add(x1, m)?;
    Ok((TokenSequence { tokens: x2 }, attn))
}

/// Result of a backbone pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// `X_L` as `N×D` (class-token row removed).
    pub patch_tokens: Var,
    /// Final sequence including the class token.
    pub sequence: TokenSequence,
    /// Tape handles of each block's `A_l`.
    pub attention: Vec<Var>,
    pub record: AttentionRecord,
}

pub fn forward(
    tape: &mut Tape,
    image: &Tensor,
    cfg: &BackboneConfig,
    params: &BackboneParams,
    vars: &Bindings,
) -> Result<BackboneOutput> {
    let mut seq = embed(tape, image, cfg, params, vars)?;
    let mut attention = Vec::with_capacity(params.blocks.len());
    for bp in &params.blocks {
        let (next, a) = block_forward(tape, seq, cfg, bp, vars)?;
        seq = next;
        attention.push(a);
    }
    let patch_tokens = tape.slice_axis0(seq.tokens, 1, cfg.num_tokens())?;
    let record =
        AttentionRecord::from_blocks(attention.iter().map(|&a| tape.value(a).clone()).collect())?;
    Ok(BackboneOutput {
        patch_tokens,
        sequence: seq,
        attention,
        record,
    })
}
