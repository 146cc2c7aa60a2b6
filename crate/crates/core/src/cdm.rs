//! Cue digging module.
//!
//! The class-token attention is averaged over blocks, normalized and
//! reversed, so strongly attended patches are suppressed. The suppressed
//! features go through a 3×3 convolution whose GAP and GMP summaries score
//! `G` kernel groups. The class maps are `X_L` convolved with the
//! score-weighted kernel sum `Σ_g S_g W_g`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, LctrError, Result};
use crate::init::{kaiming_uniform, trunc_normal};
use crate::kernels;
use crate::rpam;
use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::vit::{AttentionRecord, Bindings};

const ERASE_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdmConfig {
    pub num_kernel_groups: usize,
    pub kernel_size: (usize, usize),
    pub num_classes: usize,
    pub embed_dim: usize,
}

impl CdmConfig {
    pub fn new(num_classes: usize, embed_dim: usize) -> Self {
        Self {
            num_kernel_groups: 4,
            kernel_size: (3, 3),
            num_classes,
            embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel_size;
        if self.num_kernel_groups == 0 {
            return Err(LctrError::Config("num_kernel_groups must be ≥ 1".into()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(LctrError::Config(format!(
                "kernel extents must be odd, got {kh}×{kw}"
            )));
        }
        if kh != kw {
            return Err(LctrError::Config(format!(
                "only square kernels are supported, got {kh}×{kw}"
            )));
        }
        if self.num_classes < 2 || self.embed_dim == 0 {
            return Err(LctrError::Config("need ≥2 classes and a positive embed_dim".into()));
        }
        Ok(())
    }

    /// Closed-form number of scalars in [`CdmParams`].
    pub fn param_count(&self) -> usize {
        let (d, g, c) = (self.embed_dim, self.num_kernel_groups, self.num_classes);
        let (kh, kw) = self.kernel_size;
        let erase = d * d * ERASE_KERNEL * ERASE_KERNEL + d;
        let heads = 2 * (d * g + g);
        erase + heads + g * d * c * kh * kw
    }

    fn padding(&self) -> usize {
        self.kernel_size.0 / 2
    }
}

#[derive(Clone, Debug)]
pub struct CdmParams {
    pub erase_w: ParamId,
    pub erase_b: ParamId,
    pub fc_gap_w: ParamId,
    pub fc_gap_b: ParamId,
    pub fc_gmp_w: ParamId,
    pub fc_gmp_b: ParamId,
    /// `G×D×C×kh×kw`.
    pub group_kernels: ParamId,
}

impl CdmParams {
    pub fn init<R: Rng>(cfg: &CdmConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, g, c) = (cfg.embed_dim, cfg.num_kernel_groups, cfg.num_classes);
        let (kh, kw) = cfg.kernel_size;
        let ek = ERASE_KERNEL;
        Ok(Self {
            erase_w: store.add(
                "cdm.erase_conv.weight",
                kaiming_uniform(rng, &[d, d, ek, ek], d * ek * ek),
            )?,
            erase_b: store.add("cdm.erase_conv.bias", Tensor::zeros(&[d]))?,
            fc_gap_w: store.add("cdm.fc_gap.weight", trunc_normal(rng, &[d, g], 0.02))?,
            fc_gap_b: store.add("cdm.fc_gap.bias", Tensor::zeros(&[g]))?,
            fc_gmp_w: store.add("cdm.fc_gmp.weight", trunc_normal(rng, &[d, g], 0.02))?,
            fc_gmp_b: store.add("cdm.fc_gmp.bias", Tensor::zeros(&[g]))?,
            group_kernels: store.add(
                "cdm.group_kernels",
                kaiming_uniform(rng, &[g, d, c, kh, kw], d * kh * kw),
            )?,
        })
    }
}

/// Min-max normalizes to `[0,1]` (constant input → zeros) and returns `1 − x`.
fn reverse_normalized(map: &[f64]) -> Vec<f64> {
    let (lo, hi) = kernels::argmin_argmax(map);
    let (lo, hi) = (map[lo], map[hi]);
    let range = hi - lo;
    map.iter()
        .map(|v| {
            let n = if range > 0.0 { (v - lo) / range } else { 0.0 };
            -n + 1.0
        })
        .collect()
}

/// Reversed block-mean class-token map over the patch grid.
pub fn reversed_class_map(attn: &AttentionRecord, grid_h: usize, grid_w: usize) -> Result<Tensor> {
    let n = grid_h * grid_w;
    if attn.averaged.is_empty() || attn.num_tokens() != n + 1 {
        return dim_err(format!(
            "attention record with {} tokens does not fit a {grid_h}×{grid_w} grid",
            attn.num_tokens()
        ));
    }
    let mut acc = vec![0.0; n];
    for a in &attn.averaged {
        let c = rpam::class_token_vector(a)?;
        acc.iter_mut().zip(&c.data()[1..]).for_each(|(s, v)| *s += v);
    }
    let inv = 1.0 / attn.averaged.len() as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&[grid_h, grid_w], reverse_normalized(&acc))
}

/// Tape version of [`reversed_class_map`] so the erase branch is
/// differentiable with respect to the attention maps.
pub fn reversed_class_map_on_tape(
    tape: &mut Tape,
    attention: &[Var],
    grid_h: usize,
    grid_w: usize,
) -> Result<Var> {
    let n = grid_h * grid_w;
    let mut acc: Option<Var> = None;
    for &a in attention {
        let t = tape.shape(a)[1];
        if t != n + 1 {
            return dim_err(format!("attention with {t} tokens does not fit {grid_h}×{grid_w}"));
        }
        let mean = tape.mean_axis0(a)?;
        let row = tape.slice_axis0(mean, 0, 1)?;
        let row = tape.reshape(row, &[t])?;
        let patches = tape.slice_axis0(row, 1, t)?;
        acc = Some(match acc {
            Some(s) => tape.add(s, patches)?,
            None => patches,
        });
    }
    let acc = acc.ok_or_else(|| LctrError::Dimension("no attention blocks".into()))?;
    let mean = tape.scale(acc, 1.0 / attention.len() as f64);
    let grid = tape.reshape(mean, &[grid_h, grid_w])?;
    let norm = tape.minmax_normalize(grid);
    Ok(tape.affine(norm, -1.0, 1.0))
}

/// `X_L` (`N×D`) as a `D×grid_h×grid_w` feature map.
pub fn tokens_to_map(tape: &mut Tape, patch_tokens: Var, grid_h: usize, grid_w: usize) -> Result<Var> {
    let d = tape.shape(patch_tokens)[1];
    let t = tape.transpose(patch_tokens)?;
    tape.reshape(t, &[d, grid_h, grid_w])
}

fn fc(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let d = tape.shape(x)[0];
    let x = tape.reshape(x, &[1, d])?;
    let y = tape.matmul(x, w)?;
    let y = tape.add_bias(y, b)?;
    let g = tape.shape(y)[1];
    tape.reshape(y, &[g])
}

/// Group scores `S ∈ (0,1)^G` from the erased feature map.
pub fn score_groups(
    tape: &mut Tape,
    x_map: Var,
    reversed: Var,
    params: &CdmParams,
    vars: &Bindings,
) -> Result<Var> {
    let erased = tape.spatial_mul(x_map, reversed)?;
    let conv = tape.conv2d(erased, vars.var(params.erase_w), ERASE_KERNEL / 2)?;
    let xt = tape.add_channel_bias(conv, vars.var(params.erase_b))?;
    let gap = tape.global_avg_pool(xt)?;
    let gmp = tape.global_max_pool(xt)?;
    let a = fc(tape, gap, vars.var(params.fc_gap_w), vars.var(params.fc_gap_b))?;
    let b = fc(tape, gmp, vars.var(params.fc_gmp_w), vars.var(params.fc_gmp_b))?;
    let s = tape.add(a, b)?;
    Ok(tape.sigmoid(s))
}

/// Output of [`cdm_forward`].
#[derive(Clone, Copy, Debug)]
pub struct CdmOutput {
    /// Class maps `C×grid_h×grid_w`.
    pub class_maps: Var,
    pub scores: Var,
}

/// `conv(X_L, Σ_g S_g W_g)` with same padding.
pub fn cdm_forward(
    tape: &mut Tape,
    x_map: Var,
    reversed: Var,
    params: &CdmParams,
    cfg: &CdmConfig,
    vars: &Bindings,
) -> Result<CdmOutput> {
    let scores = score_groups(tape, x_map, reversed, params, vars)?;
    let class_maps = apply_group_kernels(tape, x_map, scores, vars.var(params.group_kernels), cfg)?;
    Ok(CdmOutput { class_maps, scores })
}

/// Convolution with the score-weighted kernel sum.
pub fn apply_group_kernels(
    tape: &mut Tape,
    x_map: Var,
    scores: Var,
    group_kernels: Var,
    cfg: &CdmConfig,
) -> Result<Var> {
    let w_eff = tape.weighted_sum(scores, group_kernels)?;
    tape.conv2d(x_map, w_eff, cfg.padding())
}

/// GAP logits, softmax probabilities and (optionally) the `−log p_y` loss.
#[derive(Clone, Debug)]
pub struct Classification {
    pub logits: Var,
    pub probs: Tensor,
    pub loss: Option<Var>,
}

pub fn classify(tape: &mut Tape, class_maps: Var, label: Option<usize>) -> Result<Classification> {
    let logits = tape.global_avg_pool(class_maps)?;
    if tape.value(logits).numel() < 2 {
        return Err(LctrError::Config("classification needs at least 2 classes".into()));
    }
    let probs = kernels::softmax(tape.value(logits), 0)?;
    let loss = label.map(|y| tape.cross_entropy(logits, y)).transpose()?;
    Ok(Classification { logits, probs, loss })
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    kernels::argmin_argmax(values).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(g: usize) -> (CdmConfig, ParamStore, CdmParams) {
        let cfg = CdmConfig {
            num_kernel_groups: g,
            ..CdmConfig::new(3, 4)
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = CdmParams::init(&cfg, &mut store, &mut rng).unwrap();
        (cfg, store, params)
    }

    fn rand_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_rejects_even_kernels() {
        let mut cfg = CdmConfig::new(3, 4);
        cfg.kernel_size = (2, 2);
        assert!(cfg.validate().is_err());
        cfg.kernel_size = (3, 3);
        cfg.num_kernel_groups = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_count_closed_form() {
        let (cfg, store, _) = setup(4);
        assert_eq!(store.count(), cfg.param_count());
        assert_eq!(cfg.param_count(), 4 * 4 * 9 + 4 + 2 * (4 * 4 + 4) + 4 * 4 * 3 * 9);
    }

    #[test]
    fn constant_attention_reverses_to_ones() {
        let rec = AttentionRecord::from_averaged(vec![Tensor::full(&[5, 5], 0.2)]).unwrap();
        let m = reversed_class_map(&rec, 2, 2).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn peak_and_floor_swap() {
        let mut a = Tensor::full(&[5, 5], 0.2);
        a.data_mut()[..5].copy_from_slice(&[0.2, 0.0, 0.8, 0.0, 0.0]);
        let rec = AttentionRecord::from_averaged(vec![a]).unwrap();
        let m = reversed_class_map(&rec, 2, 2).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_heads_give_half_scores() {
        let (_, mut store, params) = setup(4);
        for id in [params.fc_gap_w, params.fc_gap_b, params.fc_gmp_w, params.fc_gmp_b] {
            store.get_mut(id).tensor.data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let vars = Bindings::bind(&mut tape, &store, false);
        let x = tape.constant(rand_map(&mut rng, &[4, 3, 3]));
        let r = tape.constant(Tensor::full(&[3, 3], 1.0));
        let s = score_groups(&mut tape, x, r, &params, &vars).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn fully_erased_map_scores_from_bias_only() {
        let (_, mut store, params) = setup(2);
        store.get_mut(params.erase_b).tensor.data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores = |store: &ParamStore, x: Tensor| {
            let mut tape = Tape::new();
            let vars = Bindings::bind(&mut tape, store, false);
            let x = tape.constant(x);
            let r = tape.constant(Tensor::zeros(&[3, 3]));
            let s = score_groups(&mut tape, x, r, &params, &vars).unwrap();
            tape.value(s).clone()
        };
        let a = scores(&store, rand_map(&mut rng, &[4, 3, 3]));
        let b = scores(&store, rand_map(&mut rng, &[4, 3, 3]));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn single_group_with_unit_score_is_plain_conv() {
        let (cfg, store, params) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let vars = Bindings::bind(&mut tape, &store, false);
        let x = tape.constant(rand_map(&mut rng, &[4, 3, 3]));
        let one = tape.constant(Tensor::full(&[1], 1.0));
        let out = apply_group_kernels(&mut tape, x, one, vars.var(params.group_kernels), &cfg).unwrap();
        let k = store.get(params.group_kernels).tensor.reshaped(&[4, 3, 3, 3]).unwrap();
        let want = kernels::conv2d(tape.value(x), &k, 1).unwrap();
        assert_eq!(tape.value(out), &want);
    }

    #[test]
    fn classify_uniform_logits() {
        let mut tape = Tape::new();
        let maps = tape.constant(Tensor::full(&[4, 2, 2], 0.3));
        let c = classify(&mut tape, maps, Some(2)).unwrap();
        assert!(c.probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let loss = tape.value(c.loss.unwrap()).item();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let mut tape = Tape::new();
        let maps = tape.constant(Tensor::full(&[4, 2, 2], 0.3));
        assert!(matches!(classify(&mut tape, maps, Some(4)), Err(LctrError::Usage(_))));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }
}
