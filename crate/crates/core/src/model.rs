//! Backbone plus classification head (CDM, or a plain 1×1 conv for the
//! ablation baseline).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::cdm::{self, CdmConfig, CdmParams, Classification};
use crate::error::{LctrError, Result};
use crate::init::kaiming_uniform;
use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::vit::{self, AttentionRecord, BackboneConfig, BackboneParams, Bindings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub cdm: CdmConfig,
    pub cdm_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let cdm = CdmConfig::new(backbone.num_classes, backbone.embed_dim);
        Self {
            backbone,
            cdm,
            cdm_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.cdm.validate()?;
        if self.cdm.num_classes != self.backbone.num_classes
            || self.cdm.embed_dim != self.backbone.embed_dim
        {
            return Err(LctrError::Config(
                "CDM classes/embed_dim must match the backbone".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Cdm(CdmParams),
    /// `D×C×1×1` kernel.
    Baseline { kernel: ParamId },
}

#[derive(Clone, Debug)]
pub struct LctrModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: BackboneParams,
    pub head: Head,
}

/// Everything a forward pass leaves on the tape.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub bindings: Bindings,
    /// `X_CDM`, `C×grid×grid`.
    pub class_maps: Var,
    pub classification: Classification,
    pub record: AttentionRecord,
    pub scores: Option<Var>,
}

/// Gradient-free inference result for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub probs: Tensor,
    pub class_maps: Tensor,
    pub record: AttentionRecord,
}

impl Prediction {
    pub fn top1(&self) -> usize {
        cdm::argmax(self.probs.data())
    }

    /// Class indices sorted by descending probability (stable on ties).
    pub fn ranked(&self) -> Vec<usize> {
        let p = self.probs.data();
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
        idx
    }
}

/// Loss, correctness and per-parameter gradients of one sample.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub loss: f64,
    pub correct: bool,
    pub grads: Vec<Vec<f64>>,
}

impl LctrModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = BackboneParams::init(&config.backbone, &mut store, &mut rng)?;
        let head = if config.cdm_enabled {
            Head::Cdm(CdmParams::init(&config.cdm, &mut store, &mut rng)?)
        } else {
            let (d, c) = (config.backbone.embed_dim, config.backbone.num_classes);
            Head::Baseline {
                kernel: store.add("head.conv1x1.weight", kaiming_uniform(&mut rng, &[d, c, 1, 1], d))?,
            }
        };
        Ok(Self {
            config,
            store,
            backbone,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Records a full forward pass. `label` adds the loss node; `track`
    /// enables gradient tracking on parameters.
    pub fn forward(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        label: Option<usize>,
        track: bool,
    ) -> Result<ForwardPass> {
        let cfg = &self.config.backbone;
        let bindings = Bindings::bind(tape, &self.store, track);
        let out = vit::forward(tape, image, cfg, &self.backbone, &bindings)?;
        let g = cfg.grid();
        let x_map = cdm::tokens_to_map(tape, out.patch_tokens, g, g)?;
        let (class_maps, scores) = match &self.head {
            Head::Cdm(params) => {
                let reversed = cdm::reversed_class_map_on_tape(tape, &out.attention, g, g)?;
                let o = cdm::cdm_forward(tape, x_map, reversed, params, &self.config.cdm, &bindings)?;
                (o.class_maps, Some(o.scores))
            }
            Head::Baseline { kernel } => (tape.conv2d(x_map, bindings.var(*kernel), 0)?, None),
        };
        let classification = cdm::classify(tape, class_maps, label)?;
        Ok(ForwardPass {
            bindings,
            class_maps,
            classification,
            record: out.record,
            scores,
        })
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, image, None, false)?;
        Ok(Prediction {
            probs: pass.classification.probs,
            class_maps: tape.value(pass.class_maps).clone(),
            record: pass.record,
        })
    }

    pub fn loss(&self, image: &Tensor, label: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, image, Some(label), false)?;
        Ok(tape.value(pass.classification.loss.expect("label given")).item())
    }

    pub fn sample_grad(&self, image: &Tensor, label: usize) -> Result<SampleGrad> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, image, Some(label), true)?;
        let loss = pass.classification.loss.expect("label given");
        tape.backward(loss)?;
        Ok(SampleGrad {
            loss: tape.value(loss).item(),
            correct: cdm::argmax(pass.classification.probs.data()) == label,
            grads: pass.bindings.gradients(&tape, &self.store),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let backbone = BackboneConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 2,
            mlp_ratio: 2.0,
            num_classes: 3,
        };
        ModelConfig {
            cdm: CdmConfig::new(3, 8),
            backbone,
            cdm_enabled: true,
        }
    }

    #[test]
    fn mismatched_head_config_rejected() {
        let mut cfg = tiny();
        cfg.cdm.num_classes = 4;
        assert!(LctrModel::new(cfg, 0).is_err());
    }

    #[test]
    fn baseline_head_shapes() {
        let mut cfg = tiny();
        cfg.cdm_enabled = false;
        let m = LctrModel::new(cfg, 0).unwrap();
        let p = m.predict(&Tensor::full(&[3, 16, 16], 0.5)).unwrap();
        assert_eq!(p.class_maps.shape(), &[3, 2, 2]);
        assert!((p.probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grads_reach_patch_projection() {
        let m = LctrModel::new(tiny(), 1).unwrap();
        let img = Tensor::from_fn(&[3, 16, 16], |i| ((i * 37) % 11) as f64 / 11.0);
        let g = m.sample_grad(&img, 1).unwrap();
        let norm: f64 = g.grads[m.backbone.patch_w.0].iter().map(|v| v * v).sum();
        assert!(norm > 0.0);
        assert_eq!(g.grads.len(), m.store.len());
    }

    #[test]
    fn ranked_is_descending() {
        let p = Prediction {
            probs: Tensor::new(&[4], vec![0.1, 0.5, 0.1, 0.3]).unwrap(),
            class_maps: Tensor::zeros(&[4, 1, 1]),
            record: AttentionRecord::from_averaged(vec![Tensor::full(&[2, 2], 0.5)]).unwrap(),
        };
        assert_eq!(p.ranked(), vec![1, 3, 0, 2]);
        assert_eq!(p.top1(), 1);
    }
}
