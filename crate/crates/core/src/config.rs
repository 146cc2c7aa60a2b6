//! Run configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use crate::cdm::CdmConfig;
use crate::error::{LctrError, Result};
use crate::localization::DEFAULT_THRESHOLD_RATIO;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::vit::BackboneConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub num_kernel_groups: usize,
    pub kernel_size: usize,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub threshold_ratio: f64,
    pub rpam_enabled: bool,
    pub cdm_enabled: bool,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            num_kernel_groups: 4,
            kernel_size: 3,
            optimizer: AdamWConfig::default(),
            epochs: 30,
            batch_size: 32,
            seed: 0,
            threshold_ratio: DEFAULT_THRESHOLD_RATIO,
            rpam_enabled: true,
            cdm_enabled: true,
            n_train: 2000,
            n_test: 500,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(LctrError::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| LctrError::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            cdm: CdmConfig {
                num_kernel_groups: self.num_kernel_groups,
                kernel_size: (self.kernel_size, self.kernel_size),
                num_classes: self.backbone.num_classes,
                embed_dim: self.backbone.embed_dim,
            },
            cdm_enabled: self.cdm_enabled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let o = &self.optimizer;
        let positive = [
            ("lr", o.lr),
            ("eps", o.eps),
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(LctrError::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(LctrError::Config("betas must lie in [0,1)".into()));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(LctrError::Config("weight_decay must be ≥ 0".into()));
        }
        if !(self.threshold_ratio > 0.0 && self.threshold_ratio < 1.0) {
            return Err(LctrError::Config(format!(
                "threshold_ratio must lie in (0,1), got {}",
                self.threshold_ratio
            )));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let b = &mut self.backbone;
        match key {
            "image_size" => b.image_size = parse_num(key, v)?,
            "patch_size" => b.patch_size = parse_num(key, v)?,
            "embed_dim" => b.embed_dim = parse_num(key, v)?,
            "num_heads" => b.num_heads = parse_num(key, v)?,
            "num_blocks" => b.num_blocks = parse_num(key, v)?,
            "mlp_ratio" => b.mlp_ratio = parse_num(key, v)?,
            "num_classes" => b.num_classes = parse_num(key, v)?,
            "num_kernel_groups" => self.num_kernel_groups = parse_num(key, v)?,
            "kernel_size" => self.kernel_size = parse_num(key, v)?,
            "lr" => self.optimizer.lr = parse_num(key, v)?,
            "beta1" => self.optimizer.beta1 = parse_num(key, v)?,
            "beta2" => self.optimizer.beta2 = parse_num(key, v)?,
            "eps" => self.optimizer.eps = parse_num(key, v)?,
            "weight_decay" => self.optimizer.weight_decay = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "threshold_ratio" => self.threshold_ratio = parse_num(key, v)?,
            "rpam_enabled" => self.rpam_enabled = parse_bool(key, v)?,
            "cdm_enabled" => self.cdm_enabled = parse_bool(key, v)?,
            "n_train" => self.n_train = parse_num(key, v)?,
            "n_test" => self.n_test = parse_num(key, v)?,
            _ => return Err(LctrError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                LctrError::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let b = &self.backbone;
        let o = &self.optimizer;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", b.image_size.to_string());
        kv("patch_size", b.patch_size.to_string());
        kv("embed_dim", b.embed_dim.to_string());
        kv("num_heads", b.num_heads.to_string());
        kv("num_blocks", b.num_blocks.to_string());
        kv("mlp_ratio", b.mlp_ratio.to_string());
        kv("num_classes", b.num_classes.to_string());
        kv("num_kernel_groups", self.num_kernel_groups.to_string());
        kv("kernel_size", self.kernel_size.to_string());
        kv("lr", o.lr.to_string());
        kv("beta1", o.beta1.to_string());
        kv("beta2", o.beta2.to_string());
        kv("eps", o.eps.to_string());
        kv("weight_decay", o.weight_decay.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("threshold_ratio", self.threshold_ratio.to_string());
        kv("rpam_enabled", self.rpam_enabled.to_string());
        kv("cdm_enabled", self.cdm_enabled.to_string());
        kv("n_train", self.n_train.to_string());
        kv("n_test", self.n_test.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_toy_setup() {
        let c = RunConfig::default();
        assert_eq!(c.backbone.grid(), 4);
        assert_eq!(c.optimizer.beta2, 0.99);
        assert_eq!(c.optimizer.eps, 1e-8);
        assert_eq!(c.optimizer.weight_decay, 5e-4);
        assert_eq!(c.num_kernel_groups, 4);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.seed = 17;
        c.cdm_enabled = false;
        c.optimizer.lr = 3.5e-4;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_errors() {
        let c = RunConfig::parse("# toy\nepochs = 3 # short\n\nrpam_enabled = off\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert!(!c.rpam_enabled);
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("epochs 3").is_err());
        assert!(RunConfig::parse("epochs = 0").is_err());
        assert!(RunConfig::parse("patch_size = 5").is_err());
    }
}
