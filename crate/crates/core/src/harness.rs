//! Training loop, evaluation pipeline, ablations and threshold sweeps.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::Sample;
use crate::error::{LctrError, Result};
use crate::localization::{
    self, boxes_csv, extract_box, extract_m_cdm, fuse_and_upsample, BBox, BoxRecord, GroundTruth,
    LocPrediction, MetricsReport,
};
use crate::model::{LctrModel, Prediction};
use crate::optim::AdamW;
use crate::rpam;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

/// Averaged loss and gradients of a minibatch, written into the model's
/// parameter grads. Returns `(mean loss, correct count)`.
pub fn accumulate_batch(model: &mut LctrModel, batch: &[&Sample]) -> Result<(f64, usize)> {
    model.store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut total: Vec<Vec<f64>> = model.store.iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut loss = 0.0;
    let mut correct = 0;
    for s in batch {
        let g = model.sample_grad(&s.image, s.label)?;
        if !g.loss.is_finite() {
            return Err(LctrError::Divergence(format!("non-finite sample loss {}", g.loss)));
        }
        loss += g.loss;
        correct += g.correct as usize;
        for (acc, sg) in total.iter_mut().zip(&g.grads) {
            acc.iter_mut().zip(sg).for_each(|(a, b)| *a += b);
        }
    }
    for (p, g) in model.store.params_mut().iter_mut().zip(total) {
        let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
        p.tensor.accumulate_grad(&scaled);
    }
    Ok((loss * scale, correct))
}

/// Minibatch AdamW on `−log p`. Shuffling is seeded from `config.seed`.
pub fn train(config: &RunConfig, samples: &[Sample]) -> Result<(LctrModel, Vec<EpochLog>)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(LctrError::Usage("training set is empty".into()));
    }
    let mut model = LctrModel::new(config.model_config(), config.seed)?;
    let mut opt = AdamW::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7a1f));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, c) = accumulate_batch(&mut model, &batch)?;
            if !loss.is_finite() {
                return Err(LctrError::Divergence(format!("epoch {epoch}: loss {loss}")));
            }
            opt.step(&mut model.store)?;
            loss_sum += loss * batch.len() as f64;
            correct += c;
        }
        let log = EpochLog {
            epoch,
            loss: loss_sum / samples.len() as f64,
            train_acc: correct as f64 / samples.len() as f64,
        };
        info!(
            "epoch {:>3}  loss {:.5}  train_acc {:.4}",
            log.epoch, log.loss, log.train_acc
        );
        logs.push(log);
    }
    model.store.zero_grad();
    Ok((model, logs))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub rpam_enabled: bool,
    pub threshold_ratio: f64,
}

impl EvalOptions {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            rpam_enabled: c.rpam_enabled,
            threshold_ratio: c.threshold_ratio,
        }
    }
}

/// Localization heatmap (`H×W`, normalized) for one class channel.
pub fn class_heatmap(
    model: &LctrModel,
    pred: &Prediction,
    class_id: usize,
    rpam_enabled: bool,
) -> Result<Tensor> {
    let cfg = &model.config.backbone;
    let g = cfg.grid();
    let m_cdm = extract_m_cdm(&pred.class_maps, class_id)?;
    let m_rpam = if rpam_enabled {
        rpam::build_patch_relation_map(&pred.record, g, g)?.map
    } else {
        Tensor::full(&[g, g], 1.0)
    };
    fuse_and_upsample(&m_cdm, &m_rpam, cfg.image_size, cfg.image_size)
}

#[derive(Clone, Debug)]
pub struct SampleResult {
    pub probs: Tensor,
    pub ranked: Vec<usize>,
    pub pred_box: BBox,
    pub gt_class_box: BBox,
    pub empty_foreground: bool,
    /// Heatmap of the predicted class.
    pub heatmap: Tensor,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub samples: Vec<SampleResult>,
}

pub fn evaluate_sample(model: &LctrModel, sample: &Sample, opts: EvalOptions) -> Result<SampleResult> {
    let pred = model.predict(&sample.image)?;
    let ranked = pred.ranked();
    let top1 = ranked[0];
    let heatmap = class_heatmap(model, &pred, top1, opts.rpam_enabled)?;
    let pred_ext = extract_box(&heatmap, opts.threshold_ratio)?;
    let gt_ext = if sample.label == top1 {
        pred_ext
    } else {
        let h = class_heatmap(model, &pred, sample.label, opts.rpam_enabled)?;
        extract_box(&h, opts.threshold_ratio)?
    };
    Ok(SampleResult {
        probs: pred.probs,
        ranked,
        pred_box: pred_ext.bbox,
        gt_class_box: gt_ext.bbox,
        empty_foreground: gt_ext.empty_foreground,
        heatmap,
    })
}

pub fn evaluate_model(model: &LctrModel, test: &[Sample], opts: EvalOptions) -> Result<EvalOutput> {
    let samples = test
        .iter()
        .map(|s| evaluate_sample(model, s, opts))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<LocPrediction> = samples
        .iter()
        .map(|r| LocPrediction {
            ranked: r.ranked.clone(),
            gt_class_box: r.gt_class_box,
        })
        .collect();
    let gts: Vec<GroundTruth> = test
        .iter()
        .map(|s| GroundTruth {
            label: s.label,
            bbox: s.gt_box,
        })
        .collect();
    let report = localization::evaluate(&preds, &gts)?;
    Ok(EvalOutput { report, samples })
}

/// Evaluates and writes `metrics.txt`, `metrics.json`, `boxes.csv` and one
/// `heatmap_<id>.pgm` per test image into `out_dir`.
pub fn run_eval(
    model: &LctrModel,
    test: &[Sample],
    opts: EvalOptions,
    out_dir: &Path,
) -> Result<EvalOutput> {
    let out = evaluate_model(model, test, opts)?;
    std::fs::create_dir_all(out_dir)?;
    let records: Vec<BoxRecord> = out
        .samples
        .iter()
        .enumerate()
        .map(|(id, r)| BoxRecord {
            image_id: id,
            bbox: r.pred_box,
            score: r.probs.data()[r.ranked[0]],
        })
        .collect();
    std::fs::write(out_dir.join("boxes.csv"), boxes_csv(&records))?;
    for (id, r) in out.samples.iter().enumerate() {
        localization::write_pgm(&r.heatmap, &out_dir.join(format!("heatmap_{id}.pgm")))?;
    }
    out.report.write(out_dir)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub rpam_enabled: bool,
    pub cdm_enabled: bool,
    pub report: MetricsReport,
}

impl AblationRow {
    pub fn label(&self) -> &'static str {
        match (self.rpam_enabled, self.cdm_enabled) {
            (false, false) => "baseline",
            (true, false) => "rpam",
            (false, true) => "cdm",
            (true, true) => "rpam+cdm",
        }
    }
}

/// Trains a baseline-head model and a CDM model, and evaluates each with
/// RPAM off and on. Rows come out in the order baseline, rpam, cdm, full.
pub fn ablate(config: &RunConfig, train_set: &[Sample], test_set: &[Sample]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4);
    for cdm_enabled in [false, true] {
        let cfg = RunConfig {
            cdm_enabled,
            ..config.clone()
        };
        let (model, _) = train(&cfg, train_set)?;
        for rpam_enabled in [false, true] {
            let opts = EvalOptions {
                rpam_enabled,
                threshold_ratio: config.threshold_ratio,
            };
            rows.push(AblationRow {
                rpam_enabled,
                cdm_enabled,
                report: evaluate_model(&model, test_set, opts)?.report,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,rpam,cdm,top1_cls,top5_cls,top1_loc,top5_loc,gt_known\n");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.label(),
            r.rpam_enabled,
            r.cdm_enabled,
            m.top1_cls,
            m.top5_cls,
            m.top1_loc,
            m.top5_loc,
            m.gt_known
        );
    }
    s
}

/// Ratios `0.05, 0.10, …, 0.90`.
pub fn default_sweep_ratios() -> Vec<f64> {
    (1..=18).map(|k| k as f64 * 0.05).collect()
}

/// Gt-known accuracy for each binarization ratio.
pub fn sweep_threshold(
    model: &LctrModel,
    test: &[Sample],
    rpam_enabled: bool,
    ratios: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let heatmaps = test
        .iter()
        .map(|s| {
            let pred = model.predict(&s.image)?;
            class_heatmap(model, &pred, s.label, rpam_enabled)
        })
        .collect::<Result<Vec<_>>>()?;
    ratios
        .iter()
        .map(|&r| {
            let mut hits = 0;
            for (h, s) in heatmaps.iter().zip(test) {
                let b = extract_box(h, r)?.bbox;
                hits += (localization::iou(&b, &s.gt_box) > localization::IOU_THRESHOLD) as usize;
            }
            Ok((r, hits as f64 / test.len().max(1) as f64))
        })
        .collect()
}

pub fn sweep_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("ratio,gt_known\n");
    for (r, g) in curve {
        let _ = writeln!(s, "{r:.2},{g:.6}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_split;
    use crate::vit::BackboneConfig;

    fn tiny_config() -> RunConfig {
        RunConfig {
            backbone: BackboneConfig {
                image_size: 32,
                patch_size: 8,
                embed_dim: 8,
                num_heads: 2,
                num_blocks: 1,
                mlp_ratio: 2.0,
                num_classes: 3,
            },
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn small_lr_step_decreases_batch_loss() {
        let cfg = RunConfig {
            optimizer: crate::optim::AdamWConfig {
                lr: 1e-4,
                ..Default::default()
            },
            ..tiny_config()
        };
        let data = generate_split(6, 32, 3, 5).unwrap();
        let batch: Vec<&Sample> = data.iter().collect();
        let mut model = LctrModel::new(cfg.model_config(), 3).unwrap();
        let mut opt = AdamW::new(cfg.optimizer);
        let (before, _) = accumulate_batch(&mut model, &batch).unwrap();
        opt.step(&mut model.store).unwrap();
        let (after, _) = accumulate_batch(&mut model, &batch).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = tiny_config();
        let data = generate_split(8, 32, 3, 6).unwrap();
        let (a, la) = train(&cfg, &data).unwrap();
        let (b, lb) = train(&cfg, &data).unwrap();
        assert_eq!(a.store.checksum(), b.store.checksum());
        assert_eq!(la, lb);
    }

    #[test]
    fn rpam_toggle_keeps_classification() {
        let cfg = tiny_config();
        let data = generate_split(6, 32, 3, 7).unwrap();
        let model = LctrModel::new(cfg.model_config(), 1).unwrap();
        let on = evaluate_model(&model, &data, EvalOptions { rpam_enabled: true, threshold_ratio: 0.35 }).unwrap();
        let off = evaluate_model(&model, &data, EvalOptions { rpam_enabled: false, threshold_ratio: 0.35 }).unwrap();
        assert_eq!(on.report.top1_cls, off.report.top1_cls);
        assert_eq!(on.report.top5_cls, off.report.top5_cls);
        assert!(on.report.is_consistent() && off.report.is_consistent());
    }

    #[test]
    fn rpam_off_heatmap_is_cdm_map_alone() {
        let cfg = tiny_config();
        let model = LctrModel::new(cfg.model_config(), 2).unwrap();
        let s = &generate_split(1, 32, 3, 8).unwrap()[0];
        let pred = model.predict(&s.image).unwrap();
        let h = class_heatmap(&model, &pred, 0, false).unwrap();
        let m = extract_m_cdm(&pred.class_maps, 0).unwrap();
        let direct = localization::normalize(&localization::bilinear_resize(&m, 32, 32).unwrap());
        assert_eq!(h, direct);
    }

    #[test]
    fn sweep_ratios_cover_range() {
        let r = default_sweep_ratios();
        assert_eq!(r.len(), 18);
        assert!((r[0] - 0.05).abs() < 1e-12 && (r[17] - 0.9).abs() < 1e-12);
        assert_eq!(sweep_csv(&[(0.05, 0.5)]), "ratio,gt_known\n0.05,0.500000\n");
    }
}
