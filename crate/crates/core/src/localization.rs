//! Map fusion, upsampling, CAM-style box extraction and WSOL metrics.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LctrError, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Default CAM binarization ratio.
pub const DEFAULT_THRESHOLD_RATIO: f64 = 0.35;
/// A box counts as localized when IoU with the ground truth exceeds this.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationMaps {
    pub m_cdm: Tensor,
    pub m_rpam: Tensor,
    pub m_fuse: Tensor,
    /// `H×W`, min-max normalized.
    pub upsampled: Tensor,
}

impl LocalizationMaps {
    pub fn build(m_cdm: Tensor, m_rpam: Tensor, height: usize, width: usize) -> Result<Self> {
        let m_fuse = fuse(&m_cdm, &m_rpam)?;
        let upsampled = normalize(&bilinear_resize(&m_fuse, height, width)?);
        Ok(Self {
            m_cdm,
            m_rpam,
            m_fuse,
            upsampled,
        })
    }
}

/// Pixel box, half-open: `x0 ≤ x < x1`, `y0 ≤ y < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(LctrError::Format(format!(
                "degenerate box ({x0},{y0},{x1},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let iy = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Channel `class_id` of `C×h×w` class maps.
pub fn extract_m_cdm(class_maps: &Tensor, class_id: usize) -> Result<Tensor> {
    if class_maps.ndim() != 3 || class_id >= class_maps.shape()[0] {
        return dim_err(format!(
            "class {class_id} not available in maps of shape {:?}",
            class_maps.shape()
        ));
    }
    let (h, w) = (class_maps.shape()[1], class_maps.shape()[2]);
    let plane = h * w;
    Tensor::new(
        &[h, w],
        class_maps.data()[class_id * plane..(class_id + 1) * plane].to_vec(),
    )
}

/// Elementwise product of the two maps.
pub fn fuse(m_cdm: &Tensor, m_rpam: &Tensor) -> Result<Tensor> {
    if m_cdm.shape() != m_rpam.shape() {
        return dim_err(format!(
            "cannot fuse maps of shape {:?} and {:?}",
            m_cdm.shape(),
            m_rpam.shape()
        ));
    }
    let data = m_cdm.data().iter().zip(m_rpam.data()).map(|(a, b)| a * b).collect();
    Tensor::new(m_cdm.shape(), data)
}

/// Bilinear resize with half-pixel centers (align-corners off), edges clamped.
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if map.ndim() != 2 || out_h == 0 || out_w == 0 {
        return dim_err(format!(
            "cannot resize {:?} to {out_h}×{out_w}",
            map.shape()
        ));
    }
    let (in_h, in_w) = (map.shape()[0], map.shape()[1]);
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = coords(out_h, in_h);
    let xs = coords(out_w, in_w);
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, ly) in &ys {
        for &(x0, x1, lx) in &xs {
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let top = lerp(src[y0 * in_w + x0], src[y0 * in_w + x1], lx);
            let bot = lerp(src[y1 * in_w + x0], src[y1 * in_w + x1], lx);
            out.push(lerp(top, bot, ly));
        }
    }
    Tensor::new(&[out_h, out_w], out)
}

/// Min-max normalization to `[0,1]`; constant maps become all zeros.
pub fn normalize(map: &Tensor) -> Tensor {
    let (lo, hi) = kernels::argmin_argmax(map.data());
    let (lo, hi) = (map.data()[lo], map.data()[hi]);
    let range = hi - lo;
    if range > 0.0 {
        Tensor::from_fn(map.shape(), |i| (map.data()[i] - lo) / range)
    } else {
        Tensor::zeros(map.shape())
    }
}

/// Fuses, upsamples to `H×W` and normalizes.
pub fn fuse_and_upsample(m_cdm: &Tensor, m_rpam: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    Ok(normalize(&bilinear_resize(&fuse(m_cdm, m_rpam)?, height, width)?))
}

/// Result of [`extract_box`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxExtraction {
    pub bbox: BBox,
    /// Nothing exceeded the threshold; `bbox` is the whole image.
    pub empty_foreground: bool,
}

/// Binarizes `heatmap` at `ratio × max` (after min-max normalization) and
/// returns the tight box of the largest 8-connected foreground component.
/// Ties in area go to the component met first in a row-major scan.
pub fn extract_box(heatmap: &Tensor, ratio: f64) -> Result<BoxExtraction> {
    if heatmap.ndim() != 2 {
        return dim_err(format!("heatmap must be 2-d, got {:?}", heatmap.shape()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(LctrError::Config(format!(
            "threshold ratio must lie in (0,1), got {ratio}"
        )));
    }
    let (h, w) = (heatmap.shape()[0], heatmap.shape()[1]);
    let norm = normalize(heatmap);
    let max = norm.data().iter().cloned().fold(0.0, f64::max);
    let thr = ratio * max;
    let fg: Vec<bool> = norm.data().iter().map(|&v| v > thr).collect();
    let mut label = vec![0usize; h * w];
    let mut best: Option<(usize, BBox)> = None;
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !fg[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let (mut area, mut x0, mut y0, mut x1, mut y1) = (0, w, h, 0, 0);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if fg[q] && label[q] == 0 {
                        label[q] = next;
                        queue.push_back(q);
                    }
                }
            }
        }
        if best.is_none_or(|(a, _)| area > a) {
            best = Some((area, BBox { x0, y0, x1, y1 }));
        }
    }
    Ok(match best {
        Some((_, bbox)) => BoxExtraction {
            bbox,
            empty_foreground: false,
        },
        None => BoxExtraction {
            bbox: BBox::full(w, h),
            empty_foreground: true,
        },
    })
}

/// Per-image inputs to [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct LocPrediction {
    /// Class indices by descending probability.
    pub ranked: Vec<usize>,
    /// Box from the ground-truth class channel.
    pub gt_class_box: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub label: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1_cls: f64,
    pub top5_cls: f64,
    pub top1_loc: f64,
    pub top5_loc: f64,
    pub gt_known: f64,
    pub n_samples: usize,
}

/// Per-sample correctness flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleVerdict {
    pub top1_cls: bool,
    pub top5_cls: bool,
    pub gt_known: bool,
}

impl SampleVerdict {
    pub fn top1_loc(&self) -> bool {
        self.top1_cls && self.gt_known
    }

    pub fn top5_loc(&self) -> bool {
        self.top5_cls && self.gt_known
    }
}

pub fn judge(pred: &LocPrediction, gt: &GroundTruth) -> SampleVerdict {
    SampleVerdict {
        top1_cls: pred.ranked.first() == Some(&gt.label),
        top5_cls: pred.ranked.iter().take(5).any(|&c| c == gt.label),
        gt_known: iou(&pred.gt_class_box, &gt.bbox) > IOU_THRESHOLD,
    }
}

pub fn evaluate(predictions: &[LocPrediction], ground_truth: &[GroundTruth]) -> Result<MetricsReport> {
    if predictions.len() != ground_truth.len() {
        return Err(LctrError::Usage(format!(
            "{} predictions for {} ground-truth samples",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let verdicts: Vec<SampleVerdict> = predictions
        .iter()
        .zip(ground_truth)
        .map(|(p, g)| judge(p, g))
        .collect();
    Ok(MetricsReport::from_verdicts(&verdicts))
}

impl MetricsReport {
    pub fn from_verdicts(verdicts: &[SampleVerdict]) -> Self {
        let n = verdicts.len();
        let frac = |f: &dyn Fn(&SampleVerdict) -> bool| {
            if n == 0 {
                0.0
            } else {
                verdicts.iter().filter(|v| f(v)).count() as f64 / n as f64
            }
        };
        Self {
            top1_cls: frac(&|v| v.top1_cls),
            top5_cls: frac(&|v| v.top5_cls),
            top1_loc: frac(&|v| v.top1_loc()),
            top5_loc: frac(&|v| v.top5_loc()),
            gt_known: frac(&|v| v.gt_known),
            n_samples: n,
        }
    }

    /// Ordering constraints every report must satisfy.
    pub fn is_consistent(&self) -> bool {
        self.top1_loc <= self.top1_cls.min(self.gt_known)
            && self.top1_loc <= self.top5_loc
            && self.top1_cls <= self.top5_cls
            && self.top5_loc <= self.top5_cls.min(self.gt_known)
    }

    /// Flat `key = value` text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_samples = {}", self.n_samples);
        for (k, v) in [
            ("top1_cls", self.top1_cls),
            ("top5_cls", self.top5_cls),
            ("top1_loc", self.top1_loc),
            ("top5_loc", self.top5_loc),
            ("gt_known", self.gt_known),
        ] {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes") + "\n"
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("metrics.txt"), self.to_text())?;
        std::fs::write(dir.join("metrics.json"), self.to_json())?;
        Ok(())
    }
}

/// 8-bit binary graymap (`P5`) with values scaled from `[0,1]`.
pub fn encode_pgm(heatmap: &Tensor) -> Result<Vec<u8>> {
    if heatmap.ndim() != 2 {
        return dim_err(format!("heatmap must be 2-d, got {:?}", heatmap.shape()));
    }
    let (h, w) = (heatmap.shape()[0], heatmap.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        heatmap
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write_pgm(heatmap: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(heatmap)?)?;
    Ok(())
}

/// One row of the box export.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxRecord {
    pub image_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

pub fn boxes_csv(records: &[BoxRecord]) -> String {
    let mut s = String::from("image_id,x0,y0,x1,y1,score\n");
    for r in records {
        let b = r.bbox;
        let _ = writeln!(s, "{},{},{},{},{},{:.6}", r.image_id, b.x0, b.y0, b.x1, b.y1, r.score);
    }
    s
}
