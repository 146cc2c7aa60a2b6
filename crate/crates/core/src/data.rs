//! Synthetic shape dataset and its on-disk form.
//!
//! Each image holds one low-contrast shape over a textured background. A
//! small saturated marker sits inside the shape near one corner of its
//! extent; the marker colour and the body outline both depend on the class.
//! The marker is the easy cue, so a classifier that only fires on it yields
//! boxes much smaller than the object.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LctrError, Result};
use crate::localization::BBox;
use crate::tensor::Tensor;

pub const MIN_CLASSES: usize = 3;
pub const MAX_CLASSES: usize = 10;
pub const SUPPORTED_SIZES: [usize; 2] = [32, 64];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W` in `[0,1]`, quantized to multiples of 1/255.
    pub image: Tensor,
    pub label: usize,
    pub gt_box: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
    Ring,
    Cross,
    Diamond,
    Frame,
    LShape,
    TShape,
    HBar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; MAX_CLASSES] = [
        ShapeKind::Disk,
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::Frame,
        ShapeKind::LShape,
        ShapeKind::TShape,
        ShapeKind::HBar,
    ];

    /// Membership test in the unit box, `u, v ∈ [0,1)`.
    fn contains(self, u: f64, v: f64) -> bool {
        let (cu, cv) = (u - 0.5, v - 0.5);
        let r2 = cu * cu + cv * cv;
        match self {
            ShapeKind::Disk => r2 <= 0.25,
            ShapeKind::Rectangle => true,
            ShapeKind::Triangle => cu.abs() <= 0.5 * v,
            ShapeKind::Ring => (0.09..=0.25).contains(&r2),
            ShapeKind::Cross => cu.abs() <= 0.17 || cv.abs() <= 0.17,
            ShapeKind::Diamond => cu.abs() + cv.abs() <= 0.5,
            ShapeKind::Frame => cu.abs() >= 0.25 || cv.abs() >= 0.25,
            ShapeKind::LShape => u <= 0.38 || v >= 0.62,
            ShapeKind::TShape => v <= 0.36 || cu.abs() <= 0.18,
            ShapeKind::HBar => cv.abs() <= 0.25,
        }
    }
}

const MARKER_COLORS: [[f64; 3]; MAX_CLASSES] = [
    [0.95, 0.10, 0.10],
    [0.10, 0.85, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.90, 0.10, 0.90],
    [0.10, 0.90, 0.90],
    [0.98, 0.55, 0.05],
    [0.55, 0.10, 0.95],
    [0.98, 0.98, 0.98],
    [0.05, 0.05, 0.05],
];

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one sample of class `label` on an `size × size` canvas.
pub fn render_sample<R: Rng>(rng: &mut R, size: usize, label: usize) -> Sample {
    let kind = ShapeKind::ALL[label];
    let s = size as f64;
    // Background: base level, soft gradient and per-pixel grain.
    let base = rng.random_range(0.30..0.60);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let (gx, gy) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    let mut img = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let grad = gx * (x as f64 / s - 0.5) + gy * (y as f64 / s - 0.5);
            for c in 0..3 {
                let grain = rng.random_range(-0.05..0.05);
                img[(c * size + y) * size + x] = base + tint[c] + grad + grain;
            }
        }
    }
    // Body geometry.
    let (bw, bh) = loop {
        let bw = (rng.random_range(0.40..0.78) * s).round() as usize;
        let bh = match kind {
            ShapeKind::HBar => (bw as f64 * rng.random_range(0.55..0.75)).round() as usize,
            _ => (bw as f64 * rng.random_range(0.80..1.20)).round() as usize,
        };
        if bh >= 6 && bh < size && bw >= 6 {
            break (bw, bh);
        }
    };
    let x0 = rng.random_range(0..=size - bw);
    let y0 = rng.random_range(0..=size - bh);
    let mut mask = vec![false; size * size];
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            let u = (x - x0) as f64 / bw as f64 + 0.5 / bw as f64;
            let v = (y - y0) as f64 / bh as f64 + 0.5 / bh as f64;
            mask[y * size + x] = kind.contains(u, v);
        }
    }
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let contrast = sign * rng.random_range(0.10..0.18);
    let body_tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    // Marker: mask pixels within a small radius of the mask pixel nearest
    // a randomly chosen corner of the extent.
    let corner = rng.random_range(0..4usize);
    let (cx, cy) = (
        if corner % 2 == 0 { x0 } else { x0 + bw - 1 },
        if corner / 2 == 0 { y0 } else { y0 + bh - 1 },
    );
    let dist2 = |p: usize, qx: usize, qy: usize| {
        let (px, py) = ((p % size) as isize, (p / size) as isize);
        (px - qx as isize).pow(2) + (py - qy as isize).pow(2)
    };
    let anchor = (0..size * size)
        .filter(|&p| mask[p])
        .min_by_key(|&p| dist2(p, cx, cy))
        .expect("non-empty mask");
    let radius = (size / 16).max(1) as isize + 1;
    let (ax, ay) = (anchor % size, anchor / size);
    let marker = MARKER_COLORS[label];
    for p in 0..size * size {
        if !mask[p] {
            continue;
        }
        let in_marker = dist2(p, ax, ay) <= radius * radius;
        for c in 0..3 {
            let idx = c * size * size + p;
            img[idx] = if in_marker {
                marker[c]
            } else {
                img[idx] + contrast + body_tint[c]
            };
        }
    }
    let (mut bx0, mut by0, mut bx1, mut by1) = (size, size, 0, 0);
    for p in (0..size * size).filter(|&p| mask[p]) {
        let (x, y) = (p % size, p / size);
        bx0 = bx0.min(x);
        by0 = by0.min(y);
        bx1 = bx1.max(x + 1);
        by1 = by1.max(y + 1);
    }
    img.iter_mut().for_each(|v| *v = quantize(*v));
    Sample {
        image: Tensor::new(&[3, size, size], img).expect("sized buffer"),
        label,
        gt_box: BBox {
            x0: bx0,
            y0: by0,
            x1: bx1,
            y1: by1,
        },
    }
}

fn check_request(size: usize, num_classes: usize) -> Result<()> {
    if !(MIN_CLASSES..=MAX_CLASSES).contains(&num_classes) {
        return Err(LctrError::Config(format!(
            "num_classes must be in {MIN_CLASSES}..={MAX_CLASSES}, got {num_classes}"
        )));
    }
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(LctrError::Config(format!(
            "image size must be one of {SUPPORTED_SIZES:?}, got {size}"
        )));
    }
    Ok(())
}

/// `n` samples with labels assigned round-robin.
pub fn generate_split(n: usize, size: usize, num_classes: usize, seed: u64) -> Result<Vec<Sample>> {
    check_request(size, num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| render_sample(&mut rng, size, i % num_classes))
        .collect())
}

/// Train and test splits drawn from independent streams of `seed`.
pub fn generate_dataset(
    n_train: usize,
    n_test: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train = generate_split(n_train, size, num_classes, seed)?;
    let test = generate_split(n_test, size, num_classes, seed ^ 0x5eed_7e57_0000_0001)?;
    Ok((train, test))
}

/// Binary pixmap (`P6`) of a `3×H×W` image.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = image.shape() else {
        return Err(LctrError::Dimension(format!("expected 3×H×W, got {:?}", image.shape())));
    };
    if *c != 3 {
        return Err(LctrError::Dimension(format!("expected 3 channels, got {c}")));
    }
    let (h, w) = (*h, *w);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for ch in 0..3 {
            out.push((image.data()[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| LctrError::Format(format!("ppm: {m}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("magic is not P6"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1;
    let pixels = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| bad("truncated pixel data"))?;
    let mut data = vec![0.0; 3 * w * h];
    for p in 0..w * h {
        for ch in 0..3 {
            data[ch * w * h + p] = pixels[3 * p + ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes `img_<id>.ppm`, `labels.csv` and `boxes.csv` into `dir`.
pub fn save_split(samples: &[Sample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut labels = String::from("id,class\n");
    let mut boxes = String::from("id,x0,y0,x1,y1\n");
    for (id, s) in samples.iter().enumerate() {
        std::fs::write(dir.join(format!("img_{id}.ppm")), encode_ppm(&s.image)?)?;
        let _ = writeln!(labels, "{id},{}", s.label);
        let b = s.gt_box;
        let _ = writeln!(boxes, "{id},{},{},{},{}", b.x0, b.y0, b.x1, b.y1);
    }
    std::fs::write(dir.join("labels.csv"), labels)?;
    std::fs::write(dir.join("boxes.csv"), boxes)?;
    Ok(())
}

fn read_rows(path: &Path, cols: usize) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let row = line
                .split(',')
                .map(|f| f.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| LctrError::Format(format!("{}: {e} in {line:?}", path.display())))?;
            if row.len() != cols {
                return Err(LctrError::Format(format!(
                    "{}: expected {cols} fields in {line:?}",
                    path.display()
                )));
            }
            Ok(row)
        })
        .collect()
}

pub fn load_split(dir: &Path) -> Result<Vec<Sample>> {
    let labels = read_rows(&dir.join("labels.csv"), 2)?;
    let boxes = read_rows(&dir.join("boxes.csv"), 5)?;
    if labels.len() != boxes.len() {
        return Err(LctrError::Format(format!(
            "{}: {} labels but {} boxes",
            dir.display(),
            labels.len(),
            boxes.len()
        )));
    }
    labels
        .iter()
        .zip(&boxes)
        .map(|(l, b)| {
            if l[0] != b[0] {
                return Err(LctrError::Format(format!("id mismatch {} vs {}", l[0], b[0])));
            }
            let image = decode_ppm(&std::fs::read(dir.join(format!("img_{}.ppm", l[0])))?)?;
            Ok(Sample {
                image,
                label: l[1],
                gt_box: BBox::new(b[1], b[2], b[3], b[4])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_requests() {
        assert!(matches!(generate_split(4, 32, 2, 0), Err(LctrError::Config(_))));
        assert!(matches!(generate_split(4, 32, 11, 0), Err(LctrError::Config(_))));
        assert!(matches!(generate_split(4, 48, 5, 0), Err(LctrError::Config(_))));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_split(12, 32, 5, 9).unwrap();
        let b = generate_split(12, 32, 5, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_split(12, 32, 5, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn boxes_valid_and_balanced() {
        for size in SUPPORTED_SIZES {
            let s = generate_split(53, size, 10, 1).unwrap();
            let mut hist = [0usize; 10];
            for x in &s {
                assert!(x.gt_box.within(size, size));
                assert!(x.gt_box.area() >= 9);
                hist[x.label] += 1;
            }
            let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
            assert!(hi - lo <= 1);
        }
    }

    #[test]
    fn box_tightly_encloses_foreground() {
        // Render each class on a flat background by comparing to the same
        // sample's background stream is not possible, so check the marker:
        // its colour must appear inside the box and never outside it.
        for label in 0..MAX_CLASSES {
            let mut rng = ChaCha8Rng::seed_from_u64(label as u64);
            let s = render_sample(&mut rng, 32, label);
            let m = MARKER_COLORS[label].map(quantize);
            let mut found = false;
            for y in 0..32 {
                for x in 0..32 {
                    let px: Vec<f64> = (0..3).map(|c| s.image.at(&[c, y, x])).collect();
                    if px == m {
                        found = true;
                        let b = s.gt_box;
                        assert!(x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1);
                    }
                }
            }
            assert!(found, "marker missing for class {label}");
        }
    }

    #[test]
    fn ppm_round_trip_is_exact() {
        let s = &generate_split(1, 32, 3, 2).unwrap()[0];
        let back = decode_ppm(&encode_ppm(&s.image).unwrap()).unwrap();
        assert_eq!(back, s.image);
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let mut bytes = b"P6\n# comment\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.2]);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0").is_err());
    }

    #[test]
    fn split_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_split(6, 32, 3, 4).unwrap();
        save_split(&s, dir.path()).unwrap();
        assert_eq!(load_split(dir.path()).unwrap(), s);
    }
}
