//! Relational patch-attention: a parameter-free patch relation map built
//! from head-averaged attention, weighted by class-token attention.
//!
//! For each block, with `A'` the `(N+1)×(N+1)` head mean:
//!
//! ```text
//! c      = A'[0, :]                 class-token attention (N+1)
//! P      = A'[:, 1..]               patch attention map (N+1)×N
//! H[i,j] = c[i] · P[i,j]
//! r[j]   = mean_i H[i,j]
//! ```
//!
//! The relation map is the block mean of `r`, reshaped row-major to the grid.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;
use crate::vit::AttentionRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRelationMap {
    /// `grid_h × grid_w`, non-negative.
    pub map: Tensor,
    pub source_blocks: usize,
}

fn check_square(a: &Tensor) -> Result<usize> {
    if a.ndim() != 2 || a.shape()[0] != a.shape()[1] || a.shape()[0] < 2 {
        return dim_err(format!(
            "expected a square (N+1)×(N+1) attention map, got {:?}",
            a.shape()
        ));
    }
    Ok(a.shape()[0])
}

/// Row 0 of `A'`.
pub fn class_token_vector(averaged: &Tensor) -> Result<Tensor> {
    let t = check_square(averaged)?;
    Tensor::new(&[t], averaged.data()[..t].to_vec())
}

/// Columns `1..=N` of `A'`.
pub fn patch_attention_map(averaged: &Tensor) -> Result<Tensor> {
    let t = check_square(averaged)?;
    let n = t - 1;
    let mut data = Vec::with_capacity(t * n);
    for row in averaged.data().chunks(t) {
        data.extend_from_slice(&row[1..]);
    }
    Tensor::new(&[t, n], data)
}

/// Per-block relation vector `r` of length `N`.
pub fn block_relation_vector(averaged: &Tensor) -> Result<Tensor> {
    let t = check_square(averaged)?;
    let n = t - 1;
    let c = class_token_vector(averaged)?;
    let p = patch_attention_map(averaged)?;
    let mut r = vec![0.0; n];
    for i in 0..t {
        let ci = c.data()[i];
        for (acc, pij) in r.iter_mut().zip(&p.data()[i * n..(i + 1) * n]) {
            *acc += ci * pij;
        }
    }
    r.iter_mut().for_each(|v| *v /= t as f64);
    Tensor::new(&[n], r)
}

/// Block mean of the relation vectors, reshaped to `grid_h × grid_w`.
pub fn build_patch_relation_map(
    attn: &AttentionRecord,
    grid_h: usize,
    grid_w: usize,
) -> Result<PatchRelationMap> {
    if attn.averaged.is_empty() {
        return dim_err("attention record has no blocks");
    }
    let n = attn.num_tokens() - 1;
    if n != grid_h * grid_w {
        return dim_err(format!(
            "record has {n} patch tokens but grid is {grid_h}×{grid_w}"
        ));
    }
    let mut total = vec![0.0; n];
    for a in &attn.averaged {
        let r = block_relation_vector(a)?;
        total.iter_mut().zip(r.data()).for_each(|(t, v)| *t += v);
    }
    let l = attn.averaged.len() as f64;
    total.iter_mut().for_each(|v| *v /= l);
    Ok(PatchRelationMap {
        map: Tensor::new(&[grid_h, grid_w], total)?,
        source_blocks: attn.averaged.len(),
    })
}

/// Plain-text dump of every block's class-token vector and relation vector.
///
/// One row per vector: `block,kind,v0,v1,…` with `kind` in `{class,relation}`.
pub fn debug_csv(attn: &AttentionRecord) -> Result<String> {
    let mut out = String::from("block,kind,values\n");
    for (l, a) in attn.averaged.iter().enumerate() {
        for (kind, v) in [
            ("class", class_token_vector(a)?),
            ("relation", block_relation_vector(a)?),
        ] {
            let _ = write!(out, "{l},{kind}");
            for x in v.data() {
                let _ = write!(out, ",{x:.9e}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_debug_csv(attn: &AttentionRecord, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(debug_csv(attn)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(t: usize) -> Tensor {
        Tensor::full(&[t, t], 1.0 / t as f64)
    }

    #[test]
    fn class_vector_is_first_row() {
        let a = Tensor::new(&[3, 3], vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8, 0.6, 0.2, 0.2]).unwrap();
        assert_eq!(class_token_vector(&a).unwrap().data(), &[0.2, 0.3, 0.5]);
        let u = class_token_vector(&uniform(4)).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.25));
        assert!((u.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn patch_map_drops_class_column() {
        let a = Tensor::new(&[3, 3], vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8, 0.6, 0.2, 0.2]).unwrap();
        let p = patch_attention_map(&a).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.3, 0.5, 0.1, 0.8, 0.2, 0.2]);
        for row in p.data().chunks(2) {
            assert!(row.iter().sum::<f64>() <= 1.0);
        }
        let pu = patch_attention_map(&uniform(4)).unwrap();
        assert!(pu.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn uniform_relation_vector_closed_form() {
        let r = block_relation_vector(&uniform(4)).unwrap();
        for v in r.data() {
            assert!((v - 1.0 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_class_row_selects_patch_row() {
        // Class token attends only to token 2.
        let a = Tensor::new(
            &[3, 3],
            vec![0.0, 0.0, 1.0, 0.3, 0.3, 0.4, 0.5, 0.1, 0.4],
        )
        .unwrap();
        let r = block_relation_vector(&a).unwrap();
        assert!((r.data()[0] - 0.1 / 3.0).abs() < 1e-15);
        assert!((r.data()[1] - 0.4 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn grid_mismatch_is_dimension_error() {
        let rec = AttentionRecord::from_averaged(vec![uniform(5)]).unwrap();
        assert!(build_patch_relation_map(&rec, 2, 3).is_err());
        let m = build_patch_relation_map(&rec, 2, 2).unwrap();
        assert_eq!(m.map.shape(), &[2, 2]);
        assert_eq!(m.source_blocks, 1);
    }

    #[test]
    fn debug_csv_has_two_rows_per_block() {
        let rec = AttentionRecord::from_averaged(vec![uniform(5), uniform(5)]).unwrap();
        let csv = debug_csv(&rec).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(2).unwrap().starts_with("0,relation,"));
    }
}
