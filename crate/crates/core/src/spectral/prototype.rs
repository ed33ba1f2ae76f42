use serde::{Deserialize, Serialize};

use super::partition::BBox;
use crate::error::{Error, Result};
use crate::tensorkit::{Real, Tensor};

/// Where the box behind a prototype came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Spectral,
    OracleMask,
}

/// One support vector per pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub levels: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl PrototypeSet {
    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn level_dims(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    /// All levels back to back.
    pub fn concat(&self) -> Vec<f64> {
        self.levels.concat()
    }

    /// Inverse of [`PrototypeSet::concat`].
    pub fn split(flat: &[f64], level_dims: &[usize], provenance: Provenance) -> Result<Self> {
        let total: usize = level_dims.iter().sum();
        if total != flat.len() {
            return Err(Error::invalid(format!(
                "level dims sum to {total} but the vector has {} entries",
                flat.len()
            )));
        }
        let mut levels = Vec::with_capacity(level_dims.len());
        let mut at = 0;
        for &d in level_dims {
            levels.push(flat[at..at + d].to_vec());
            at += d;
        }
        Ok(PrototypeSet { levels, provenance })
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().flatten().all(|v| v.is_finite())
    }
}

/// Maps an inclusive grid range onto `size` cells, flooring the start and
/// ceiling the end so the result is never empty.
fn rescale(lo: usize, hi: usize, grid: usize, size: usize) -> (usize, usize) {
    let a = lo * size / grid;
    let b = ((hi + 1) * size).div_ceil(grid).max(a + 1) - 1;
    (a.min(size - 1), b.min(size - 1))
}

/// Box from a `grid_h x grid_w` grid rescaled onto an `h x w` map.
pub fn rescale_bbox(bbox: &BBox, grid_h: usize, grid_w: usize, h: usize, w: usize) -> BBox {
    let (row_min, row_max) = rescale(bbox.row_min, bbox.row_max, grid_h, h);
    let (col_min, col_max) = rescale(bbox.col_min, bbox.col_max, grid_w, w);
    BBox {
        row_min,
        row_max,
        col_min,
        col_max,
    }
}

fn box_mean<T: Real>(level: &Tensor<T>, b: &BBox) -> Result<Vec<f64>> {
    let (n, c, h, w) = level.dims4()?;
    if n != 1 {
        return Err(Error::invalid(format!(
            "expected one support image per level, got batch {n}"
        )));
    }
    if b.row_max >= h || b.col_max >= w {
        return Err(Error::invalid(format!("bbox {b:?} exceeds a {h}x{w} map")));
    }
    let count = b.area() as f64;
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = level.plane(0, ch);
        let mut acc = 0.0f64;
        for r in b.row_min..=b.row_max {
            for v in &plane[r * w + b.col_min..=r * w + b.col_max] {
                acc += v.as_f64();
            }
        }
        out.push(acc / count);
    }
    Ok(out)
}

fn check_grid(grid_h: usize, grid_w: usize, bbox: &BBox) -> Result<()> {
    if grid_h == 0 || grid_w == 0 || bbox.row_max >= grid_h || bbox.col_max >= grid_w {
        return Err(Error::invalid(format!(
            "bbox {bbox:?} does not fit a {grid_h}x{grid_w} grid"
        )));
    }
    Ok(())
}

/// Per-level mean of the features inside `bbox`, which is given on a
/// `grid_h x grid_w` grid and rescaled outward onto each level.
pub fn extract_prototype<T: Real>(
    pyramid: &[Tensor<T>],
    bbox: &BBox,
    grid_h: usize,
    grid_w: usize,
) -> Result<PrototypeSet> {
    check_grid(grid_h, grid_w, bbox)?;
    if pyramid.is_empty() {
        return Err(Error::invalid("empty feature pyramid"));
    }
    let mut levels = Vec::with_capacity(pyramid.len());
    for level in pyramid {
        let (_, _, h, w) = level.dims4()?;
        let b = rescale_bbox(bbox, grid_h, grid_w, h, w);
        levels.push(box_mean(level, &b)?);
    }
    let set = PrototypeSet {
        levels,
        provenance: Provenance::Spectral,
    };
    if !set.all_finite() {
        return Err(Error::NonFinite("prototype".into()));
    }
    Ok(set)
}

/// Per-level spatial mean; the same accumulation as a full-grid box.
pub fn global_average_pool<T: Real>(pyramid: &[Tensor<T>]) -> Result<PrototypeSet> {
    let mut levels = Vec::with_capacity(pyramid.len());
    for level in pyramid {
        let (_, _, h, w) = level.dims4()?;
        levels.push(box_mean(level, &BBox::full(h, w))?);
    }
    Ok(PrototypeSet {
        levels,
        provenance: Provenance::Spectral,
    })
}

/// Arithmetic mean of several shots, level by level.
pub fn mean_prototypes(sets: &[PrototypeSet]) -> Result<PrototypeSet> {
    let first = sets.first().ok_or_else(|| Error::invalid("no prototypes to average"))?;
    let dims = first.level_dims();
    if sets.iter().any(|s| s.level_dims() != dims) {
        return Err(Error::invalid("prototype sets have different level sizes"));
    }
    let k = sets.len() as f64;
    let levels = dims
        .iter()
        .enumerate()
        .map(|(l, &d)| {
            (0..d)
                .map(|i| sets.iter().map(|s| s.levels[l][i]).sum::<f64>() / k)
                .collect()
        })
        .collect();
    Ok(PrototypeSet {
        levels,
        provenance: first.provenance,
    })
}
