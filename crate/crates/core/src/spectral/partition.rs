use serde::{Deserialize, Serialize};

use super::eigen::EigenSystem;
use super::linalg::{axpy, dot, norm};
use crate::error::{Error, Result};

/// Eigenvalues within this distance of the smallest one count as null.
const NULL_TOL: f64 = 1e-6;

/// Inclusive axis-aligned box on a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn new(row_min: usize, row_max: usize, col_min: usize, col_max: usize) -> Result<Self> {
        if row_min > row_max || col_min > col_max {
            return Err(Error::invalid(format!(
                "inverted bbox rows {row_min}..={row_max} cols {col_min}..={col_max}"
            )));
        }
        Ok(BBox {
            row_min,
            row_max,
            col_min,
            col_max,
        })
    }

    pub fn full(h: usize, w: usize) -> Self {
        BBox {
            row_min: 0,
            row_max: h - 1,
            col_min: 0,
            col_max: w - 1,
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row_min..=self.row_max).contains(&r) && (self.col_min..=self.col_max).contains(&c)
    }

    /// Tight box around the set pixels of a row-major mask, `None` if empty.
    pub fn of_mask(mask: &[bool], h: usize, w: usize) -> Option<Self> {
        let mut b: Option<BBox> = None;
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            let (r, c) = (i / w, i % w);
            debug_assert!(r < h);
            b = Some(match b {
                None => BBox {
                    row_min: r,
                    row_max: r,
                    col_min: c,
                    col_max: c,
                },
                Some(b) => BBox {
                    row_min: b.row_min.min(r),
                    row_max: b.row_max.max(r),
                    col_min: b.col_min.min(c),
                    col_max: b.col_max.max(c),
                },
            });
        }
        b
    }
}

/// Binary split of the affinity grid; `mask` is true on the foreground
/// (the smaller region).
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionResult {
    pub mask: Vec<bool>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub bbox: BBox,
    pub fiedler_index: usize,
    /// The vector whose signs were discretized.
    pub fiedler_vector: Vec<f64>,
}

impl PartitionResult {
    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Splits `y` by sign (`y >= 0` against `y < 0`) and labels the smaller side
/// foreground. Equal sizes go to the side whose centroid is nearer the grid
/// center, then to the side holding pixel 0.
pub fn sign_partition(y: &[f64], grid_h: usize, grid_w: usize) -> Result<Vec<bool>> {
    if y.len() != grid_h * grid_w {
        return Err(Error::invalid(format!(
            "vector of length {} does not fit a {grid_h}x{grid_w} grid",
            y.len()
        )));
    }
    let nonneg: Vec<bool> = y.iter().map(|v| *v >= 0.0).collect();
    let n_pos = nonneg.iter().filter(|p| **p).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegeneratePartition("sign split leaves one region empty".into()));
    }
    let fg_is_nonneg = if n_pos != n_neg {
        n_pos < n_neg
    } else {
        let (cr, cc) = ((grid_h as f64 - 1.0) / 2.0, (grid_w as f64 - 1.0) / 2.0);
        let dist = |side: bool| {
            let (mut sr, mut sc) = (0.0, 0.0);
            for (i, _) in nonneg.iter().enumerate().filter(|(_, p)| **p == side) {
                sr += (i / grid_w) as f64;
                sc += (i % grid_w) as f64;
            }
            let k = n_pos as f64;
            (sr / k - cr).powi(2) + (sc / k - cc).powi(2)
        };
        let (dp, dn) = (dist(true), dist(false));
        if (dp - dn).abs() > 1e-12 {
            dp < dn
        } else {
            nonneg[0]
        }
    };
    Ok(nonneg.into_iter().map(|p| p == fg_is_nonneg).collect())
}

/// Tight bounding box of the foreground of a partition mask.
pub fn smaller_region_bbox(mask: &[bool], grid_h: usize, grid_w: usize) -> Result<BBox> {
    BBox::of_mask(mask, grid_h, grid_w).ok_or_else(|| Error::DegeneratePartition("empty foreground".into()))
}

/// Picks the Fiedler vector from `eigen`, splits the grid by its signs and
/// boxes the smaller region.
///
/// When the null space has dimension two or more (a disconnected graph), the
/// null vector farthest from the known trivial direction is used, which
/// separates the components. Otherwise the first eigenvector past the null
/// space is used and it must not share its eigenvalue with the next one, as
/// the split would then depend on an arbitrary basis.
pub fn fiedler_partition(eigen: &EigenSystem, grid_h: usize, grid_w: usize) -> Result<PartitionResult> {
    let n = grid_h * grid_w;
    if eigen.is_empty() {
        return Err(Error::invalid("no eigenpairs to partition with"));
    }
    if eigen.eigenvectors.iter().any(|v| v.len() != n) {
        return Err(Error::invalid(format!(
            "eigenvectors do not match the {grid_h}x{grid_w} grid"
        )));
    }
    let vals = &eigen.eigenvalues;
    let lambda0 = vals[0];
    let null: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] <= lambda0 + NULL_TOL).collect();

    let (index, y) = match (&eigen.trivial_vector, null.len() >= 2) {
        (Some(t), true) => {
            let mut best: Option<(usize, Vec<f64>, f64)> = None;
            for &i in &null {
                let mut r = eigen.eigenvectors[i].clone();
                let c = dot(t, &r) / dot(t, t);
                axpy(-c, t, &mut r);
                let nr = norm(&r);
                if best.as_ref().is_none_or(|b| nr > b.2) {
                    best = Some((i, r, nr));
                }
            }
            let (i, r, _) = best.expect("null set is non-empty");
            (i, r)
        }
        _ => {
            let i = (0..vals.len())
                .find(|&i| vals[i] > lambda0 + NULL_TOL)
                .ok_or_else(|| Error::DegeneratePartition("no eigenvalue above the null space".into()))?;
            if let Some(next) = vals.get(i + 1) {
                if next - vals[i] <= NULL_TOL * vals[i].abs().max(1.0) {
                    return Err(Error::DegeneratePartition(format!(
                        "Fiedler eigenvalue {} is repeated",
                        vals[i]
                    )));
                }
            }
            (i, eigen.eigenvectors[i].clone())
        }
    };
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(*v), hi.max(*v))
    });
    if hi - lo < 1e-8 {
        return Err(Error::DegeneratePartition("Fiedler vector is constant".into()));
    }
    let mask = sign_partition(&y, grid_h, grid_w)?;
    let bbox = smaller_region_bbox(&mask, grid_h, grid_w)?;
    Ok(PartitionResult {
        mask,
        grid_h,
        grid_w,
        bbox,
        fiedler_index: index,
        fiedler_vector: y,
    })
}
