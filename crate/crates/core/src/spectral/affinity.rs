use serde::{Deserialize, Serialize};

use super::hypercolumn::Hypercolumn;
use super::linalg::{dot, DenseMatrix};
use crate::error::{Error, Result};

/// Symmetric non-negative pixel affinity with unit diagonal.
#[derive(Clone, Debug)]
pub struct AffinityMatrix(pub DenseMatrix);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianMode {
    /// `D^{-1/2} (D - W) D^{-1/2}`
    #[serde(alias = "sym")]
    #[value(alias = "sym")]
    Symmetric,
    /// `D^{-1} (D - W)`
    #[serde(alias = "rw")]
    #[value(alias = "rw")]
    RandomWalk,
}

/// A normalized graph Laplacian plus the degrees it was built from.
#[derive(Clone, Debug)]
pub struct Laplacian {
    pub matrix: DenseMatrix,
    pub mode: LaplacianMode,
    pub degrees: Vec<f64>,
}

/// `W = max(0, F F^T)` over unit-norm hypercolumn rows: cosine similarity
/// with anti-correlated pairs cut to zero. Filled from the upper triangle so
/// the result is exactly symmetric; the diagonal is pinned to 1.
pub fn affinity_matrix(hc: &Hypercolumn) -> AffinityMatrix {
    let n = hc.rows();
    let mut w = DenseMatrix::zeros(n);
    for i in 0..n {
        w.set(i, i, 1.0);
        let ri = hc.row(i);
        for j in i + 1..n {
            let v = dot(ri, hc.row(j)).max(0.0);
            w.set(i, j, v);
            w.set(j, i, v);
        }
    }
    AffinityMatrix(w)
}

pub fn laplacian(w: &AffinityMatrix, mode: LaplacianMode) -> Result<Laplacian> {
    let w = &w.0;
    let n = w.n();
    let degrees: Vec<f64> = (0..n).map(|i| w.row(i).iter().sum()).collect();
    if let Some(i) = degrees.iter().position(|&d| !d.is_finite() || d <= 0.0) {
        return Err(Error::invalid(format!(
            "node {i} has non-positive degree {}",
            degrees[i]
        )));
    }
    let matrix = match mode {
        LaplacianMode::Symmetric => {
            let s: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
            let mut l = DenseMatrix::zeros(n);
            for i in 0..n {
                l.set(i, i, (degrees[i] - w.get(i, i)) * (s[i] * s[i]));
                for j in i + 1..n {
                    let v = -w.get(i, j) * (s[i] * s[j]);
                    l.set(i, j, v);
                    l.set(j, i, v);
                }
            }
            l
        }
        LaplacianMode::RandomWalk => DenseMatrix::from_fn(n, |i, j| {
            let d = if i == j { degrees[i] } else { 0.0 };
            (d - w.get(i, j)) / degrees[i]
        }),
    };
    Ok(Laplacian { matrix, mode, degrees })
}
