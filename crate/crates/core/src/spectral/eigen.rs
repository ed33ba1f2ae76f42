#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::affinity::{Laplacian, LaplacianMode};
use super::linalg::{axpy, dot, norm, DenseMatrix, LinearOperator};
use crate::error::{Error, Result};

/// Largest problem [`EigenSolver::Auto`] hands to the dense solver.
pub const DENSE_LIMIT: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EigenSolver {
    /// Dense up to [`DENSE_LIMIT`] nodes, Lanczos above.
    Auto,
    Dense,
    Lanczos,
}

/// The smallest eigenpairs of a Laplacian, eigenvalues ascending.
///
/// Each eigenvector has unit norm and its largest-magnitude entry positive.
#[derive(Clone, Debug)]
pub struct EigenSystem {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vec<f64>>,
    pub mode: Option<LaplacianMode>,
    /// Known null direction of the operator (unit norm), when available:
    /// `D^{1/2} 1` for the symmetric Laplacian, `1` for the random walk one.
    pub trivial_vector: Option<Vec<f64>>,
}

impl EigenSystem {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// Column-major square matrix, so the rotations of the QL sweep walk
/// contiguous memory.
struct ColMajor {
    n: usize,
    data: Vec<f64>,
}

impl ColMajor {
    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[c * self.n + r]
    }

    #[inline]
    fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[c * self.n + r] = v;
    }

    fn column(&self, c: usize) -> Vec<f64> {
        self.data[c * self.n..(c + 1) * self.n].to_vec()
    }
}

/// Householder reduction of the symmetric matrix held in `v` to tridiagonal
/// form (diagonal `d`, subdiagonal `e[1..]`), accumulating the transform in
/// `v`. Port of the EISPACK `tred2` routine.
fn tred2(v: &mut ColMajor, d: &mut [f64], e: &mut [f64]) {
    let n = v.n;
    for j in 0..n {
        d[j] = v.at(n - 1, j);
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v.at(i - 1, j);
                v.set(i, j, 0.0);
                v.set(j, i, 0.0);
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].fill(0.0);
            for j in 0..i {
                let f = d[j];
                v.set(j, i, f);
                let mut g = e[j] + v.at(j, j) * f;
                for k in j + 1..i {
                    g += v.at(k, j) * d[k];
                    e[k] += v.at(k, j) * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                for k in j..i {
                    let val = v.at(k, j) - (f * e[k] + g * d[k]);
                    v.set(k, j, val);
                }
                d[j] = v.at(i - 1, j);
                v.set(i, j, 0.0);
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        let vii = v.at(i, i);
        v.set(n - 1, i, vii);
        v.set(i, i, 1.0);
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v.at(k, i + 1) / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v.at(k, i + 1) * v.at(k, j);
                }
                for k in 0..=i {
                    let val = v.at(k, j) - g * d[k];
                    v.set(k, j, val);
                }
            }
        }
        for k in 0..=i {
            v.set(k, i + 1, 0.0);
        }
    }
    for j in 0..n {
        d[j] = v.at(n - 1, j);
        v.set(n - 1, j, 0.0);
    }
    v.set(n - 1, n - 1, 1.0);
    e[0] = 0.0;
}

/// Implicit QL iteration on a symmetric tridiagonal matrix (EISPACK `tql2`),
/// rotating the columns of `v` along. Eigenpairs come out sorted ascending.
fn tql2(v: &mut ColMajor, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = v.n;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    let max_sweeps = 30 * n.max(1);
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut sweeps = 0;
            loop {
                sweeps += 1;
                if sweeps > max_sweeps {
                    return Err(Error::NoConvergence {
                        iterations: sweeps,
                        residual: e[l].abs(),
                    });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (lo, hi) = v.data.split_at_mut((i + 1) * n);
                    let col_i = &mut lo[i * n..];
                    let col_i1 = &mut hi[..n];
                    for (a, b) in col_i.iter_mut().zip(col_i1.iter_mut()) {
                        let hk = *b;
                        *b = s * *a + c * hk;
                        *a = c * *a - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    // selection sort keeps the column swaps simple
    for i in 0..n.saturating_sub(1) {
        let mut k = i;
        let mut p = d[i];
        for (j, &dj) in d.iter().enumerate().skip(i + 1) {
            if dj < p {
                k = j;
                p = dj;
            }
        }
        if k != i {
            d[k] = d[i];
            d[i] = p;
            for r in 0..n {
                v.data.swap(i * n + r, k * n + r);
            }
        }
    }
    Ok(())
}

/// All eigenpairs of a symmetric matrix via Householder tridiagonalization
/// and implicit QL, eigenvalues ascending.
pub fn dense_symmetric_eigen(m: &DenseMatrix) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = m.n();
    if n == 0 {
        return Err(Error::invalid("empty matrix"));
    }
    if !m.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to the eigensolver".into()));
    }
    // symmetric, so the row-major data read column-major is the same matrix
    let mut v = ColMajor {
        n,
        data: m.data().to_vec(),
    };
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e)?;
    let vecs = (0..n).map(|c| v.column(c)).collect();
    Ok((d, vecs))
}

/// Eigen-decomposition of the tridiagonal matrix with diagonal `alpha` and
/// off-diagonal `beta` (length `alpha.len() - 1`).
fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> Result<(Vec<f64>, ColMajor)> {
    let m = alpha.len();
    let mut v = ColMajor {
        n: m,
        data: vec![0.0; m * m],
    };
    for i in 0..m {
        v.set(i, i, 1.0);
    }
    let mut d = alpha.to_vec();
    let mut e = vec![0.0; m];
    e[1..m].copy_from_slice(&beta[..m - 1]);
    tql2(&mut v, &mut d, &mut e)?;
    Ok((d, v))
}

#[derive(Clone, Debug)]
pub struct LanczosOptions {
    /// Krylov dimension cap; defaults to the operator dimension.
    pub max_iter: Option<usize>,
    /// Residual tolerance `|A y - theta y| <= tol * max(1, |theta|)`.
    pub tol: f64,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        LanczosOptions {
            max_iter: None,
            tol: 1e-10,
            seed: 0,
        }
    }
}

fn random_unit_orthogonal(rng: &mut ChaCha8Rng, n: usize, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..8 {
        let mut r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            for q in basis {
                let c = dot(q, &r);
                axpy(-c, q, &mut r);
            }
        }
        let nr = norm(&r);
        if nr > 1e-8 {
            r.iter_mut().for_each(|x| *x /= nr);
            return Some(r);
        }
    }
    None
}

/// The `k` smallest eigenpairs of a symmetric operator by Lanczos iteration
/// with full reorthogonalization.
///
/// On breakdown (an invariant Krylov subspace) the iteration restarts from
/// a fresh random vector orthogonal to the basis, so exactly repeated
/// eigenvalues are found once the breakdown happens. Without breakdown, an
/// eigenvalue of multiplicity above one is only guaranteed to be resolved
/// when the Krylov space is exhausted.
pub fn lanczos_smallest<O: LinearOperator>(
    op: &O,
    k: usize,
    opts: &LanczosOptions,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = op.dim();
    if n == 0 || k == 0 {
        return Err(Error::invalid("Lanczos needs a non-empty operator and k >= 1"));
    }
    let k = k.min(n);
    let max_iter = opts.max_iter.unwrap_or(n).clamp(k, n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let first = random_unit_orthogonal(&mut rng, n, &[]).expect("random start vector");
    let mut basis: Vec<Vec<f64>> = vec![first];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    let mut next_check = (2 * k + 10).min(max_iter);
    let mut scale: f64 = 0.0;
    loop {
        let j = basis.len() - 1;
        op.apply(&basis[j], &mut w);
        let a = dot(&basis[j], &w);
        axpy(-a, &basis[j], &mut w);
        if j > 0 {
            axpy(-beta[j - 1], &basis[j - 1], &mut w);
        }
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                axpy(-c, q, &mut w);
            }
        }
        alpha.push(a);
        let b = norm(&w);
        scale = scale.max(a.abs()).max(b);
        let m = alpha.len();
        let breakdown = b <= 1e-12 * scale.max(1.0);
        let exhausted = m == max_iter;

        if exhausted || (!breakdown && m >= next_check) {
            let (theta, s) = tridiagonal_eigen(&alpha, &beta)?;
            let estimate = |i: usize| (b * s.at(m - 1, i)).abs();
            let converged = (0..k.min(m)).all(|i| estimate(i) <= opts.tol * theta[i].abs().max(1.0));
            if (converged && m >= k) || exhausted {
                let kk = k.min(m);
                let mut vecs = Vec::with_capacity(kk);
                let mut worst: f64 = 0.0;
                for i in 0..kk {
                    let mut y = vec![0.0; n];
                    for (jj, q) in basis.iter().enumerate() {
                        axpy(s.at(jj, i), q, &mut y);
                    }
                    let ny = norm(&y);
                    y.iter_mut().for_each(|x| *x /= ny);
                    let mut ay = vec![0.0; n];
                    op.apply(&y, &mut ay);
                    axpy(-theta[i], &y, &mut ay);
                    worst = worst.max(norm(&ay) / theta[i].abs().max(1.0));
                    vecs.push(y);
                }
                if worst > opts.tol.max(1e-9) {
                    return Err(Error::NoConvergence {
                        iterations: m,
                        residual: worst,
                    });
                }
                return Ok((theta[..kk].to_vec(), vecs));
            }
            next_check = (m + 10).max(m * 5 / 4).min(max_iter);
        }

        if breakdown {
            match random_unit_orthogonal(&mut rng, n, &basis) {
                Some(r) => {
                    beta.push(0.0);
                    basis.push(r);
                }
                None => {
                    return Err(Error::NoConvergence {
                        iterations: m,
                        residual: b,
                    })
                }
            }
        } else {
            beta.push(b);
            basis.push(w.iter().map(|x| x / b).collect());
        }
    }
}

/// Flips `v` so its largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// The `n_vectors` smallest eigenpairs of a normalized Laplacian.
///
/// The random-walk Laplacian is solved through its symmetric similarity
/// transform `D^{1/2} L_rw D^{-1/2}` and back-transformed with `D^{-1/2}`.
pub fn eigendecompose(lap: &Laplacian, n_vectors: usize, solver: EigenSolver, seed: u64) -> Result<EigenSystem> {
    let n = lap.matrix.n();
    if n_vectors == 0 {
        return Err(Error::invalid("n_vectors must be at least 1"));
    }
    let k = n_vectors.min(n);
    let sqrt_d: Vec<f64> = lap.degrees.iter().map(|d| d.sqrt()).collect();
    let sym = match lap.mode {
        LaplacianMode::Symmetric => lap.matrix.clone(),
        LaplacianMode::RandomWalk => {
            let mut s = DenseMatrix::zeros(n);
            for i in 0..n {
                s.set(i, i, lap.matrix.get(i, i));
                for j in i + 1..n {
                    let a = lap.matrix.get(i, j) * sqrt_d[i] / sqrt_d[j];
                    let b = lap.matrix.get(j, i) * sqrt_d[j] / sqrt_d[i];
                    let v = 0.5 * (a + b);
                    s.set(i, j, v);
                    s.set(j, i, v);
                }
            }
            s
        }
    };
    let use_dense = match solver {
        EigenSolver::Dense => true,
        EigenSolver::Lanczos => false,
        EigenSolver::Auto => n <= DENSE_LIMIT,
    };
    let (mut values, mut vectors) = if use_dense {
        let (vals, vecs) = dense_symmetric_eigen(&sym)?;
        (vals[..k].to_vec(), vecs.into_iter().take(k).collect::<Vec<_>>())
    } else {
        lanczos_smallest(
            &sym,
            k,
            &LanczosOptions {
                seed,
                ..Default::default()
            },
        )?
    };
    let trivial = match lap.mode {
        LaplacianMode::Symmetric => {
            let nd = norm(&sqrt_d);
            sqrt_d.iter().map(|x| x / nd).collect()
        }
        LaplacianMode::RandomWalk => {
            for v in &mut vectors {
                v.iter_mut().zip(&sqrt_d).for_each(|(x, s)| *x /= s);
                let nv = norm(v);
                v.iter_mut().for_each(|x| *x /= nv);
            }
            vec![1.0 / (n as f64).sqrt(); n]
        }
    };
    vectors.iter_mut().for_each(|v| canonical_sign(v));
    // clean up round-off ordering of equal eigenvalues
    if values.windows(2).any(|w| w[0] > w[1]) {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        values = idx.iter().map(|&i| values[i]).collect();
        vectors = idx.iter().map(|&i| vectors[i].clone()).collect();
    }
    Ok(EigenSystem {
        eigenvalues: values,
        eigenvectors: vectors,
        mode: Some(lap.mode),
        trivial_vector: Some(trivial),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_matrix_has_zero_spectrum() {
        let (vals, vecs) = dense_symmetric_eigen(&DenseMatrix::zeros(4)).unwrap();
        assert_eq!(vals, vec![0.0; 4]);
        assert_eq!(vecs.len(), 4);
    }

    #[test]
    fn path_graph_laplacian() {
        // D - W for the path 0-1-2: characteristic polynomial x(x-1)(x-3)
        let l = DenseMatrix::from_rows(3, vec![1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]).unwrap();
        let (vals, vecs) = dense_symmetric_eigen(&l).unwrap();
        for (v, e) in vals.iter().zip([0.0, 1.0, 3.0]) {
            assert!((v - e).abs() < 1e-12, "{vals:?}");
        }
        for (i, v) in vecs.iter().enumerate() {
            let lv = l.matvec(v);
            let r: f64 = lv
                .iter()
                .zip(v)
                .map(|(a, b)| (a - vals[i] * b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(r < 1e-12);
        }
        let (lv, _) = lanczos_smallest(&l, 3, &LanczosOptions::default()).unwrap();
        for (v, e) in lv.iter().zip([0.0, 1.0, 3.0]) {
            assert!((v - e).abs() < 1e-10);
        }
    }

    #[test]
    fn one_by_one() {
        let (vals, vecs) = dense_symmetric_eigen(&DenseMatrix::from_rows(1, vec![2.5]).unwrap()).unwrap();
        assert_eq!(vals, vec![2.5]);
        assert_eq!(vecs, vec![vec![1.0]]);
    }

    #[test]
    fn lanczos_handles_repeated_eigenvalues_via_restart() {
        // block diagonal with identical blocks: every eigenvalue doubled
        let block = [2.0, -1.0, -1.0, 2.0];
        let m = DenseMatrix::from_fn(4, |i, j| {
            if i / 2 == j / 2 {
                block[(i % 2) * 2 + j % 2]
            } else {
                0.0
            }
        });
        let (vals, _) = lanczos_smallest(&m, 4, &LanczosOptions::default()).unwrap();
        for (v, e) in vals.iter().zip([1.0, 1.0, 3.0, 3.0]) {
            assert!((v - e).abs() < 1e-10, "{vals:?}");
        }
    }

    #[test]
    fn non_finite_matrix_rejected() {
        let m = DenseMatrix::from_rows(2, vec![1.0, f64::NAN, f64::NAN, 1.0]).unwrap();
        assert!(dense_symmetric_eigen(&m).is_err());
    }
}
