//! Dense f64 linear algebra kernels: row-major matrices, cyclic Jacobi
//! eigendecomposition for symmetric matrices, and one-sided Jacobi SVD.
//!
//! Everything here targets desk-scale dimensions (a few hundred at most),
//! where exact dense algebra is cheap and the Jacobi family gives high
//! relative accuracy without pivoting machinery.

use crate::error::{Error, Result};

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// C = A · B
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// y = A · x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec shape");
        self.data
            .chunks_exact(self.cols)
            .map(|row| dot(row, x))
            .collect()
    }

    pub fn add_scaled(&mut self, other: &Mat, scale: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rank-1 update A += s · x yᵀ.
    pub fn rank1_update(&mut self, x: &[f64], y: &[f64], s: f64) {
        assert_eq!(self.rows, x.len());
        assert_eq!(self.cols, y.len());
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            let f = s * xi;
            for (r, &yj) in row.iter_mut().zip(y) {
                *r += f * yj;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matrix whose column `j`
/// is the eigenvector for eigenvalue `j`, so `A = V diag(λ) Vᵀ`.
pub fn sym_eigh(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    if a.rows != a.cols {
        return Err(Error::DimensionMismatch(format!(
            "sym_eigh needs square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    let mut m = a.clone();
    // Symmetrize defensively; callers guarantee near-symmetry.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    let mut v = Mat::identity(n);
    let scale: f64 = m.frob_norm().max(f64::MIN_POSITIVE);
    let tol = 1e-15 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j).powi(2);
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Rotate rows/cols p and q of M, and columns of V.
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut eigvecs = Mat::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            eigvecs.set(i, new_j, v.get(i, old_j));
        }
    }
    Ok((eigvals, eigvecs))
}

/// Thin SVD `A = U diag(σ) Vᵀ` via one-sided Jacobi (Hestenes) on the taller
/// orientation. Returns (U: m×r, σ: descending, V: n×r) with r = min(m, n).
/// Columns whose singular value underflows are left as zero vectors.
pub fn svd(a: &Mat) -> Result<(Mat, Vec<f64>, Mat)> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::DimensionMismatch("svd of empty matrix".into()));
    }
    if a.rows >= a.cols {
        svd_tall(a)
    } else {
        // A = U S Vᵀ  ⇔  Aᵀ = V S Uᵀ
        let (v, s, u) = svd_tall(&a.transpose())?;
        Ok((u, s, v))
    }
}

fn svd_tall(a: &Mat) -> Result<(Mat, Vec<f64>, Mat)> {
    let (m, n) = (a.rows, a.cols);
    debug_assert!(m >= n);
    let mut u = a.clone();
    let mut v = Mat::identity(n);
    let eps = 1e-15;

    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (mut aii, mut ajj, mut aij) = (0.0f64, 0.0, 0.0);
                for k in 0..m {
                    let ci = u.get(k, i);
                    let cj = u.get(k, j);
                    aii += ci * ci;
                    ajj += cj * cj;
                    aij += ci * cj;
                }
                if aij.abs() <= eps * (aii * ajj).sqrt() || aij == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (ajj - aii) / (2.0 * aij);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..m {
                    let ci = u.get(k, i);
                    let cj = u.get(k, j);
                    u.set(k, i, c * ci - s * cj);
                    u.set(k, j, s * ci + c * cj);
                }
                for k in 0..n {
                    let vi = v.get(k, i);
                    let vj = v.get(k, j);
                    v.set(k, i, c * vi - s * vj);
                    v.set(k, j, s * vi + c * vj);
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..n).map(|j| norm2(&u.col(j))).collect();
    let smax = sigma.iter().cloned().fold(0.0f64, f64::max);
    let tiny = smax * 1e-300 + f64::MIN_POSITIVE;
    for j in 0..n {
        if sigma[j] > tiny {
            let inv = 1.0 / sigma[j];
            for k in 0..m {
                u.set(k, j, u.get(k, j) * inv);
            }
        } else {
            sigma[j] = 0.0;
            for k in 0..m {
                u.set(k, j, 0.0);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let s_sorted: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    let mut u_sorted = Mat::zeros(m, n);
    let mut v_sorted = Mat::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for k in 0..m {
            u_sorted.set(k, new_j, u.get(k, old_j));
        }
        for k in 0..n {
            v_sorted.set(k, new_j, v.get(k, old_j));
        }
    }
    Ok((u_sorted, s_sorted, v_sorted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn rand_mat(rng: &mut impl Rng, m: usize, n: usize) -> Mat {
        let data = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Mat { rows: m, cols: n, data }
    }

    #[test]
    fn eigh_reconstructs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n in [1usize, 2, 5, 16, 33] {
            let b = rand_mat(&mut rng, n, n);
            let a = {
                // A = B + Bᵀ, symmetric by construction
                let bt = b.transpose();
                let mut a = b.clone();
                a.add_scaled(&bt, 1.0);
                a
            };
            let (vals, vecs) = sym_eigh(&a).unwrap();
            // V diag(λ) Vᵀ == A
            let mut lam = Mat::zeros(n, n);
            for i in 0..n {
                lam.set(i, i, vals[i]);
            }
            let rec = vecs.matmul(&lam).matmul(&vecs.transpose());
            let mut diff = rec.clone();
            diff.add_scaled(&a, -1.0);
            assert!(diff.frob_norm() <= 1e-11 * a.frob_norm().max(1.0), "n={n}");
            // VᵀV == I
            let vtv = vecs.transpose().matmul(&vecs);
            let mut e = vtv.clone();
            e.add_scaled(&Mat::identity(n), -1.0);
            assert!(e.frob_norm() <= 1e-12 * (n as f64));
            // descending
            for w in vals.windows(2) {
                assert!(w[0] >= w[1] - 1e-12);
            }
        }
    }

    #[test]
    fn svd_reconstructs_and_matches_nalgebra() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for (m, n) in [(1, 1), (4, 4), (6, 3), (3, 6), (12, 8), (8, 12)] {
            let a = rand_mat(&mut rng, m, n);
            let (u, s, v) = svd(&a).unwrap();
            let r = m.min(n);
            assert_eq!(u.cols, r);
            assert_eq!(v.cols, r);
            // U diag(σ) Vᵀ == A
            let mut us = u.clone();
            for j in 0..r {
                for i in 0..m {
                    us.set(i, j, us.get(i, j) * s[j]);
                }
            }
            let rec = us.matmul(&v.transpose());
            let mut diff = rec.clone();
            diff.add_scaled(&a, -1.0);
            assert!(diff.frob_norm() <= 1e-11 * a.frob_norm().max(1.0));
            // singular values against nalgebra
            let na = nalgebra::DMatrix::from_row_slice(m, n, &a.data);
            let na_svd = na.svd(false, false);
            let mut na_s: Vec<f64> = na_svd.singular_values.iter().cloned().collect();
            na_s.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for (ours, theirs) in s.iter().zip(&na_s) {
                assert!((ours - theirs).abs() <= 1e-10 * na_s[0].max(1.0));
            }
        }
    }

    proptest! {
        #[test]
        fn svd_orthonormal_u(seed in 0u64..200, m in 1usize..9, n in 1usize..9) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = rand_mat(&mut rng, m, n);
            let (u, s, _v) = svd(&a).unwrap();
            let r = m.min(n);
            for i in 0..r {
                for j in 0..r {
                    if s[i] == 0.0 || s[j] == 0.0 { continue; }
                    let d = dot(&u.col(i), &u.col(j));
                    let expect = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((d - expect).abs() < 1e-10);
                }
            }
        }
    }
}
