//! Orthonormalization, rank, null-space bases, and the Moore–Penrose
//! pseudo-inverse.
//!
//! The null space is computed by modified Gram–Schmidt with column pivoting
//! and reorthogonalization. The pseudo-inverse is delegated to nalgebra's
//! SVD; the two give independent routes to the same projector, which the
//! tests exploit.

use crate::error::Result;
use crate::num::matrix::{dot, norm, Matrix};

/// Default relative rank tolerance (against the largest column norm or
/// singular value).
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Orthonormal basis of the column span of `a`, via modified Gram–Schmidt
/// with column pivoting. Columns whose residual falls below
/// `tol * max_column_norm` are dropped. Returns a D x rank matrix
/// (possibly with zero columns).
pub fn orthonormal_range_basis(a: &Matrix, tol: f64) -> Matrix {
    let d = a.rows();
    let m = a.cols();
    let mut cols: Vec<Vec<f64>> = (0..m).map(|c| a.column(c)).collect();
    let max_norm = cols.iter().map(|c| norm(c)).fold(0.0_f64, f64::max);
    let thresh = tol * max_norm;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    if max_norm == 0.0 {
        return from_columns(d, &basis);
    }
    loop {
        // pivot: remaining column with the largest residual norm
        let (pivot, pnorm) = match cols
            .iter()
            .enumerate()
            .map(|(i, c)| (i, norm(c)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
        {
            Some(p) => p,
            None => break,
        };
        if pnorm <= thresh {
            break;
        }
        let mut q = cols.swap_remove(pivot);
        // reorthogonalize twice against the accepted basis
        for _ in 0..2 {
            for b in &basis {
                let proj = dot(&q, b);
                for (qi, bi) in q.iter_mut().zip(b) {
                    *qi -= proj * bi;
                }
            }
        }
        let qn = norm(&q);
        if qn <= thresh {
            continue;
        }
        for qi in q.iter_mut() {
            *qi /= qn;
        }
        // deflate the remaining columns
        for c in cols.iter_mut() {
            let proj = dot(c, &q);
            for (ci, qi) in c.iter_mut().zip(&q) {
                *ci -= proj * qi;
            }
        }
        basis.push(q);
    }
    from_columns(d, &basis)
}

/// Numerical rank of `a` at relative tolerance `tol`.
pub fn rank(a: &Matrix, tol: f64) -> usize {
    orthonormal_range_basis(a, tol).cols()
}

/// Orthonormal basis of {x : aᵀx = 0} for a D x m matrix `a`.
/// Returns a D x (D - rank) matrix; the full identity basis when `a` is zero.
pub fn nullspace_basis(a: &Matrix, tol: f64) -> Matrix {
    let d = a.rows();
    let range = orthonormal_range_basis(a, tol);
    let r = range.cols();
    let mut basis: Vec<Vec<f64>> = (0..r).map(|c| range.column(c)).collect();
    let mut null_cols: Vec<Vec<f64>> = Vec::with_capacity(d - r);
    // complete the range basis to an orthonormal basis of R^D by deflating
    // the standard basis and pivoting on the largest residual; the residuals
    // cannot all vanish while fewer than d vectors are accepted
    let mut candidates: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            for b in &basis {
                let proj = dot(&e, b);
                for (ei, bi) in e.iter_mut().zip(b) {
                    *ei -= proj * bi;
                }
            }
            e
        })
        .collect();
    while null_cols.len() < d - r {
        let (pivot, _) = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (i, norm(c)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("candidates outnumber accepted vectors");
        let mut q = candidates.swap_remove(pivot);
        // reorthogonalize twice against everything accepted so far
        for _ in 0..2 {
            for b in &basis {
                let proj = dot(&q, b);
                for (qi, bi) in q.iter_mut().zip(b) {
                    *qi -= proj * bi;
                }
            }
        }
        let qn = norm(&q);
        for qi in q.iter_mut() {
            *qi /= qn;
        }
        for c in candidates.iter_mut() {
            let proj = dot(c, &q);
            for (ci, qi) in c.iter_mut().zip(&q) {
                *ci -= proj * qi;
            }
        }
        basis.push(q.clone());
        null_cols.push(q);
    }
    from_columns(d, &null_cols)
}

/// Moore–Penrose pseudo-inverse. Singular values below
/// `tol * largest_singular_value` are treated as zero.
pub fn pseudo_inverse(a: &Matrix, tol: f64) -> Matrix {
    let (r, c) = (a.rows(), a.cols());
    if a.max_abs() == 0.0 {
        return Matrix::zeros(c, r);
    }
    let na = nalgebra::DMatrix::from_row_slice(r, c, a.data());
    let svd = na.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let pinv = svd
        .pseudo_inverse(tol * smax)
        .expect("SVD computed with both U and V");
    let mut out = Matrix::zeros(c, r);
    for i in 0..c {
        for j in 0..r {
            out.set(i, j, pinv[(i, j)]);
        }
    }
    out
}

fn from_columns(d: usize, cols: &[Vec<f64>]) -> Matrix {
    let mut m = Matrix::zeros(d, cols.len());
    for (c, col) in cols.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            m.set(r, c, v);
        }
    }
    m
}

/// Verifies the four Penrose conditions to `tol` (test oracle).
pub fn penrose_conditions_hold(a: &Matrix, pinv: &Matrix, tol: f64) -> Result<bool> {
    let apa = a.matmul(pinv)?.matmul(a)?;
    let pap = pinv.matmul(a)?.matmul(pinv)?;
    let ap = a.matmul(pinv)?;
    let pa = pinv.matmul(a)?;
    Ok(apa.sub(a)?.max_abs() <= tol
        && pap.sub(pinv)?.max_abs() <= tol
        && ap.sub(&ap.transpose())?.max_abs() <= tol
        && pa.sub(&pa.transpose())?.max_abs() <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::rng::RngStream;

    #[test]
    fn nullspace_of_e1_in_r3() {
        let v = Matrix::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]).unwrap();
        let n = nullspace_basis(&v, DEFAULT_RANK_TOL);
        assert_eq!(n.cols(), 2);
        // orthonormal and orthogonal to e1
        let gram = n.transpose().matmul(&n).unwrap();
        assert!(gram.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-10);
        let vt_n = v.transpose().matmul(&n).unwrap();
        assert!(vt_n.max_abs() < 1e-10);
    }

    #[test]
    fn nullspace_of_zero_spans_everything() {
        let v = Matrix::zeros(3, 2);
        let n = nullspace_basis(&v, DEFAULT_RANK_TOL);
        assert_eq!(n.cols(), 3);
        let p = n.matmul(&n.transpose()).unwrap();
        assert!(p.sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn nullspace_matches_hand_solved_span() {
        // v0 = (1,-1,-1,0), v1 = (-1,1,0,-1); null space is
        // span{(1,0,1,-1), (0,1,-1,1)} (hand-solved)
        let v = Matrix::from_rows(&[
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
        ])
        .unwrap();
        let n = nullspace_basis(&v, DEFAULT_RANK_TOL);
        assert_eq!(n.cols(), 2);
        // Gram–Schmidt oracle on the hand-solved span
        let span = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
        ])
        .unwrap();
        let q = orthonormal_range_basis(&span, DEFAULT_RANK_TOL);
        // compare projectors, since bases are non-unique
        let p1 = n.matmul(&n.transpose()).unwrap();
        let p2 = q.matmul(&q.transpose()).unwrap();
        assert!(p1.sub(&p2).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn nullspace_basis_orthonormality_random() {
        let mut rng = RngStream::new(5);
        for d in [4usize, 8, 16] {
            for m in [1usize, 2, 3] {
                let v = rng.normal_matrix(d, m, 0.0, 1.0);
                let n = nullspace_basis(&v, DEFAULT_RANK_TOL);
                assert_eq!(n.cols(), d - rank(&v, DEFAULT_RANK_TOL));
                let gram = n.transpose().matmul(&n).unwrap();
                assert!(gram.sub(&Matrix::identity(n.cols())).unwrap().max_abs() < 1e-9);
                let vt_n = v.transpose().matmul(&n).unwrap();
                // normalize columns of v for the absolute-orthogonality bound
                let vmax = (0..m).map(|c| norm(&v.column(c))).fold(0.0_f64, f64::max);
                assert!(vt_n.max_abs() / vmax < 1e-9);
            }
        }
    }

    #[test]
    fn pseudo_inverse_of_invertible_is_inverse() {
        let a = Matrix::from_rows(&[vec![4.0, 7.0], vec![2.0, 6.0]]).unwrap();
        let p = pseudo_inverse(&a, DEFAULT_RANK_TOL);
        // exact inverse: 1/10 * [[6,-7],[-2,4]]
        let inv = Matrix::from_rows(&[vec![0.6, -0.7], vec![-0.2, 0.4]]).unwrap();
        assert!(p.sub(&inv).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn pseudo_inverse_of_zero_is_zero() {
        let z = Matrix::zeros(3, 2);
        let p = pseudo_inverse(&z, DEFAULT_RANK_TOL);
        assert_eq!(p.rows(), 2);
        assert_eq!(p.cols(), 3);
        assert_eq!(p.max_abs(), 0.0);
    }

    #[test]
    fn pseudo_inverse_rank1_satisfies_penrose() {
        let mut rng = RngStream::new(17);
        let u = rng.normal_matrix(3, 1, 0.0, 1.0);
        let w = rng.normal_matrix(1, 3, 0.0, 1.0);
        let a = u.matmul(&w).unwrap();
        let p = pseudo_inverse(&a, DEFAULT_RANK_TOL);
        assert!(penrose_conditions_hold(&a, &p, 1e-8).unwrap());
    }

    #[test]
    fn pseudo_inverse_penrose_on_random_sizes() {
        let mut rng = RngStream::new(23);
        for &(r, c) in &[(5usize, 3usize), (3, 5), (8, 8), (32, 32)] {
            let a = rng.normal_matrix(r, c, 0.0, 1.0);
            let p = pseudo_inverse(&a, DEFAULT_RANK_TOL);
            assert!(penrose_conditions_hold(&a, &p, 1e-8).unwrap());
        }
    }
}
