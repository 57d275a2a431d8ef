use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Pivots below this fraction of the largest entry are treated as zero.
pub(crate) const PIVOT_TOL: f64 = 1e-10;
/// Residual allowed on the rows dropped as dependent, relative to `|b|`.
pub(crate) const CONSISTENCY_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Inconsistent {
    pub residual: f64,
}

/// Solves `a x = b` by Gaussian elimination with complete pivoting.
///
/// Rank deficiency is allowed as long as the system stays consistent: the
/// elimination stops at the first negligible pivot, the remaining equations
/// must be satisfied to within [`CONSISTENCY_TOL`], and free unknowns are
/// set to zero. Returns the solution and the detected rank.
pub(crate) fn solve_rank_revealing(
    a: &DMatrix<Complex64>,
    b: &DVector<Complex64>,
) -> Result<(DVector<Complex64>, usize), Inconsistent> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    debug_assert_eq!(n, b.len());
    let mut m = a.clone();
    let mut rhs = b.clone();
    let mut cols: Vec<usize> = (0..n).collect();
    let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let b_scale = rhs.iter().map(|z| z.norm()).fold(0.0, f64::max);

    let mut rank = 0;
    for k in 0..n {
        let mut best = (k, k, 0.0);
        for j in k..n {
            for i in k..n {
                let v = m[(i, j)].norm();
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        if best.2 <= PIVOT_TOL * scale || best.2 == 0.0 {
            break;
        }
        let (pi, pj, _) = best;
        if pi != k {
            m.swap_rows(k, pi);
            rhs.swap_rows(k, pi);
        }
        if pj != k {
            m.swap_columns(k, pj);
            cols.swap(k, pj);
        }
        let pivot = m[(k, k)];
        for i in k + 1..n {
            let f = m[(i, k)] / pivot;
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            for j in k..n {
                let t = m[(k, j)];
                m[(i, j)] -= f * t;
            }
            let t = rhs[k];
            rhs[i] -= f * t;
        }
        rank = k + 1;
    }

    let residual = (rank..n).map(|i| rhs[i].norm()).fold(0.0, f64::max);
    if residual > CONSISTENCY_TOL * b_scale.max(f64::MIN_POSITIVE) {
        return Err(Inconsistent { residual });
    }

    let mut y = DVector::<Complex64>::zeros(n);
    for k in (0..rank).rev() {
        let mut acc = rhs[k];
        for j in k + 1..rank {
            acc -= m[(k, j)] * y[j];
        }
        y[k] = acc / m[(k, k)];
    }
    let mut x = DVector::<Complex64>::zeros(n);
    for k in 0..n {
        x[cols[k]] = y[k];
    }
    Ok((x, rank))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn full_rank_matches_lu() {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[c(4.0), c(1.0), c(2.0), c(1.0), c(5.0), c(0.5), c(2.0), c(0.5), c(6.0)],
        );
        let b = DVector::from_vec(vec![c(1.0), c(-2.0), c(3.0)]);
        let (x, rank) = solve_rank_revealing(&a, &b).unwrap();
        assert_eq!(rank, 3);
        let reference = a.clone().lu().solve(&b).unwrap();
        assert!((x - reference).norm() < 1e-12);
    }

    #[test]
    fn consistent_singular_system() {
        // Third row = first + second.
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[c(2.0), c(1.0), c(0.0), c(1.0), c(3.0), c(1.0), c(3.0), c(4.0), c(1.0)],
        );
        let b = DVector::from_vec(vec![c(1.0), c(2.0), c(3.0)]);
        let (x, rank) = solve_rank_revealing(&a, &b).unwrap();
        assert_eq!(rank, 2);
        assert!((&a * &x - &b).norm() < 1e-12);
    }

    #[test]
    fn inconsistent_singular_system() {
        let a = DMatrix::from_row_slice(2, 2, &[c(1.0), c(1.0), c(1.0), c(1.0)]);
        let b = DVector::from_vec(vec![c(1.0), c(2.0)]);
        assert!(solve_rank_revealing(&a, &b).is_err());
    }

    #[test]
    fn zero_matrix_with_zero_rhs() {
        let a = DMatrix::<Complex64>::zeros(2, 2);
        let b = DVector::<Complex64>::zeros(2);
        let (x, rank) = solve_rank_revealing(&a, &b).unwrap();
        assert_eq!(rank, 0);
        assert_eq!(x.norm(), 0.0);
    }
}
