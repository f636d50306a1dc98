//! Small dense helpers shared by the numerical modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Strongly connected components of a directed graph given as a row-major
/// `n x n` adjacency matrix. Components come back sorted by smallest member.
pub(crate) fn strongly_connected_classes(adj: &[bool], n: usize) -> Vec<Vec<usize>> {
    // reachability closure is fine at the sizes we handle (L is small)
    let mut reach = adj.to_vec();
    for i in 0..n {
        reach[i * n + i] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i * n + k] {
                for j in 0..n {
                    if reach[k * n + j] {
                        reach[i * n + j] = true;
                    }
                }
            }
        }
    }
    let mut seen = vec![false; n];
    let mut classes = Vec::new();
    for i in 0..n {
        if seen[i] {
            continue;
        }
        let class: Vec<usize> = (0..n).filter(|&j| reach[i * n + j] && reach[j * n + i]).collect();
        for &j in &class {
            seen[j] = true;
        }
        classes.push(class);
    }
    classes
}

/// Solves the stationary equations `pi Q = 0`, `sum pi = 1` by replacing the
/// last balance equation with the normalization.
pub(crate) fn stationary_lu(q: &DMatrix<f64>) -> Option<DVector<f64>> {
    let n = q.nrows();
    let mut a = q.transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    a.lu().solve(&rhs)
}

/// Moore-Penrose pseudo-inverse of a symmetric positive semidefinite matrix.
/// Eigenvalues below `rel_tol * lambda_max` are treated as zero. Also returns
/// the orthogonal projector onto the null space.
pub(crate) fn psd_pinv(g: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = g.nrows();
    let eig = SymmetricEigen::new(g.clone());
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let cut = rel_tol * lmax.max(f64::MIN_POSITIVE);
    let mut pinv = DMatrix::zeros(n, n);
    let mut null = DMatrix::zeros(n, n);
    for k in 0..n {
        let v = eig.eigenvectors.column(k);
        let outer = &v * v.transpose();
        let lam = eig.eigenvalues[k];
        if lam > cut {
            pinv += outer / lam;
        } else {
            null += outer;
        }
    }
    (pinv, null)
}

/// Orthonormal basis of the null space of `a` (columns), via SVD.
pub(crate) fn null_space(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (r, c) = a.shape();
    if r == 0 {
        return DMatrix::identity(c, c);
    }
    // pad to a square matrix so the SVD returns a full right basis
    let mut sq = DMatrix::zeros(c.max(r), c);
    sq.view_mut((0, 0), (r, c)).copy_from(a);
    let svd = sq.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = rel_tol * smax.max(f64::MIN_POSITIVE);
    let cols: Vec<DVector<f64>> = (0..vt.nrows())
        .filter(|&k| svd.singular_values[k] <= cut)
        .map(|k| vt.row(k).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(c, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scc_of_cycle_and_chain() {
        let cycle = [false, true, false, false, false, true, true, false, false];
        assert_eq!(strongly_connected_classes(&cycle, 3), vec![vec![0, 1, 2]]);
        let chain = [false, true, false, false];
        assert_eq!(strongly_connected_classes(&chain, 2), vec![vec![0], vec![1]]);
    }

    #[test]
    fn pinv_of_rank_one() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (p, n) = psd_pinv(&g, 1e-10);
        // pinv of 11^T is 11^T / 4
        for v in p.iter() {
            assert!((v - 0.25).abs() < 1e-14);
        }
        assert!((n[(0, 0)] - 0.5).abs() < 1e-14 && (n[(0, 1)] + 0.5).abs() < 1e-14);
    }

    #[test]
    fn null_space_of_row() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let n = null_space(&a, 1e-12);
        assert_eq!(n.ncols(), 2);
        assert!((&a * &n).norm() < 1e-14);
    }
}
