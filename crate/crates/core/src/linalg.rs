//! Small dense helpers shared by the belief and lasso modules.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

pub(crate) fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub(crate) fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Columns `cols` of `m`, all rows.
pub(crate) fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn mean_diagonal(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1) as f64;
    let t = m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n;
    if t > 0.0 {
        t
    } else {
        1.0
    }
}

/// Inverse of a symmetric positive definite matrix.
///
/// Falls back to a single retry with `jitter * mean|diag|` added to the diagonal
/// when the Cholesky factorization fails. Returns `None` if both attempts fail.
pub(crate) fn spd_inverse(m: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    if let Some(ch) = Cholesky::new(m.clone()) {
        let mut inv = ch.inverse();
        symmetrize(&mut inv);
        if inv.iter().all(|v| v.is_finite()) {
            return Some(inv);
        }
    }
    let mut jittered = m.clone();
    let eps = jitter * mean_diagonal(m);
    for i in 0..m.nrows() {
        jittered[(i, i)] += eps;
    }
    let ch = Cholesky::new(jittered)?;
    let mut inv = ch.inverse();
    symmetrize(&mut inv);
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}

/// Eigenvalues and eigenvectors (as columns) of a symmetric matrix.
///
/// The QR iteration in nalgebra occasionally returns NaN on finite input with
/// many exact zeros; an SVD is used then, with each sign read off `uᵢ·vᵢ`.
pub(crate) fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().chain(eig.eigenvectors.iter()).all(|v| v.is_finite()) {
        return (eig.eigenvalues, eig.eigenvectors);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors");
    let vt = svd.v_t.expect("right singular vectors");
    let values = DVector::from_fn(svd.singular_values.len(), |i, _| {
        let s = svd.singular_values[i];
        if u.column(i).dot(&vt.row(i).transpose()) < 0.0 {
            -s
        } else {
            s
        }
    });
    (values, u)
}

/// Symmetric square root factor `L` with `L Lᵀ = m`, negative eigenvalues clipped to zero.
pub(crate) fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return ch.l();
    }
    let (values, mut v) = sym_eigen(m);
    for (j, lam) in values.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    v
}

#[cfg(test)]
pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(m)
        .0
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn reconstruction_error(m: &DMatrix<f64>) -> f64 {
        let (values, v) = sym_eigen(m);
        let back = &v * DMatrix::from_diagonal(&values) * v.transpose();
        (back - m).amax()
    }

    #[test]
    fn sym_eigen_reconstructs_random_matrices() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for n in [1, 3, 8, 20] {
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let m = &a + a.transpose();
            assert!(reconstruction_error(&m) < 1e-12);
        }
    }

    #[test]
    fn sym_eigen_survives_qr_breakdown() {
        // Subgradient sample covariance on which the QR iteration yields NaN.
        let text = include_str!("../tests/data/eigen_nan_matrix.txt");
        let mut it = text.split_whitespace();
        let n: usize = it.next().unwrap().parse().unwrap();
        let entries: Vec<f64> = it.map(|s| s.parse().unwrap()).collect();
        let m = DMatrix::from_column_slice(n, n, &entries);
        let (values, v) = sym_eigen(&m);
        assert!(values.iter().chain(v.iter()).all(|x| x.is_finite()));
        assert!(values.min() > -1e-12, "sample covariance is PSD");
        assert!(reconstruction_error(&m) < 1e-12);
    }
}
