//! Sampled covariance of the Lasso estimate on its support.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{extract_subgradient, LassoState};
use crate::belief::{GroupStructure, SparseBeliefState};
use crate::error::{invalid, Error, Result};
use crate::linalg::{psd_factor, submatrix, subvector, sym_eigen, symmetrize};

/// Condition number above which the support Gram block is ridged before inversion.
const MAX_COND: f64 = 1e12;
const RIDGE: f64 = 1e-8;

/// Monte-Carlo and truncation settings for [`estimate_covariance`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceOptions {
    pub n_samples: usize,
    pub c_min: f64,
    pub c_max: f64,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        Self { n_samples: 500, c_min: 0.01, c_max: 100.0 }
    }
}

/// Covariance of the Lasso estimate restricted to the support coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    /// `Σ̂ = M σ² + λ² M C̃ M` with `M = (R_S)⁻¹`.
    pub sigma_hat: DMatrix<f64>,
    /// `R_S (σ² R_S + λ² C̃)⁻¹ R_S`, which equals `Σ̂⁻¹` whenever `R_S` is invertible
    /// and stays well defined (with zero precision along unidentified directions)
    /// when it is not.
    pub precision: DMatrix<f64>,
    /// Lasso coefficients on the support.
    pub mean: DVector<f64>,
    pub support: Vec<usize>,
    pub sample_count: usize,
}

/// Clamp the eigenvalues of a symmetric matrix into `[c_min, c_max]`.
pub fn eigen_truncate(matrix: &DMatrix<f64>, c_min: f64, c_max: f64) -> DMatrix<f64> {
    let (values, v) = sym_eigen(matrix);
    let d = values.map(|x| x.clamp(c_min, c_max));
    let v = &v;
    let mut out = v * DMatrix::from_diagonal(&d) * v.transpose();
    symmetrize(&mut out);
    out
}

fn support_inverse(r_s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = r_s.nrows();
    let eig = sym_eigen(r_s).0;
    let lo = eig.min();
    let hi = eig.max();
    let well_posed = lo > 0.0 && hi / lo <= MAX_COND;
    let mut a = r_s.clone();
    if !well_posed {
        let ridge = RIDGE * r_s.trace().max(0.0) / s as f64;
        let ridge = if ridge > 0.0 { ridge } else { RIDGE };
        for i in 0..s {
            a[(i, i)] += ridge;
        }
    }
    let mut m = Cholesky::new(a).ok_or(Error::Singular("support Gram block"))?.inverse();
    symmetrize(&mut m);
    Ok(m)
}

/// Sample covariance of the subgradients at draws from `N(mean, cov)`.
fn subgradient_covariance(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    local_groups: &GroupStructure,
    n_samples: usize,
    seed: u64,
) -> DMatrix<f64> {
    let s = mean.len();
    if n_samples < 2 {
        return DMatrix::zeros(s, s);
    }
    let factor = psd_factor(cov);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = DMatrix::from_fn(s, n_samples, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut draws = factor * xi;
    for mut col in draws.column_iter_mut() {
        col += mean;
        let z = extract_subgradient(&col.clone_owned(), local_groups);
        col.copy_from(&z);
    }
    let avg = draws.column_mean();
    for mut col in draws.column_iter_mut() {
        col -= &avg;
    }
    let mut out = &draws * draws.transpose() / (n_samples - 1) as f64;
    symmetrize(&mut out);
    out
}

/// Covariance estimate of the Lasso coefficients on the support of `state`.
///
/// Coefficient vectors are drawn from the belief restricted to the support,
/// their subgradients give a sample covariance that is eigenvalue-truncated into
/// `[c_min, c_max]`, and the result is propagated through `M = (R_S)⁻¹`.
pub fn estimate_covariance(
    state: &LassoState,
    belief: &SparseBeliefState,
    noise_var: f64,
    lambda_next: f64,
    options: &CovarianceOptions,
    seed: u64,
) -> Result<CovarianceEstimate> {
    if !(options.c_min > 0.0 && options.c_min <= options.c_max) {
        return Err(invalid("need 0 < c_min <= c_max"));
    }
    if !(noise_var > 0.0) {
        return Err(invalid("noise variance must be positive"));
    }
    let support = state.support_coordinates();
    if support.is_empty() {
        return Err(Error::Empty("lasso support"));
    }
    let r_s = submatrix(&state.gram, &support, &support);
    let m = support_inverse(&r_s)?;

    // Active groups re-expressed in support-local positions.
    let slot = |k: usize| support.binary_search(&k).expect("support coordinate");
    let local_groups = GroupStructure::new(
        state
            .partition()
            .active()
            .iter()
            .map(|g| {
                let mut pos: Vec<usize> = g.max_set.iter().map(|&(k, _)| slot(k)).chain(g.rest.iter().map(|&k| slot(k))).collect();
                pos.sort_unstable();
                pos
            })
            .collect(),
    )?;

    let mean_s = subvector(&belief.vartheta, &support);
    let cov_s = submatrix(&belief.sigma_vartheta, &support, &support);
    let sample = subgradient_covariance(&mean_s, &cov_s, &local_groups, options.n_samples, seed);
    let c_tilde = eigen_truncate(&sample, options.c_min, options.c_max);

    let lam2 = lambda_next * lambda_next;
    let mut sigma_hat = &m * noise_var + (&m * &c_tilde * &m) * lam2;
    symmetrize(&mut sigma_hat);

    let mut precision = if lam2 == 0.0 {
        &r_s / noise_var
    } else {
        let inner = &r_s * noise_var + &c_tilde * lam2;
        let chol = Cholesky::new(inner).ok_or(Error::Singular("lasso precision"))?;
        &r_s * chol.solve(&r_s)
    };
    symmetrize(&mut precision);

    Ok(CovarianceEstimate {
        sigma_hat,
        precision,
        mean: subvector(&state.beta, &support),
        support,
        sample_count: options.n_samples,
    })
}
