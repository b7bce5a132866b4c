//! Bayesian belief states and their update rules.
//!
//! Three belief families are kept here:
//!
//! * [`LookupBelief`]: a multivariate normal directly over the alternative values.
//! * [`LinearBelief`]: a normal prior on the coefficients of a linear model, updated
//!   by recursive least squares.
//! * [`SparseBeliefState`]: the coefficient belief conditional on every group being
//!   active, paired with independent Beta-Bernoulli inclusion counts per group.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim, invalid, Error, Result};
use crate::linalg::{spd_inverse, submatrix, subvector, symmetrize};

const FUSION_JITTER: f64 = 1e-10;

/// Partition of the feature indices `0..m` into disjoint groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStructure {
    groups: Vec<Vec<usize>>,
    group_of: Vec<usize>,
}

impl GroupStructure {
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Empty("group structure"));
        }
        let m: usize = groups.iter().map(Vec::len).sum();
        let mut group_of = vec![usize::MAX; m];
        for (j, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(invalid(format!("group {j} is empty")));
            }
            for &k in g {
                if k >= m {
                    return Err(invalid(format!("feature {k} outside 0..{m}")));
                }
                if group_of[k] != usize::MAX {
                    return Err(invalid(format!("feature {k} appears in two groups")));
                }
                group_of[k] = j;
            }
        }
        Ok(Self { groups, group_of })
    }

    /// Consecutive groups with the given sizes.
    pub fn contiguous(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let groups = sizes
            .iter()
            .map(|&d| {
                let g: Vec<usize> = (start..start + d).collect();
                start += d;
                g
            })
            .collect();
        Self::new(groups)
    }

    /// `p` consecutive groups of `d` features each.
    pub fn uniform(p: usize, d: usize) -> Result<Self> {
        Self::contiguous(&vec![d; p])
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_features(&self) -> usize {
        self.group_of.len()
    }

    pub fn group(&self, j: usize) -> &[usize] {
        &self.groups[j]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_of(&self, k: usize) -> usize {
        self.group_of[k]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Largest group size, d̄.
    pub fn max_size(&self) -> usize {
        self.groups.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Sorted union of the features belonging to `groups`.
    pub fn features_of(&self, groups: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = groups.iter().flat_map(|&j| self.groups[j].iter().copied()).collect();
        out.sort_unstable();
        out
    }
}

/// Correlated normal belief over the alternative values themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupBelief {
    pub theta: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl LookupBelief {
    pub fn new(theta: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        check_square(&sigma, theta.len(), "lookup covariance")?;
        Ok(Self { theta, sigma })
    }
}

/// Bayesian update after observing `y` at alternative `x`.
pub fn lookup_update(belief: &LookupBelief, x: usize, y: f64, noise_var: f64) -> Result<LookupBelief> {
    let n = belief.theta.len();
    if x >= n {
        return Err(Error::OutOfRange { index: x, len: n });
    }
    check_noise(noise_var)?;
    let denom = noise_var + belief.sigma[(x, x)];
    if denom <= 0.0 {
        return Err(Error::NonpositiveVariance(denom));
    }
    let col = belief.sigma.column(x).into_owned();
    let theta = &belief.theta + &col * ((y - belief.theta[x]) / denom);
    let mut sigma = &belief.sigma - (&col * col.transpose()) / denom;
    symmetrize(&mut sigma);
    Ok(LookupBelief { theta, sigma })
}

/// Normal belief `α ~ N(ϑ, Σ^ϑ)` on linear-model coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBelief {
    pub vartheta: DVector<f64>,
    pub sigma_vartheta: DMatrix<f64>,
}

impl LinearBelief {
    pub fn new(vartheta: DVector<f64>, sigma_vartheta: DMatrix<f64>) -> Result<Self> {
        check_square(&sigma_vartheta, vartheta.len(), "coefficient covariance")?;
        Ok(Self { vartheta, sigma_vartheta })
    }

    /// Zero mean, `variance · I` covariance.
    pub fn isotropic(m: usize, variance: f64) -> Self {
        Self {
            vartheta: DVector::zeros(m),
            sigma_vartheta: DMatrix::identity(m, m) * variance,
        }
    }

    /// Induced belief on the alternative values `X̃ α`.
    pub fn induced(&self, alternatives: &DMatrix<f64>) -> Result<LookupBelief> {
        if alternatives.ncols() != self.vartheta.len() {
            return Err(dim("alternative matrix columns must match coefficient count"));
        }
        let theta = alternatives * &self.vartheta;
        let mut sigma = alternatives * &self.sigma_vartheta * alternatives.transpose();
        symmetrize(&mut sigma);
        Ok(LookupBelief { theta, sigma })
    }
}

/// Recursive least squares update with feature vector `x_feat`.
pub fn rls_update(belief: &LinearBelief, x_feat: &DVector<f64>, y: f64, noise_var: f64) -> Result<LinearBelief> {
    if x_feat.len() != belief.vartheta.len() {
        return Err(dim(format!(
            "feature vector has length {}, belief has {}",
            x_feat.len(),
            belief.vartheta.len()
        )));
    }
    check_noise(noise_var)?;
    let sx = &belief.sigma_vartheta * x_feat;
    let gamma = noise_var + x_feat.dot(&sx);
    let resid = y - belief.vartheta.dot(x_feat);
    let vartheta = &belief.vartheta + &sx * (resid / gamma);
    let mut sigma_vartheta = &belief.sigma_vartheta - (&sx * sx.transpose()) / gamma;
    symmetrize(&mut sigma_vartheta);
    Ok(LinearBelief { vartheta, sigma_vartheta })
}

/// Beta-Bernoulli counts for one group's inclusion indicator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaCounts {
    pub xi: f64,
    pub eta: f64,
}

impl BetaCounts {
    pub fn new(xi: f64, eta: f64) -> Result<Self> {
        let c = Self { xi, eta };
        c.validate()?;
        Ok(c)
    }

    /// Counts must be finite and nonnegative with a positive total. A zero on one
    /// side encodes a group whose status is known with certainty.
    pub fn validate(&self) -> Result<()> {
        let ok = self.xi.is_finite() && self.eta.is_finite() && self.xi >= 0.0 && self.eta >= 0.0 && self.xi + self.eta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("beta counts must be nonnegative with positive sum, got ({}, {})", self.xi, self.eta)))
        }
    }

    /// Posterior mean of the inclusion probability, ξ/(ξ+η).
    pub fn inclusion_probability(&self) -> f64 {
        self.xi / (self.xi + self.eta)
    }
}

/// Full Bayesian state of the sparse policies: coefficient belief conditional on
/// all groups being active, plus per-group inclusion counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBeliefState {
    pub vartheta: DVector<f64>,
    pub sigma_vartheta: DMatrix<f64>,
    pub beta_counts: Vec<BetaCounts>,
    pub groups: GroupStructure,
}

impl SparseBeliefState {
    pub fn new(
        vartheta: DVector<f64>,
        sigma_vartheta: DMatrix<f64>,
        beta_counts: Vec<BetaCounts>,
        groups: GroupStructure,
    ) -> Result<Self> {
        let s = Self { vartheta, sigma_vartheta, beta_counts, groups };
        s.validate()?;
        Ok(s)
    }

    /// Zero mean, `variance · I` covariance and uniform `(ξ⁰, η⁰)` counts.
    pub fn with_isotropic_prior(groups: GroupStructure, variance: f64, xi0: f64, eta0: f64) -> Result<Self> {
        let m = groups.n_features();
        let counts = vec![BetaCounts::new(xi0, eta0)?; groups.n_groups()];
        Self::new(DVector::zeros(m), DMatrix::identity(m, m) * variance, counts, groups)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.groups.n_features();
        if self.vartheta.len() != m {
            return Err(dim(format!("mean has length {}, groups cover {m}", self.vartheta.len())));
        }
        check_square(&self.sigma_vartheta, m, "coefficient covariance")?;
        if self.beta_counts.len() != self.groups.n_groups() {
            return Err(dim("one (xi, eta) pair is required per group"));
        }
        self.beta_counts.iter().try_for_each(BetaCounts::validate)
    }

    pub fn n_groups(&self) -> usize {
        self.groups.n_groups()
    }

    pub fn as_linear(&self) -> LinearBelief {
        LinearBelief {
            vartheta: self.vartheta.clone(),
            sigma_vartheta: self.sigma_vartheta.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&SparseBeliefDoc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: SparseBeliefDoc = serde_json::from_str(s)?;
        doc.try_into()
    }
}

/// JSON checkpoint layout of a [`SparseBeliefState`].
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SparseBeliefDoc {
    vartheta: Vec<f64>,
    sigma_vartheta: Vec<Vec<f64>>,
    beta_counts: Vec<[f64; 2]>,
    groups: Vec<Vec<usize>>,
}

impl From<&SparseBeliefState> for SparseBeliefDoc {
    fn from(s: &SparseBeliefState) -> Self {
        let sig = &s.sigma_vartheta;
        Self {
            vartheta: s.vartheta.iter().copied().collect(),
            sigma_vartheta: (0..sig.nrows()).map(|i| sig.row(i).iter().copied().collect()).collect(),
            beta_counts: s.beta_counts.iter().map(|c| [c.xi, c.eta]).collect(),
            groups: s.groups.groups().to_vec(),
        }
    }
}

impl TryFrom<SparseBeliefDoc> for SparseBeliefState {
    type Error = Error;

    fn try_from(doc: SparseBeliefDoc) -> Result<Self> {
        let m = doc.vartheta.len();
        if doc.sigma_vartheta.len() != m || doc.sigma_vartheta.iter().any(|r| r.len() != m) {
            return Err(dim("sigma_vartheta must be square and match vartheta"));
        }
        let sigma = DMatrix::from_fn(m, m, |i, j| doc.sigma_vartheta[i][j]);
        let counts = doc.beta_counts.iter().map(|&[xi, eta]| BetaCounts { xi, eta }).collect();
        SparseBeliefState::new(DVector::from_vec(doc.vartheta), sigma, counts, GroupStructure::new(doc.groups)?)
    }
}

/// Precision-weighted fusion of the belief with a Lasso estimate on the index set `support`.
///
/// On the support block the posterior is
/// `Σ' = (Σ_S⁻¹ + Σ̂_S⁻¹)⁻¹` and `ϑ' = Σ' (Σ_S⁻¹ ϑ_S + Σ̂_S⁻¹ ϑ̂_S)`.
/// The mean and covariance outside the support are left as they are; the
/// cross-covariance between the support and the rest is carried along by
/// `Σ'_{S,Sᶜ} = Σ' Σ_S⁻¹ Σ_{S,Sᶜ}`, which keeps the joint matrix positive semidefinite.
pub fn fuse_posterior(
    state: &SparseBeliefState,
    lasso_mean: &DVector<f64>,
    lasso_cov: &DMatrix<f64>,
    support: &[usize],
) -> Result<SparseBeliefState> {
    if support.is_empty() {
        return Ok(state.clone());
    }
    check_square(lasso_cov, support.len(), "lasso covariance")?;
    let lasso_prec = spd_inverse(lasso_cov, FUSION_JITTER).ok_or(Error::SingularPrecision)?;
    fuse_posterior_precision(state, lasso_mean, &lasso_prec, support)
}

/// [`fuse_posterior`] with the Lasso estimate given by its precision matrix, which
/// may be singular along directions the data do not identify.
pub fn fuse_posterior_precision(
    state: &SparseBeliefState,
    lasso_mean: &DVector<f64>,
    lasso_prec: &DMatrix<f64>,
    support: &[usize],
) -> Result<SparseBeliefState> {
    let m = state.vartheta.len();
    let s = support.len();
    if s == 0 {
        return Ok(state.clone());
    }
    if lasso_mean.len() != s {
        return Err(dim("lasso mean must have one entry per support index"));
    }
    check_square(lasso_prec, s, "lasso precision")?;
    if let Some(&bad) = support.iter().find(|&&k| k >= m) {
        return Err(Error::OutOfRange { index: bad, len: m });
    }

    let prior_cov = submatrix(&state.sigma_vartheta, support, support);
    let prior_mean = subvector(&state.vartheta, support);
    let prior_prec = spd_inverse(&prior_cov, FUSION_JITTER).ok_or(Error::SingularPrecision)?;
    let post_cov = spd_inverse(&(&prior_prec + lasso_prec), FUSION_JITTER).ok_or(Error::SingularPrecision)?;
    let post_mean = &post_cov * (&prior_prec * &prior_mean + lasso_prec * lasso_mean);

    let mut in_support = vec![false; m];
    for &k in support {
        in_support[k] = true;
    }
    let rest: Vec<usize> = (0..m).filter(|&k| !in_support[k]).collect();

    let mut out = state.clone();
    for (a, &i) in support.iter().enumerate() {
        out.vartheta[i] = post_mean[a];
        for (b, &j) in support.iter().enumerate() {
            out.sigma_vartheta[(i, j)] = post_cov[(a, b)];
        }
    }
    if !rest.is_empty() {
        let cross = submatrix(&state.sigma_vartheta, support, &rest);
        if cross.iter().any(|v| *v != 0.0) {
            let new_cross = &post_cov * (&prior_prec * cross);
            for (a, &i) in support.iter().enumerate() {
                for (b, &j) in rest.iter().enumerate() {
                    out.sigma_vartheta[(i, j)] = new_cross[(a, b)];
                    out.sigma_vartheta[(j, i)] = new_cross[(a, b)];
                }
            }
        }
    }
    Ok(out)
}

/// Increment ξ for every selected group and η for every other group.
pub fn beta_bernoulli_update(state: &SparseBeliefState, selected_groups: &[usize]) -> SparseBeliefState {
    let mut out = state.clone();
    let mut selected = vec![false; state.n_groups()];
    for &j in selected_groups {
        if j < selected.len() {
            selected[j] = true;
        }
    }
    for (c, sel) in out.beta_counts.iter_mut().zip(selected) {
        if sel {
            c.xi += 1.0;
        } else {
            c.eta += 1.0;
        }
    }
    out
}

fn check_square(m: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(dim(format!("{what} is {}x{}, expected {n}x{n}", m.nrows(), m.ncols())));
    }
    Ok(())
}

fn check_noise(noise_var: f64) -> Result<()> {
    if noise_var > 0.0 && noise_var.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("noise variance must be positive, got {noise_var}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use nalgebra::dvector;

    #[test]
    fn lookup_update_identity_prior() {
        let b = LookupBelief::new(dvector![0.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        let post = lookup_update(&b, 0, 1.0, 1.0).unwrap();
        assert_relative_eq!(post.theta, dvector![0.5, 0.0], epsilon = 1e-15);
        assert_relative_eq!(post.sigma, dmatrix![0.5, 0.0; 0.0, 1.0], epsilon = 1e-15);
    }

    #[test]
    fn lookup_update_at_mean_only_shrinks() {
        let b = LookupBelief::new(dvector![2.0, -1.0], DMatrix::identity(2, 2) * 3.0).unwrap();
        let post = lookup_update(&b, 1, -1.0, 1.0).unwrap();
        assert_eq!(post.theta, b.theta);
        assert!(post.sigma[(1, 1)] < b.sigma[(1, 1)]);
    }

    #[test]
    fn lookup_update_correlated() {
        let b = LookupBelief::new(dvector![0.0, 0.0], dmatrix![1.0, 0.5; 0.5, 1.0]).unwrap();
        let post = lookup_update(&b, 0, 1.0, 1.0).unwrap();
        assert_relative_eq!(post.theta, dvector![0.5, 0.25], epsilon = 1e-15);
    }

    #[test]
    fn lookup_update_rejects_bad_index() {
        let b = LookupBelief::new(dvector![0.0], DMatrix::identity(1, 1)).unwrap();
        assert!(matches!(lookup_update(&b, 3, 0.0, 1.0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn rls_basic() {
        let b = LinearBelief::isotropic(2, 1.0);
        let post = rls_update(&b, &dvector![1.0, 0.0], 2.0, 1.0).unwrap();
        assert_relative_eq!(post.vartheta, dvector![1.0, 0.0], epsilon = 1e-15);
        assert_relative_eq!(post.sigma_vartheta, dmatrix![0.5, 0.0; 0.0, 1.0], epsilon = 1e-15);
    }

    #[test]
    fn rls_zero_features_is_noop() {
        let b = LinearBelief::new(dvector![1.0, -2.0], dmatrix![2.0, 0.3; 0.3, 1.0]).unwrap();
        let post = rls_update(&b, &dvector![0.0, 0.0], 5.0, 0.7).unwrap();
        assert_eq!(post, b);
    }

    #[test]
    fn fusion_scalar() {
        let groups = GroupStructure::uniform(1, 1).unwrap();
        let s = SparseBeliefState::with_isotropic_prior(groups, 1.0, 1.0, 1.0).unwrap();
        let post = fuse_posterior(&s, &dvector![1.0], &dmatrix![1.0], &[0]).unwrap();
        assert_relative_eq!(post.vartheta[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(post.sigma_vartheta[(0, 0)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn fusion_uninformative_lasso() {
        let groups = GroupStructure::uniform(1, 2).unwrap();
        let s = SparseBeliefState::new(
            dvector![1.0, -1.0],
            dmatrix![2.0, 0.4; 0.4, 1.0],
            vec![BetaCounts::new(1.0, 1.0).unwrap()],
            groups,
        )
        .unwrap();
        let post = fuse_posterior(&s, &dvector![5.0, 5.0], &(DMatrix::identity(2, 2) * 1e8), &[0, 1]).unwrap();
        assert_relative_eq!(post.vartheta, s.vartheta, epsilon = 1e-6);
        assert_relative_eq!(post.sigma_vartheta, s.sigma_vartheta, epsilon = 1e-6);
    }

    #[test]
    fn fusion_leaves_outside_support_untouched() {
        let groups = GroupStructure::uniform(2, 1).unwrap();
        let s = SparseBeliefState::with_isotropic_prior(groups, 4.0, 1.0, 1.0).unwrap();
        let post = fuse_posterior(&s, &dvector![3.0], &dmatrix![4.0], &[1]).unwrap();
        assert_eq!(post.vartheta[0], 0.0);
        assert_eq!(post.sigma_vartheta[(0, 0)], 4.0);
        assert_eq!(post.sigma_vartheta[(0, 1)], 0.0);
        assert_relative_eq!(post.vartheta[1], 1.5, epsilon = 1e-14);
    }

    #[test]
    fn beta_update_rules() {
        let groups = GroupStructure::uniform(3, 1).unwrap();
        let s = SparseBeliefState::with_isotropic_prior(groups, 1.0, 1.0, 1.0).unwrap();
        let one = beta_bernoulli_update(&s, &[1]);
        assert_eq!(one.beta_counts[1], BetaCounts { xi: 2.0, eta: 1.0 });
        assert_relative_eq!(one.beta_counts[1].inclusion_probability(), 2.0 / 3.0);
        assert_eq!(one.beta_counts[0], BetaCounts { xi: 1.0, eta: 2.0 });

        let mut st = s.clone();
        for _ in 0..7 {
            st = beta_bernoulli_update(&st, &[0, 2]);
        }
        assert_eq!(st.beta_counts[1], BetaCounts { xi: 1.0, eta: 8.0 });

        let all = beta_bernoulli_update(&s, &[0, 1, 2]);
        assert!(all.beta_counts.iter().all(|c| c.xi == 2.0 && c.eta == 1.0));
    }

    #[test]
    fn groups_reject_overlap() {
        assert!(GroupStructure::new(vec![vec![0, 1], vec![1]]).is_err());
        assert!(GroupStructure::new(vec![vec![0, 2]]).is_err());
        let g = GroupStructure::contiguous(&[2, 3]).unwrap();
        assert_eq!(g.max_size(), 3);
        assert_eq!(g.group_of(4), 1);
    }

    #[test]
    fn json_checkpoint_roundtrip() {
        let groups = GroupStructure::contiguous(&[1, 2]).unwrap();
        let mut s = SparseBeliefState::with_isotropic_prior(groups, 2.5, 1.0, 3.0).unwrap();
        s.vartheta[2] = -0.125;
        s.vartheta[0] = 1.0 / 3.0;
        s.sigma_vartheta[(0, 2)] = 0.1;
        s.sigma_vartheta[(2, 0)] = 0.1;
        let text = s.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["vartheta", "sigma_vartheta", "beta_counts", "groups"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(SparseBeliefState::from_json(&text).unwrap(), s);
    }
}
