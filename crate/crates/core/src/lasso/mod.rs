//! Recursive ℓ1,∞ group Lasso.
//!
//! Solves `min_β ½ βᵀRβ − βᵀr + λ Σ_j ‖β_{G_j}‖∞` where `R = Σ x xᵀ` and
//! `r = Σ x y` are the running sufficient statistics. New observations are folded
//! in by path following, first in λ and then in the weight of the new point.

mod covariance;
mod fallback;
mod path;
mod prox;

use nalgebra::{DMatrix, DVector};

pub use covariance::{eigen_truncate, estimate_covariance, CovarianceEstimate, CovarianceOptions};
pub use fallback::fista;
pub use prox::{project_l1_ball, prox_linf_group};

use crate::belief::GroupStructure;
use crate::error::{dim, invalid, Error, Result};
use path::{Homotopy, PathFailure};

/// Relative tolerance for declaring coordinates tied at a group's maximum.
const TIE_REL: f64 = 1e-12;

/// Structure of one active group: coordinates at the group maximum with their
/// signs, and the remaining coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveGroup {
    pub group: usize,
    /// `A_j`: coordinates with `|β_k| = ‖β_G‖∞`, paired with `sgn β_k`.
    pub max_set: Vec<(usize, f64)>,
    /// `B_j`: coordinates strictly inside the maximum that are free to move.
    pub rest: Vec<usize>,
    /// Coordinates of `B_j` with no data yet (zero Gram column); held at zero.
    pub frozen: Vec<usize>,
}

impl ActiveGroup {
    /// Structure of group `j` as it leaves zero with residual `g`: every coordinate
    /// with a nonzero residual starts at the maximum with the residual's sign.
    fn entering(group: usize, members: &[usize], g: &DVector<f64>, gram: &DMatrix<f64>) -> Self {
        let mut out = Self { group, max_set: Vec::new(), rest: Vec::new(), frozen: Vec::new() };
        for &k in members {
            if gram[(k, k)] <= 0.0 {
                out.frozen.push(k);
            } else if g[k] != 0.0 {
                out.max_set.push((k, g[k].signum()));
            } else {
                out.rest.push(k);
            }
        }
        out
    }

    /// Structure read off a coefficient block.
    fn from_beta(group: usize, members: &[usize], beta: &DVector<f64>, gram: &DMatrix<f64>, rel: f64) -> Option<Self> {
        let tau = members.iter().map(|&k| beta[k].abs()).fold(0.0, f64::max);
        if tau == 0.0 {
            return None;
        }
        let mut out = Self { group, max_set: Vec::new(), rest: Vec::new(), frozen: Vec::new() };
        for &k in members {
            if beta[k].abs() >= tau * (1.0 - rel) {
                out.max_set.push((k, beta[k].signum()));
            } else if gram[(k, k)] <= 0.0 && beta[k] == 0.0 {
                out.frozen.push(k);
            } else {
                out.rest.push(k);
            }
        }
        Some(out)
    }
}

/// Active-set partition of the groups (P: active, Q: inactive).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Partition {
    active: Vec<ActiveGroup>,
}

impl Partition {
    fn from_beta(beta: &DVector<f64>, groups: &GroupStructure, gram: &DMatrix<f64>, rel: f64) -> Self {
        let active = (0..groups.n_groups())
            .filter_map(|j| ActiveGroup::from_beta(j, groups.group(j), beta, gram, rel))
            .collect();
        Self { active }
    }

    pub fn active(&self) -> &[ActiveGroup] {
        &self.active
    }

    /// Indices of the active groups, ascending.
    pub fn active_groups(&self) -> Vec<usize> {
        self.active.iter().map(|g| g.group).collect()
    }

    pub fn inactive_groups(&self, groups: &GroupStructure) -> Vec<usize> {
        let act = self.active_groups();
        (0..groups.n_groups()).filter(|j| act.binary_search(j).is_err()).collect()
    }

    /// `C`: all coordinates of inactive groups.
    pub fn inactive_coordinates(&self, groups: &GroupStructure) -> Vec<usize> {
        groups.features_of(&self.inactive_groups(groups))
    }
}

/// Residual-based optimality report for a candidate minimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// Largest violation of the active-group conditions, in the units of `r`.
    pub stationarity: f64,
    /// Largest `‖(r − Rβ)_{G_j}‖₁ − λ` over inactive groups (zero when feasible).
    pub dual_excess: f64,
}

impl KktReport {
    pub fn passes(&self, tol: f64, lambda: f64) -> bool {
        self.stationarity <= tol && self.dual_excess <= tol.max(lambda * tol)
    }
}

/// Sufficient statistics, current minimizer and active structure of the group Lasso.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoState {
    /// Gram matrix `R = Σ x xᵀ`.
    pub gram: DMatrix<f64>,
    /// Moment vector `r = Σ x y`.
    pub moment: DVector<f64>,
    pub beta: DVector<f64>,
    pub lambda: f64,
    pub tol: f64,
    pub n_obs: usize,
    groups: GroupStructure,
    partition: Partition,
}

impl LassoState {
    /// State with no observations: `R = 0`, `r = 0`, `β = 0`.
    pub fn empty(groups: GroupStructure, lambda: f64, tol: f64) -> Result<Self> {
        check_lambda_tol(lambda, tol)?;
        let m = groups.n_features();
        Ok(Self {
            gram: DMatrix::zeros(m, m),
            moment: DVector::zeros(m),
            beta: DVector::zeros(m),
            lambda,
            tol,
            n_obs: 0,
            groups,
            partition: Partition::default(),
        })
    }

    pub fn groups(&self) -> &GroupStructure {
        &self.groups
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    /// Groups with a nonzero coefficient block.
    pub fn support_groups(&self) -> Vec<usize> {
        self.partition.active_groups()
    }

    /// Coordinates of the active groups that carry data, i.e. excluding frozen ones.
    pub fn support_coordinates(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .partition
            .active
            .iter()
            .flat_map(|g| g.max_set.iter().map(|&(k, _)| k).chain(g.rest.iter().copied()))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn kkt(&self) -> KktReport {
        kkt_report(&self.gram, &self.moment, &self.beta, self.lambda, &self.partition, &self.groups)
    }

    fn scaled_tol(&self) -> f64 {
        self.tol * (1.0 + self.moment.amax().max(self.lambda))
    }
}

fn check_lambda_tol(lambda: f64, tol: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    if !(tol > 0.0) {
        return Err(invalid(format!("tolerance must be positive, got {tol}")));
    }
    Ok(())
}

/// KKT residuals of `β` under the given partition, using the residual `g = r − Rβ`
/// as the scaled subgradient.
pub fn kkt_report(
    gram: &DMatrix<f64>,
    moment: &DVector<f64>,
    beta: &DVector<f64>,
    lambda: f64,
    partition: &Partition,
    groups: &GroupStructure,
) -> KktReport {
    let g = moment - gram * beta;
    let mut stat: f64 = 0.0;
    for grp in &partition.active {
        let tau = grp.max_set.first().map_or(0.0, |&(k, _)| beta[k].abs());
        let mut sum = 0.0;
        for &(k, s) in &grp.max_set {
            stat = stat.max((-s * g[k]).max(0.0));
            // The max set must carry the declared signs at a common magnitude.
            stat = stat.max((s * beta[k] - tau).abs()).max((-s * beta[k]).max(0.0));
            sum += s * g[k];
        }
        for &k in &grp.rest {
            stat = stat.max((beta[k].abs() - tau).max(0.0));
        }
        stat = stat.max((sum - lambda).abs());
        for &k in grp.rest.iter().chain(&grp.frozen) {
            stat = stat.max(g[k].abs());
        }
    }
    let mut dual: f64 = 0.0;
    for j in partition.inactive_groups(groups) {
        let norm: f64 = groups.group(j).iter().map(|&k| g[k].abs()).sum();
        dual = dual.max(norm - lambda);
    }
    KktReport { stationarity: stat, dual_excess: dual.max(0.0) }
}

fn check_inputs(gram: &DMatrix<f64>, moment: &DVector<f64>, groups: &GroupStructure) -> Result<()> {
    let m = groups.n_features();
    if gram.nrows() != m || gram.ncols() != m || moment.len() != m {
        return Err(dim(format!("statistics must be {m}x{m} and {m} to match the groups")));
    }
    Ok(())
}

/// Largest `‖r_G‖₁`: the smallest λ at which `β = 0` is optimal.
pub fn lambda_max(moment: &DVector<f64>, groups: &GroupStructure) -> f64 {
    groups
        .groups()
        .iter()
        .map(|g| g.iter().map(|&k| moment[k].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Minimizer for the statistics `(R, r)` at penalty `λ`, found by following the
/// regularization path down from `λ_max`.
pub fn solve_batch(gram: &DMatrix<f64>, moment: &DVector<f64>, lambda: f64, groups: &GroupStructure, tol: f64) -> Result<LassoState> {
    check_inputs(gram, moment, groups)?;
    check_lambda_tol(lambda, tol)?;
    let mut state = LassoState {
        gram: gram.clone(),
        moment: moment.clone(),
        beta: DVector::zeros(groups.n_features()),
        lambda,
        tol,
        n_obs: 0,
        groups: groups.clone(),
        partition: Partition::default(),
    };
    let start = lambda_max(moment, groups);
    if lambda >= start {
        return Ok(state);
    }
    let mut h = Homotopy::new(gram.clone(), moment.clone(), start, Partition::default(), groups);
    if h.follow_lambda(lambda).is_ok() {
        if let Ok(beta) = h.solution() {
            state.beta = beta;
            state.partition = h.partition;
            if state.kkt().passes(state.scaled_tol(), lambda) {
                return Ok(state);
            }
        }
    }
    if let Some(solved) = solve_by_ridged_path(&state) {
        return Ok(solved);
    }
    log::debug!("path following failed at lambda {lambda:e}; using proximal gradient");
    solve_by_fista(state)
}

/// Tied groups make the path degenerate. A small ridge removes the ties; its
/// path identifies the structure, which is then solved exactly without the ridge.
fn solve_by_ridged_path(state: &LassoState) -> Option<LassoState> {
    let groups = &state.groups;
    let scale = state.gram.diagonal().amax();
    if !(scale > 0.0) {
        return None;
    }
    let tol = state.scaled_tol();
    let start = lambda_max(&state.moment, groups);
    for delta in [1e-10, 1e-8, 1e-6] {
        let mut ridged = state.gram.clone();
        for k in 0..ridged.nrows() {
            ridged[(k, k)] += delta * scale;
        }
        let mut h = Homotopy::new(ridged, state.moment.clone(), start, Partition::default(), groups);
        if h.follow_lambda(state.lambda).is_err() {
            continue;
        }
        let Ok(approx) = h.solution() else { continue };
        let exact = Homotopy::new(state.gram.clone(), state.moment.clone(), state.lambda, h.partition.clone(), groups);
        for beta in [exact.solution(), exact.solution_near(&approx)].into_iter().flatten() {
            let report = kkt_report(&state.gram, &state.moment, &beta, state.lambda, &h.partition, groups);
            if report.passes(tol, state.lambda) {
                let mut solved = state.clone();
                solved.beta = beta;
                solved.partition = h.partition;
                return Some(solved);
            }
        }
    }
    None
}

fn solve_by_fista(mut state: LassoState) -> Result<LassoState> {
    let tol = state.scaled_tol();
    let beta = fista(&state.gram, &state.moment, state.lambda, &state.groups, 1e-3 * tol, 200_000, Some(&state.beta));
    let groups = state.groups.clone();
    // Read the structure off the iterate and solve its stationarity system exactly.
    for rel in [1e-10, 1e-8, 1e-6, 1e-4] {
        let part = Partition::from_beta(&beta, &groups, &state.gram, rel);
        let h = Homotopy::new(state.gram.clone(), state.moment.clone(), state.lambda, part.clone(), &groups);
        for polished in [h.solution(), h.solution_near(&beta)].into_iter().flatten() {
            let report = kkt_report(&state.gram, &state.moment, &polished, state.lambda, &part, &groups);
            if report.passes(tol, state.lambda) {
                state.beta = polished;
                state.partition = part;
                return Ok(state);
            }
        }
    }
    let part = Partition::from_beta(&beta, &groups, &state.gram, 1e-6);
    let report = kkt_report(&state.gram, &state.moment, &beta, state.lambda, &part, &groups);
    if report.passes(tol, state.lambda) {
        state.beta = beta;
        state.partition = part;
        return Ok(state);
    }
    Err(Error::NonConvergence {
        iterations: 200_000,
        residual: report.stationarity.max(report.dual_excess),
    })
}

/// Exact minimizer after adding the observation `(x_new, y_new)` to the statistics
/// and moving the penalty to `lambda_next`.
pub fn recursive_update(state: &LassoState, x_new: &DVector<f64>, y_new: f64, lambda_next: f64) -> Result<LassoState> {
    if x_new.len() != state.groups.n_features() {
        return Err(dim(format!("observation has {} features, lasso has {}", x_new.len(), state.groups.n_features())));
    }
    check_lambda_tol(lambda_next, state.tol)?;
    if !y_new.is_finite() || x_new.iter().any(|v| !v.is_finite()) {
        return Err(invalid("observation must be finite"));
    }
    let mut h = Homotopy::new(state.gram.clone(), state.moment.clone(), state.lambda, state.partition.clone(), &state.groups);
    let followed: std::result::Result<DVector<f64>, PathFailure> = (|| {
        h.follow_lambda(lambda_next)?;
        if x_new.iter().any(|&v| v != 0.0) {
            h.follow_observation(x_new, y_new)?;
        }
        h.solution()
    })();

    let gram = &state.gram + x_new * x_new.transpose();
    let moment = &state.moment + x_new * y_new;
    let mut next = LassoState {
        gram,
        moment,
        beta: state.beta.clone(),
        lambda: lambda_next,
        tol: state.tol,
        n_obs: state.n_obs + 1,
        groups: state.groups.clone(),
        partition: state.partition.clone(),
    };
    match followed {
        Ok(beta) => {
            next.beta = beta;
            next.partition = h.partition;
            if next.kkt().passes(next.scaled_tol(), lambda_next) {
                return Ok(next);
            }
            log::debug!("homotopy result failed the optimality check; re-solving");
        }
        Err(e) => log::debug!("homotopy stopped ({e:?}); re-solving from scratch"),
    }
    let mut solved = solve_batch(&next.gram, &next.moment, lambda_next, &next.groups, next.tol)?;
    solved.n_obs = next.n_obs;
    Ok(solved)
}

/// Subgradient of `‖·‖_{1,∞}` at `β`: per active group a unit ℓ1 mass on the
/// maximal coordinates with matching signs, split equally on ties; zero elsewhere.
pub fn extract_subgradient(beta: &DVector<f64>, groups: &GroupStructure) -> DVector<f64> {
    let mut z = DVector::zeros(beta.len());
    let mut ties = Vec::new();
    for g in groups.groups() {
        let tau = g.iter().map(|&k| beta[k].abs()).fold(0.0, f64::max);
        if tau == 0.0 {
            continue;
        }
        ties.clear();
        ties.extend(g.iter().copied().filter(|&k| beta[k].abs() >= tau * (1.0 - TIE_REL)));
        let share = 1.0 / ties.len() as f64;
        for &k in &ties {
            z[k] = beta[k].signum() * share;
        }
    }
    z
}

/// Penalty schedule `λ_n = c₀ · d̄ · sqrt(n ln p)`.
pub fn lambda_schedule(c0: f64, max_group_size: usize, n: usize, n_groups: usize) -> f64 {
    c0 * max_group_size as f64 * (n as f64 * (n_groups.max(1) as f64).ln()).sqrt()
}

/// Group Lasso objective value.
pub fn objective(gram: &DMatrix<f64>, moment: &DVector<f64>, beta: &DVector<f64>, lambda: f64, groups: &GroupStructure) -> f64 {
    let pen: f64 = groups.groups().iter().map(|g| g.iter().map(|&k| beta[k].abs()).fold(0.0, f64::max)).sum();
    0.5 * beta.dot(&(gram * beta)) - beta.dot(moment) + lambda * pen
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn batch_examples() {
        let g = GroupStructure::uniform(1, 2).unwrap();
        let s = solve_batch(&DMatrix::identity(2, 2), &dvector![3.0, 1.0], 0.0, &g, 1e-10).unwrap();
        assert_relative_eq!(s.beta, dvector![3.0, 1.0], epsilon = 1e-12);
        let s = solve_batch(&DMatrix::identity(2, 2), &dvector![3.0, 1.0], 5.0, &g, 1e-10).unwrap();
        assert_eq!(s.beta, dvector![0.0, 0.0]);
        assert!(s.support_groups().is_empty());
    }

    #[test]
    fn batch_identity_is_group_prox() {
        // With R = I the minimizer is the prox of r.
        let g = GroupStructure::uniform(1, 3).unwrap();
        let r = dvector![3.0, -1.0, 2.5];
        let s = solve_batch(&DMatrix::identity(3, 3), &r, 1.0, &g, 1e-10).unwrap();
        assert_relative_eq!(s.beta, prox_linf_group(&r, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn update_examples() {
        let g = GroupStructure::uniform(1, 1).unwrap();
        let s = solve_batch(&dmatrix![1.0], &dvector![1.0], 0.0, &g, 1e-10).unwrap();
        let u = recursive_update(&s, &dvector![1.0], 1.0, 0.0).unwrap();
        assert_relative_eq!(u.beta[0], 1.0, epsilon = 1e-14);

        let g = GroupStructure::uniform(2, 2).unwrap();
        let gram = dmatrix![2.0, 0.5, 0.0, 0.1; 0.5, 1.0, 0.2, 0.0; 0.0, 0.2, 1.5, 0.3; 0.1, 0.0, 0.3, 1.0];
        let s = solve_batch(&gram, &dvector![1.0, -2.0, 0.5, 0.3], 0.7, &g, 1e-10).unwrap();
        let u = recursive_update(&s, &DVector::zeros(4), 3.0, 0.7).unwrap();
        assert_relative_eq!(u.beta, s.beta, epsilon = 1e-14);
        assert_eq!(u.gram, s.gram);
    }

    #[test]
    fn subgradient_examples() {
        let g = GroupStructure::uniform(1, 2).unwrap();
        assert_eq!(extract_subgradient(&dvector![2.0, -0.5], &g), dvector![1.0, 0.0]);
        assert_eq!(extract_subgradient(&dvector![-3.0, 1.0], &g), dvector![-1.0, 0.0]);
        assert_eq!(extract_subgradient(&dvector![2.0, -2.0], &g), dvector![0.5, -0.5]);
        assert_eq!(extract_subgradient(&dvector![0.0, 0.0], &g), dvector![0.0, 0.0]);
    }

    #[test]
    fn schedule_shape() {
        assert_relative_eq!(lambda_schedule(0.5, 10, 4, 100), 0.5 * 10.0 * (4.0 * 100f64.ln()).sqrt());
        assert_eq!(lambda_schedule(1.0, 3, 0, 5), 0.0);
    }

    fn random_problem(seed: u64, n: usize, sizes: &[usize]) -> (DMatrix<f64>, DVector<f64>, GroupStructure) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = GroupStructure::contiguous(sizes).unwrap();
        let m = groups.n_features();
        let x = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let coef = DVector::from_fn(m, |k, _| if k < sizes[0] { 2.0 + k as f64 } else { 0.0 });
        let y = &x * coef + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        (x.transpose() * &x, x.transpose() * y, groups)
    }

    #[test]
    fn batch_matches_proximal_gradient() {
        for seed in 0..10 {
            let (gram, moment, groups) = random_problem(seed, 40, &[3, 4, 3]);
            for lambda in [0.5, 5.0, 20.0] {
                let s = solve_batch(&gram, &moment, lambda, &groups, 1e-10).unwrap();
                let o = fista(&gram, &moment, lambda, &groups, 1e-13, 500_000, None);
                assert!((&s.beta - &o).norm() < 1e-6, "seed {seed} lambda {lambda}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn recursive_tracks_batch(seed in 0u64..10_000, sizes in prop::collection::vec(1usize..5, 1..4), c0 in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let groups = GroupStructure::contiguous(&sizes).unwrap();
            let m = groups.n_features();
            let coef = DVector::from_fn(m, |k, _| if groups.group_of(k) == 0 { 1.0 + k as f64 } else { 0.0 });
            let mut state = LassoState::empty(groups.clone(), 0.0, 1e-10).unwrap();
            for n in 1..=25 {
                let x = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = x.dot(&coef) + rng.sample::<f64, _>(StandardNormal);
                let lam = lambda_schedule(c0, groups.max_size(), n, groups.n_groups().max(2));
                state = recursive_update(&state, &x, y, lam).unwrap();
                let batch = solve_batch(&state.gram, &state.moment, lam, &groups, 1e-10).unwrap();
                prop_assert!((&state.beta - &batch.beta).norm() <= 1e-6 * (1.0 + batch.beta.norm()));
                let rep = state.kkt();
                prop_assert!(rep.stationarity <= 1e-6 && rep.dual_excess <= 1e-6 * lam.max(1.0));
            }
        }

        #[test]
        fn active_groups_shrink_with_lambda(seed in 0u64..10_000) {
            let (gram, moment, groups) = random_problem(seed, 30, &[3, 3, 3, 3]);
            let lmax = lambda_max(&moment, &groups);
            let mut prev = usize::MAX;
            for i in 0..12 {
                let lam = lmax * (i as f64 / 11.0);
                let s = solve_batch(&gram, &moment, lam, &groups, 1e-10).unwrap();
                let n = s.support_groups().len();
                prop_assert!(n <= prev, "active groups grew from {prev} to {n}");
                prev = n;
            }
        }
    }
}
