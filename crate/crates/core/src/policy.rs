//! Measurement policies: sparse KG (linear and additive), linear KG and pure exploration.
//!
//! Every step is functional: it takes the current state by reference and returns
//! a new one, so a failed round leaves the caller's state untouched.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{
    beta_bernoulli_update, fuse_posterior_precision, lookup_update, rls_update, GroupStructure, LinearBelief, LookupBelief,
    SparseBeliefState,
};
use crate::error::{dim, invalid, Error, Result};
use crate::kg::{argmax_lowest, kg_values_lookup, kg_values_sparse, DEFAULT_MAX_TERMS};
use crate::lasso::{estimate_covariance, lambda_schedule, recursive_update, CovarianceOptions, LassoState};
use crate::splines::AdditiveFeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    #[serde(alias = "kg-splin")]
    KgSpLin,
    #[serde(alias = "kg-spam")]
    KgSpAm,
    #[serde(alias = "kg-lin")]
    KgLin,
    Explore,
}

impl PolicyKind {
    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::KgSpLin => "KGSpLin",
            PolicyKind::KgSpAm => "KGSpAM",
            PolicyKind::KgLin => "KGLin",
            PolicyKind::Explore => "Explore",
        }
    }

    pub fn is_sparse(self) -> bool {
        !matches!(self, PolicyKind::KgLin)
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "kgsplin" => Ok(PolicyKind::KgSpLin),
            "kgspam" => Ok(PolicyKind::KgSpAm),
            "kglin" => Ok(PolicyKind::KgLin),
            "explore" | "exploration" => Ok(PolicyKind::Explore),
            _ => Err(invalid(format!("unknown policy `{s}`"))),
        }
    }
}

/// Settings shared by all policies of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub budget: usize,
    pub noise_var: f64,
    pub seed: u64,
    pub max_terms: usize,
    /// `c₀ = lambda_mult · σ_ε` in the schedule `λ_n = c₀ d̄ sqrt(n ln p)`.
    pub lambda_mult: f64,
    pub warmup_rounds: usize,
    pub covariance: CovarianceOptions,
    pub lasso_tol: f64,
    /// Profile out an intercept in the Lasso by running it on centered data.
    pub center: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            budget: 200,
            noise_var: 1.0,
            seed: 0,
            max_terms: DEFAULT_MAX_TERMS,
            lambda_mult: 0.1,
            warmup_rounds: 10,
            covariance: CovarianceOptions::default(),
            lasso_tol: 1e-9,
            center: false,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(invalid("budget must be at least 1"));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(invalid("noise variance must be positive"));
        }
        if self.max_terms == 0 {
            return Err(invalid("max_terms must be at least 1"));
        }
        if !(self.lambda_mult >= 0.0) {
            return Err(invalid("lambda multiplier must be nonnegative"));
        }
        Ok(())
    }

    /// Penalty after `n` observations on the given groups.
    pub fn lambda(&self, groups: &GroupStructure, n: usize) -> f64 {
        lambda_schedule(self.lambda_mult * self.noise_var.sqrt(), groups.max_size(), n, groups.n_groups())
    }
}

/// Per-round seed for the Monte-Carlo covariance draws.
pub fn round_seed(seed: u64, round: usize) -> u64 {
    splitmix(seed ^ splitmix(round as u64 ^ 0x6a09_e667_f3bc_c908))
}

/// SplitMix64 finalizer, used to derive independent substream seeds.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Running means used to center the Lasso statistics.
#[derive(Debug, Clone, PartialEq)]
struct Centering {
    n: usize,
    x_mean: DVector<f64>,
    y_mean: f64,
}

impl Centering {
    /// Rank-one increment that turns uncentered into centered sufficient statistics.
    fn push(&mut self, x: &DVector<f64>, y: f64) -> (DVector<f64>, f64) {
        let n = self.n as f64;
        let scale = (n / (n + 1.0)).sqrt();
        let dx = (x - &self.x_mean) * scale;
        let dy = (y - self.y_mean) * scale;
        self.x_mean += (x - &self.x_mean) / (n + 1.0);
        self.y_mean += (y - self.y_mean) / (n + 1.0);
        self.n += 1;
        (dx, dy)
    }
}

/// State of the sparse policies (and of exploration, which shares their update).
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePolicyState {
    pub belief: SparseBeliefState,
    pub lasso: LassoState,
    /// Number of completed measurement rounds.
    pub round: usize,
    centering: Option<Centering>,
}

impl SparsePolicyState {
    pub fn new(belief: SparseBeliefState, config: &PolicyConfig) -> Result<Self> {
        belief.validate()?;
        let m = belief.vartheta.len();
        let lasso = LassoState::empty(belief.groups.clone(), 0.0, config.lasso_tol)?;
        let centering = config.center.then(|| Centering { n: 0, x_mean: DVector::zeros(m), y_mean: 0.0 });
        Ok(Self { belief, lasso, round: 0, centering })
    }

    pub fn support_groups(&self) -> Vec<usize> {
        self.lasso.support_groups()
    }
}

/// State of the linear KG baseline: the coefficient belief, the belief it induces
/// on the alternatives, and a diagnostic group Lasso on the same data.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicyState {
    pub belief: LinearBelief,
    pub induced: LookupBelief,
    pub lasso: LassoState,
    pub round: usize,
    centering: Option<Centering>,
}

impl LinearPolicyState {
    pub fn new(belief: LinearBelief, alternatives: &DMatrix<f64>, groups: GroupStructure, config: &PolicyConfig) -> Result<Self> {
        let induced = belief.induced(alternatives)?;
        let m = belief.vartheta.len();
        if groups.n_features() != m {
            return Err(dim("group structure does not match the belief"));
        }
        let lasso = LassoState::empty(groups, 0.0, config.lasso_tol)?;
        let centering = config.center.then(|| Centering { n: 0, x_mean: DVector::zeros(m), y_mean: 0.0 });
        Ok(Self { belief, induced, lasso, round: 0, centering })
    }

    pub fn support_groups(&self) -> Vec<usize> {
        self.lasso.support_groups()
    }
}

/// Record of one measurement round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyStep {
    pub round: usize,
    pub chosen_alternative: usize,
    /// KG value of the chosen alternative; absent for exploration rounds.
    pub kg_value: Option<f64>,
    pub observation: f64,
    /// Active Lasso groups after the update.
    pub lasso_support: Vec<usize>,
}

fn check_alternatives(alternatives: &DMatrix<f64>, m: usize) -> Result<()> {
    if alternatives.nrows() == 0 {
        return Err(Error::Empty("alternative matrix"));
    }
    if alternatives.ncols() != m {
        return Err(dim(format!("alternatives have {} features, belief has {m}", alternatives.ncols())));
    }
    Ok(())
}

fn lasso_increment(
    lasso: &LassoState,
    centering: &mut Option<Centering>,
    x: &DVector<f64>,
    y: f64,
    lambda: f64,
) -> Result<LassoState> {
    match centering {
        Some(c) => {
            let (dx, dy) = c.push(x, y);
            recursive_update(lasso, &dx, dy, lambda)
        }
        None => recursive_update(lasso, x, y, lambda),
    }
}

/// Steps two to four of a sparse round: Lasso update, sampled covariance, then
/// Bayesian fusion and the Beta-Bernoulli count update.
pub fn sparse_update(state: &SparsePolicyState, x_feat: &DVector<f64>, y: f64, config: &PolicyConfig) -> Result<SparsePolicyState> {
    let groups = &state.belief.groups;
    let n = state.lasso.n_obs + 1;
    let lambda = config.lambda(groups, n);
    let mut centering = state.centering.clone();
    let lasso = lasso_increment(&state.lasso, &mut centering, x_feat, y, lambda)?;
    let selected = lasso.support_groups();
    let mut belief = state.belief.clone();
    if !selected.is_empty() {
        let seed = round_seed(config.seed, state.round);
        let est = estimate_covariance(&lasso, &state.belief, config.noise_var, lambda, &config.covariance, seed)?;
        belief = fuse_posterior_precision(&belief, &est.mean, &est.precision, &est.support)?;
    }
    let belief = beta_bernoulli_update(&belief, &selected);
    Ok(SparsePolicyState { belief, lasso, round: state.round + 1, centering })
}

/// Sparse KG choice, or `None` when the round should explore instead.
fn sparse_choice(state: &SparsePolicyState, alternatives: &DMatrix<f64>, config: &PolicyConfig) -> Result<Option<(usize, f64)>> {
    if state.round < config.warmup_rounds || state.lasso.support_groups().is_empty() {
        return Ok(None);
    }
    let values = kg_values_sparse(&state.belief, alternatives, config.noise_var, config.max_terms)?;
    let best = argmax_lowest(&values).ok_or(Error::Empty("alternative matrix"))?;
    Ok(Some((best, values[best])))
}

/// One round of the sparse linear KG policy.
///
/// `observe` returns the noisy measurement of the chosen alternative; `rng` is
/// only used on exploration rounds (warm-up or empty Lasso support).
pub fn step_kgsplin<R: Rng + ?Sized>(
    state: &SparsePolicyState,
    alternatives: &DMatrix<f64>,
    config: &PolicyConfig,
    observe: &mut dyn FnMut(usize) -> f64,
    rng: &mut R,
) -> Result<(SparsePolicyState, PolicyStep)> {
    check_alternatives(alternatives, state.belief.vartheta.len())?;
    let (choice, kg_value) = match sparse_choice(state, alternatives, config)? {
        Some((x, v)) => (x, Some(v)),
        None => (rng.random_range(0..alternatives.nrows()), None),
    };
    finish_sparse(state, alternatives, config, choice, kg_value, observe)
}

/// One round of the sparse additive KG policy on raw alternatives.
pub fn step_kgspam<R: Rng + ?Sized>(
    state: &SparsePolicyState,
    alternatives_raw: &DMatrix<f64>,
    feature_map: &AdditiveFeatureMap,
    config: &PolicyConfig,
    observe: &mut dyn FnMut(usize) -> f64,
    rng: &mut R,
) -> Result<(SparsePolicyState, PolicyStep)> {
    if feature_map.group_structure() != &state.belief.groups {
        return Err(invalid("feature map groups differ from the belief's groups"));
    }
    let features = feature_map.map_all(alternatives_raw)?;
    step_kgsplin(state, &features, config, observe, rng)
}

/// One round of uniform random exploration with the sparse update pipeline.
pub fn step_explore<R: Rng + ?Sized>(
    state: &SparsePolicyState,
    alternatives: &DMatrix<f64>,
    config: &PolicyConfig,
    observe: &mut dyn FnMut(usize) -> f64,
    rng: &mut R,
) -> Result<(SparsePolicyState, PolicyStep)> {
    check_alternatives(alternatives, state.belief.vartheta.len())?;
    let choice = rng.random_range(0..alternatives.nrows());
    finish_sparse(state, alternatives, config, choice, None, observe)
}

/// Measure a given alternative and apply the sparse update.
pub fn step_forced(
    state: &SparsePolicyState,
    alternatives: &DMatrix<f64>,
    config: &PolicyConfig,
    choice: usize,
    observe: &mut dyn FnMut(usize) -> f64,
) -> Result<(SparsePolicyState, PolicyStep)> {
    check_alternatives(alternatives, state.belief.vartheta.len())?;
    if choice >= alternatives.nrows() {
        return Err(Error::OutOfRange { index: choice, len: alternatives.nrows() });
    }
    finish_sparse(state, alternatives, config, choice, None, observe)
}

fn finish_sparse(
    state: &SparsePolicyState,
    alternatives: &DMatrix<f64>,
    config: &PolicyConfig,
    choice: usize,
    kg_value: Option<f64>,
    observe: &mut dyn FnMut(usize) -> f64,
) -> Result<(SparsePolicyState, PolicyStep)> {
    let y = observe(choice);
    let x = alternatives.row(choice).transpose();
    let next = sparse_update(state, &x, y, config)?;
    let step = PolicyStep {
        round: state.round,
        chosen_alternative: choice,
        kg_value,
        observation: y,
        lasso_support: next.lasso.support_groups(),
    };
    Ok((next, step))
}

/// One round of the linear KG baseline with recursive least squares.
pub fn step_kglin(
    state: &LinearPolicyState,
    alternatives: &DMatrix<f64>,
    config: &PolicyConfig,
    observe: &mut dyn FnMut(usize) -> f64,
) -> Result<(LinearPolicyState, PolicyStep)> {
    check_alternatives(alternatives, state.belief.vartheta.len())?;
    if state.induced.theta.len() != alternatives.nrows() {
        return Err(dim("cached alternative belief does not match the alternative matrix"));
    }
    let values = kg_values_lookup(&state.induced, config.noise_var)?;
    let choice = argmax_lowest(&values).ok_or(Error::Empty("alternative matrix"))?;
    let y = observe(choice);
    let x = alternatives.row(choice).transpose();
    let belief = rls_update(&state.belief, &x, y, config.noise_var)?;
    let induced = lookup_update(&state.induced, choice, y, config.noise_var)?;
    let mut centering = state.centering.clone();
    let lambda = config.lambda(state.lasso.groups(), state.lasso.n_obs + 1);
    let lasso = lasso_increment(&state.lasso, &mut centering, &x, y, lambda)?;
    let step = PolicyStep {
        round: state.round,
        chosen_alternative: choice,
        kg_value: Some(values[choice]),
        observation: y,
        lasso_support: lasso.support_groups(),
    };
    Ok((LinearPolicyState { belief, induced, lasso, round: state.round + 1, centering }, step))
}

/// Alternative with the largest posterior mean `X̃ϑ`, lowest index on ties.
pub fn final_selection(vartheta: &DVector<f64>, alternatives: &DMatrix<f64>) -> Result<usize> {
    check_alternatives(alternatives, vartheta.len())?;
    let means = alternatives * vartheta;
    argmax_lowest(means.as_slice()).ok_or(Error::Empty("alternative matrix"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::BetaCounts;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(config: &PolicyConfig) -> (SparsePolicyState, DMatrix<f64>) {
        let groups = GroupStructure::uniform(2, 2).unwrap();
        let belief = SparseBeliefState::with_isotropic_prior(groups, 4.0, 1.0, 1.0).unwrap();
        let alts = dmatrix![1.0, 0.5, 0.0, 0.0; 0.0, 1.0, 0.2, 0.0; 0.3, 0.0, 1.0, 0.0; 0.0, 0.1, 0.0, 1.0; -1.0, 0.4, 0.2, 0.3];
        (SparsePolicyState::new(belief, config).unwrap(), alts)
    }

    fn run_toy(seed: u64, rounds: usize) -> (SparsePolicyState, Vec<PolicyStep>) {
        let config = PolicyConfig { seed, warmup_rounds: 3, lambda_mult: 0.2, ..PolicyConfig::default() };
        let (mut state, alts) = toy(&config);
        let truth = &alts * dvector![2.0, -1.0, 0.0, 0.0];
        let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut steps = Vec::new();
        for _ in 0..rounds {
            let mut observe = |x: usize| truth[x] + noise.random_range(-0.5..0.5);
            let (next, step) = step_kgsplin(&state, &alts, &config, &mut observe, &mut rng).unwrap();
            state = next;
            steps.push(step);
        }
        (state, steps)
    }

    #[test]
    fn seeded_runs_replay_exactly() {
        let (a, sa) = run_toy(5, 20);
        let (b, sb) = run_toy(5, 20);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        for c in &a.belief.beta_counts {
            assert_eq!(c.xi + c.eta, 2.0 + 20.0);
        }
    }

    #[test]
    fn single_alternative_budget_one() {
        let config = PolicyConfig { warmup_rounds: 0, ..PolicyConfig::default() };
        let groups = GroupStructure::uniform(1, 1).unwrap();
        let belief = SparseBeliefState::with_isotropic_prior(groups, 1.0, 1.0, 1.0).unwrap();
        let state = SparsePolicyState::new(belief, &config).unwrap();
        let alts = dmatrix![1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (next, step) = step_kgsplin(&state, &alts, &config, &mut |_| 3.0, &mut rng).unwrap();
        assert_eq!(step.chosen_alternative, 0);
        assert_eq!(next.round, 1);
        assert_eq!(next.lasso.n_obs, 1);
    }

    #[test]
    fn noiseless_observation_moves_toward_truth() {
        let config = PolicyConfig { warmup_rounds: 0, noise_var: 1e-6, lambda_mult: 0.0, ..PolicyConfig::default() };
        let groups = GroupStructure::uniform(1, 1).unwrap();
        let belief = SparseBeliefState::with_isotropic_prior(groups, 1.0, 1.0, 1.0).unwrap();
        let state = SparsePolicyState::new(belief, &config).unwrap();
        let alpha = 2.5;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (next, _) = step_kgsplin(&state, &dmatrix![1.0], &config, &mut |_| alpha, &mut rng).unwrap();
        assert!((next.belief.vartheta[0] - alpha).abs() <= (state.belief.vartheta[0] - alpha).abs());
        assert_relative_eq!(next.belief.vartheta[0], alpha, max_relative = 1e-4);
    }

    #[test]
    fn exploration_shares_the_update() {
        let config = PolicyConfig { seed: 9, warmup_rounds: 0, ..PolicyConfig::default() };
        let (state, alts) = toy(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (explored, step) = step_explore(&state, &alts, &config, &mut |x| x as f64, &mut rng).unwrap();
        let (forced, _) = step_forced(&state, &alts, &config, step.chosen_alternative, &mut |x| x as f64).unwrap();
        assert_eq!(explored, forced);
    }

    #[test]
    fn failed_round_leaves_state_untouched() {
        let config = PolicyConfig::default();
        let (state, alts) = toy(&config);
        let before = state.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(step_kgsplin(&state, &alts, &config, &mut |_| f64::NAN, &mut rng).is_err());
        assert_eq!(state, before);
    }

    #[test]
    fn kglin_scalar_reduces_to_correlated_kg() {
        let config = PolicyConfig { noise_var: 0.5, ..PolicyConfig::default() };
        let alts = dmatrix![1.0; 2.0; -1.0];
        let belief = LinearBelief::new(dvector![0.3], dmatrix![2.0]).unwrap();
        let groups = GroupStructure::uniform(1, 1).unwrap();
        let state = LinearPolicyState::new(belief.clone(), &alts, groups, &config).unwrap();
        let (next, step) = step_kglin(&state, &alts, &config, &mut |x| alts[(x, 0)]).unwrap();
        let lookup = belief.induced(&alts).unwrap();
        let oracle = kg_values_lookup(&lookup, 0.5).unwrap();
        assert_eq!(step.chosen_alternative, argmax_lowest(&oracle).unwrap());
        let expect = next.belief.induced(&alts).unwrap();
        assert_relative_eq!(next.induced.theta, expect.theta, epsilon = 1e-12);
        assert_relative_eq!(next.induced.sigma, expect.sigma, epsilon = 1e-12);
    }

    #[test]
    fn final_selection_rules() {
        let alts = dmatrix![1.0, 0.0; 0.0, 1.0; 2.0, 0.0];
        assert_eq!(final_selection(&dvector![0.0, 0.0], &alts).unwrap(), 0);
        assert_eq!(final_selection(&dvector![1.0, 0.0], &alts).unwrap(), 2);
        assert_eq!(final_selection(&dvector![0.0, 5.0], &alts).unwrap(), 1);
    }

    #[test]
    fn certain_groups_survive_updates() {
        let config = PolicyConfig::default();
        let groups = GroupStructure::uniform(1, 1).unwrap();
        let belief = SparseBeliefState::new(dvector![0.0], dmatrix![1.0], vec![BetaCounts::new(1.0, 0.0).unwrap()], groups).unwrap();
        assert!(SparsePolicyState::new(belief, &config).is_ok());
    }

    #[test]
    fn policy_names_parse() {
        for k in [PolicyKind::KgSpLin, PolicyKind::KgSpAm, PolicyKind::KgLin, PolicyKind::Explore] {
            assert_eq!(k.label().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("greedy".parse::<PolicyKind>().is_err());
    }
}
