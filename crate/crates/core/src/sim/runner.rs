//! Replication runner: every policy faces the same truth and noise draws per replication.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{count_misclassified_groups, opportunity_cost, Summary};
use super::{Problem, TruthSpec};
use crate::belief::{LinearBelief, SparseBeliefState};
use crate::error::{invalid, Result};
use crate::lasso::{solve_batch, LassoState};
use crate::policy::{
    final_selection, splitmix, step_explore, step_kglin, step_kgspam, step_kgsplin, LinearPolicyState, PolicyConfig, PolicyKind,
    PolicyStep, SparsePolicyState,
};

const TRUTH_STREAM: u64 = 0x7472_7574_68;
const NOISE_STREAM: u64 = 0x6e6f_6973_65;
const CHOICE_STREAM: u64 = 0x6368_6f69_6365;
const MC_STREAM: u64 = 0x6d6f_6e74_65;

/// Gaussian prior on the coefficients and uniform Beta counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    pub variance: f64,
    pub xi0: f64,
    pub eta0: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { variance: 100.0 * 100.0 / 12.0, xi0: 1.0, eta0: 1.0 }
    }
}

/// Measurement noise, either absolute or relative to the realized truth range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseLevel {
    Sd(f64),
    RangeFraction(f64),
}

impl NoiseLevel {
    pub fn sd(self, problem: &Problem) -> f64 {
        match self {
            NoiseLevel::Sd(s) => s,
            NoiseLevel::RangeFraction(f) => f * problem.truth_range(),
        }
    }
}

/// Everything needed to run one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub truth: TruthSpec,
    pub policies: Vec<PolicyKind>,
    /// Shared policy settings; `noise_var` and `seed` are filled in per replication.
    pub policy: PolicyConfig,
    pub prior: PriorSpec,
    pub noise: NoiseLevel,
    /// Overrides the truth's default for Lasso centering.
    pub center: Option<bool>,
    pub traces: bool,
}

impl ExperimentSpec {
    pub fn new(truth: TruthSpec, policies: Vec<PolicyKind>, noise: NoiseLevel) -> Self {
        Self { truth, policies, policy: PolicyConfig::default(), prior: PriorSpec::default(), noise, center: None, traces: false }
    }

    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        if self.policies.is_empty() {
            return Err(invalid("no policies requested"));
        }
        if self.policies.contains(&PolicyKind::KgSpAm) && !self.truth.is_additive() {
            return Err(invalid("KGSpAM needs an additive truth with a feature map"));
        }
        let mut probe = self.policy.clone();
        probe.noise_var = 1.0;
        probe.validate()?;
        if !(self.prior.variance > 0.0) {
            return Err(invalid("prior variance must be positive"));
        }
        match self.noise {
            NoiseLevel::Sd(s) | NoiseLevel::RangeFraction(s) if !(s > 0.0 && s.is_finite()) => {
                Err(invalid("noise level must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// One line of a policy trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub policy: PolicyKind,
    pub rep: usize,
    pub round: usize,
    pub choice: usize,
    pub kg_value: Option<f64>,
    pub support: Vec<usize>,
    pub oc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub policy: PolicyKind,
    pub rep: usize,
    pub seed: u64,
    pub noise_sd: f64,
    /// Opportunity cost of the final selection after each round.
    pub oc_series: Vec<f64>,
    pub misclassified: Vec<usize>,
    pub support_size: Vec<usize>,
    pub final_oc: f64,
    /// Posterior coefficient mean after the last round.
    #[serde(skip)]
    pub final_vartheta: Vec<f64>,
    #[serde(skip)]
    pub trace: Option<Vec<TraceRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunFailure {
    pub policy: PolicyKind,
    pub rep: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySummary {
    pub policy: PolicyKind,
    pub n_ok: usize,
    pub n_failed: usize,
    pub final_oc: Summary,
    pub final_misclassified: Summary,
    pub per_round: Vec<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationReport {
    pub runs: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    pub summaries: Vec<PolicySummary>,
}

impl ReplicationReport {
    pub fn summary(&self, policy: PolicyKind) -> Option<&PolicySummary> {
        self.summaries.iter().find(|s| s.policy == policy)
    }
}

/// The problem instance a replication with this seed runs on.
pub fn replication_problem(truth: &TruthSpec, seed: u64) -> Result<Problem> {
    Problem::generate(truth, splitmix(seed ^ TRUTH_STREAM))
}

/// Per-replication seeds derived from one base seed.
pub fn replication_seeds(base: u64, n_reps: usize) -> Vec<u64> {
    (0..n_reps as u64).map(|r| splitmix(base.wrapping_add(splitmix(r)))).collect()
}

enum Learner {
    Sparse(SparsePolicyState),
    Linear(LinearPolicyState),
}

impl Learner {
    fn vartheta(&self) -> &DVector<f64> {
        match self {
            Learner::Sparse(s) => &s.belief.vartheta,
            Learner::Linear(s) => &s.belief.vartheta,
        }
    }

    fn lasso(&self) -> &LassoState {
        match self {
            Learner::Sparse(s) => &s.lasso,
            Learner::Linear(s) => &s.lasso,
        }
    }
}

/// Run one policy on one problem; also returns the final Lasso state.
fn run_detailed(spec: &ExperimentSpec, problem: &Problem, kind: PolicyKind, rep: usize, seed: u64) -> Result<(RunResult, LassoState)> {
    let budget = spec.policy.budget;
    let noise_sd = spec.noise.sd(problem);
    let config = PolicyConfig {
        noise_var: noise_sd * noise_sd,
        seed: splitmix(seed ^ MC_STREAM),
        center: spec.center.unwrap_or(spec.truth.centers_by_default()),
        ..spec.policy.clone()
    };
    config.validate()?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ NOISE_STREAM));
    let eps: Vec<f64> = (0..budget).map(|_| StandardNormal.sample(&mut noise_rng)).collect();
    let mut choice_rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ CHOICE_STREAM));

    let prior = SparseBeliefState::with_isotropic_prior(problem.groups.clone(), spec.prior.variance, spec.prior.xi0, spec.prior.eta0)?;
    let mut learner = match kind {
        PolicyKind::KgLin => {
            let belief = LinearBelief::new(prior.vartheta.clone(), prior.sigma_vartheta.clone())?;
            Learner::Linear(LinearPolicyState::new(belief, &problem.alternatives, problem.groups.clone(), &config)?)
        }
        _ => Learner::Sparse(SparsePolicyState::new(prior, &config)?),
    };

    let mu = problem.truth_values.as_slice();
    let n_groups = problem.groups.n_groups();
    let mut result = RunResult {
        policy: kind,
        rep,
        seed,
        noise_sd,
        oc_series: Vec::with_capacity(budget),
        misclassified: Vec::with_capacity(budget),
        support_size: Vec::with_capacity(budget),
        final_oc: 0.0,
        final_vartheta: Vec::new(),
        trace: spec.traces.then(Vec::new),
    };
    for round in 0..budget {
        let mut observe = |x: usize| mu[x] + noise_sd * eps[round];
        let (next, step): (Learner, PolicyStep) = match (&learner, kind) {
            (Learner::Linear(s), _) => {
                let (n, st) = step_kglin(s, &problem.alternatives, &config, &mut observe)?;
                (Learner::Linear(n), st)
            }
            (Learner::Sparse(s), PolicyKind::Explore) => {
                let (n, st) = step_explore(s, &problem.alternatives, &config, &mut observe, &mut choice_rng)?;
                (Learner::Sparse(n), st)
            }
            (Learner::Sparse(s), PolicyKind::KgSpAm) => {
                let raw = problem.raw.as_ref().ok_or_else(|| invalid("KGSpAM needs raw alternatives"))?;
                let map = problem.feature_map.as_ref().ok_or_else(|| invalid("KGSpAM needs a feature map"))?;
                let (n, st) = step_kgspam(s, raw, map, &config, &mut observe, &mut choice_rng)?;
                (Learner::Sparse(n), st)
            }
            (Learner::Sparse(s), _) => {
                let (n, st) = step_kgsplin(s, &problem.alternatives, &config, &mut observe, &mut choice_rng)?;
                (Learner::Sparse(n), st)
            }
        };
        learner = next;
        let pick = final_selection(learner.vartheta(), &problem.alternatives)?;
        let oc = opportunity_cost(mu, pick)?;
        result.oc_series.push(oc);
        result.misclassified.push(count_misclassified_groups(&step.lasso_support, &problem.true_support, n_groups)?);
        result.support_size.push(step.lasso_support.len());
        if let Some(trace) = result.trace.as_mut() {
            trace.push(TraceRecord {
                policy: kind,
                rep,
                round,
                choice: step.chosen_alternative,
                kg_value: step.kg_value,
                support: step.lasso_support,
                oc,
            });
        }
    }
    result.final_oc = result.oc_series.last().copied().unwrap_or(0.0);
    result.final_vartheta = learner.vartheta().as_slice().to_vec();
    let lasso = learner.lasso().clone();
    Ok((result, lasso))
}

/// Run one policy for one replication seed.
pub fn run_policy(spec: &ExperimentSpec, kind: PolicyKind, rep: usize, seed: u64) -> Result<RunResult> {
    spec.validate()?;
    let problem = replication_problem(&spec.truth, seed)?;
    run_detailed(spec, &problem, kind, rep, seed).map(|(r, _)| r)
}

fn summarize(spec: &ExperimentSpec, runs: &[RunResult], failures: &[RunFailure]) -> Vec<PolicySummary> {
    spec.policies
        .iter()
        .map(|&policy| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.policy == policy).collect();
            let finals: Vec<f64> = mine.iter().map(|r| r.final_oc).collect();
            let miscl: Vec<f64> = mine.iter().filter_map(|r| r.misclassified.last().map(|&m| m as f64)).collect();
            let per_round = (0..spec.policy.budget)
                .map(|t| Summary::of(&mine.iter().map(|r| r.oc_series[t]).collect::<Vec<_>>()))
                .collect();
            PolicySummary {
                policy,
                n_ok: mine.len(),
                n_failed: failures.iter().filter(|f| f.policy == policy).count(),
                final_oc: Summary::of(&finals),
                final_misclassified: Summary::of(&miscl),
                per_round,
            }
        })
        .collect()
}

/// Run every requested policy on every replication seed, in parallel.
///
/// Results come back ordered by replication, then by policy, regardless of
/// scheduling. Failed runs are recorded and left out of the aggregates.
pub fn run_replications(spec: &ExperimentSpec, seeds: &[u64]) -> Result<ReplicationReport> {
    spec.validate()?;
    if seeds.is_empty() {
        return Err(invalid("need at least one replication"));
    }
    let tasks: Vec<(usize, u64, PolicyKind)> =
        seeds.iter().enumerate().flat_map(|(rep, &seed)| spec.policies.iter().map(move |&k| (rep, seed, k))).collect();
    let outcomes: Vec<std::result::Result<RunResult, RunFailure>> = tasks
        .par_iter()
        .map(|&(rep, seed, kind)| {
            replication_problem(&spec.truth, seed)
                .and_then(|problem| run_detailed(spec, &problem, kind, rep, seed))
                .map(|(r, _)| r)
                .map_err(|e| RunFailure { policy: kind, rep, seed, message: e.to_string() })
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => runs.push(r),
            Err(f) => {
                log::warn!("replication {} of {} failed: {}", f.rep, f.policy, f.message);
                failures.push(f);
            }
        }
    }
    let summaries = summarize(spec, &runs, &failures);
    Ok(ReplicationReport { runs, failures, summaries })
}

/// Final misclassified-group counts over a grid of λ multipliers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub policy: PolicyKind,
    pub lambda_mult: f64,
    pub misclassified: Summary,
    pub n_failed: usize,
}

/// Sweep the λ multiplier. Sparse policies are rerun at every grid point since λ
/// drives their decisions; KGLin runs once and its data are refit at each point.
pub fn lambda_sweep(spec: &ExperimentSpec, seeds: &[u64], grid: &[f64]) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    if grid.iter().any(|g| !(*g >= 0.0)) {
        return Err(invalid("lambda multipliers must be nonnegative"));
    }
    let mut tasks: Vec<(PolicyKind, usize, Option<usize>)> = Vec::new();
    for &kind in &spec.policies {
        for rep in 0..seeds.len() {
            if kind.is_sparse() {
                tasks.extend((0..grid.len()).map(|g| (kind, rep, Some(g))));
            } else {
                tasks.push((kind, rep, None));
            }
        }
    }
    // each task yields (grid index, misclassified) pairs, or the grid points it failed to cover
    let outcomes: Vec<(PolicyKind, std::result::Result<Vec<(usize, usize)>, Vec<usize>>)> = tasks
        .par_iter()
        .map(|&(kind, rep, g)| {
            let seed = seeds[rep];
            let run = || -> Result<Vec<(usize, usize)>> {
                let problem = replication_problem(&spec.truth, seed)?;
                let n_groups = problem.groups.n_groups();
                match g {
                    Some(g) => {
                        let mut local = spec.clone();
                        local.policy.lambda_mult = grid[g];
                        let (r, _) = run_detailed(&local, &problem, kind, rep, seed)?;
                        Ok(vec![(g, r.misclassified.last().copied().unwrap_or(0))])
                    }
                    None => {
                        let (r, lasso) = run_detailed(spec, &problem, kind, rep, seed)?;
                        let noise_var = r.noise_sd * r.noise_sd;
                        grid.iter()
                            .enumerate()
                            .map(|(g, &mult)| {
                                let config = PolicyConfig { lambda_mult: mult, noise_var, ..spec.policy.clone() };
                                let lambda = config.lambda(&problem.groups, lasso.n_obs);
                                let fit = solve_batch(&lasso.gram, &lasso.moment, lambda, &problem.groups, spec.policy.lasso_tol)?;
                                Ok((g, count_misclassified_groups(&fit.support_groups(), &problem.true_support, n_groups)?))
                            })
                            .collect()
                    }
                }
            };
            let outcome = run().map_err(|e| {
                log::warn!("sweep replication {rep} of {kind} failed: {e}");
                g.map_or_else(|| (0..grid.len()).collect(), |g| vec![g])
            });
            (kind, outcome)
        })
        .collect();
    let mut rows = Vec::new();
    for &kind in &spec.policies {
        for (g, &mult) in grid.iter().enumerate() {
            let mut values = Vec::new();
            let mut n_failed = 0;
            for (_, o) in outcomes.iter().filter(|(k, _)| *k == kind) {
                match o {
                    Ok(pairs) => values.extend(pairs.iter().filter(|(gi, _)| *gi == g).map(|&(_, m)| m as f64)),
                    Err(missed) => n_failed += missed.contains(&g) as usize,
                }
            }
            rows.push(SweepRow { policy: kind, lambda_mult: mult, misclassified: Summary::of(&values), n_failed });
        }
    }
    Ok(rows)
}
