//! Truth generators, benchmark functions, metrics and the replication runner.

mod functions;
mod metrics;
mod runner;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::belief::GroupStructure;
use crate::error::{invalid, Result};
use crate::splines::{AdditiveFeatureMap, Component, SplineBasis};

pub use functions::{f3, f4, f5, test_function, three_hump, three_hump_local_minima, TestFunction};
pub use metrics::{count_misclassified_groups, opportunity_cost, separation, Summary};
pub use runner::{
    lambda_sweep, replication_problem, replication_seeds, run_policy, run_replications, ExperimentSpec, NoiseLevel, PolicySummary, PriorSpec,
    ReplicationReport, RunFailure, RunResult, SweepRow, TraceRecord,
};

/// Linear truth with a few nonzero groups of coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparseLinearSpec {
    pub n_groups: usize,
    pub group_size: usize,
    pub relevant_groups: usize,
    /// Coefficient means run linearly from `mean_lo` to `mean_hi` over the relevant coordinates.
    pub mean_lo: f64,
    pub mean_hi: f64,
    /// Coefficient standard deviation as a fraction of its mean.
    pub relative_sd: f64,
    pub n_alternatives: usize,
    pub alternative_mean: f64,
    pub alternative_sd: f64,
}

impl Default for SparseLinearSpec {
    fn default() -> Self {
        Self {
            n_groups: 10,
            group_size: 10,
            relevant_groups: 2,
            mean_lo: 11.0,
            mean_hi: 30.0,
            relative_sd: 0.3,
            n_alternatives: 100,
            alternative_mean: 0.0,
            alternative_sd: 1.0,
        }
    }
}

/// A low-dimensional benchmark hidden among nuisance variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddedSpec {
    pub function: TestFunction,
    #[serde(default = "EmbeddedSpec::default_p")]
    pub p: usize,
    #[serde(default = "EmbeddedSpec::default_alternatives")]
    pub n_alternatives: usize,
    /// Truth values are rescaled to span exactly this range over the alternatives.
    #[serde(default = "EmbeddedSpec::default_range")]
    pub range: f64,
    /// Interior knots per variable.
    #[serde(default)]
    pub knots: usize,
    #[serde(default = "EmbeddedSpec::default_order")]
    pub order: usize,
    /// Domain of every nuisance variable.
    #[serde(default = "EmbeddedSpec::default_nuisance")]
    pub nuisance_domain: (f64, f64),
}

impl EmbeddedSpec {
    fn default_p() -> usize {
        200
    }
    fn default_alternatives() -> usize {
        400
    }
    fn default_range() -> f64 {
        100.0
    }
    fn default_order() -> usize {
        4
    }
    fn default_nuisance() -> (f64, f64) {
        (0.0, 1.0)
    }

    pub fn new(function: TestFunction) -> Self {
        Self {
            function,
            p: Self::default_p(),
            n_alternatives: Self::default_alternatives(),
            range: Self::default_range(),
            knots: 0,
            order: Self::default_order(),
            nuisance_domain: Self::default_nuisance(),
        }
    }
}

/// Additive truth `−(f₁₂(x₁, x₂) + f₃(x₃) + f₄(x₄) + f₅(x₅))` with the remaining variables irrelevant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsAnovaSpec {
    pub p: usize,
    pub n_alternatives: usize,
    pub knots: usize,
    pub order: usize,
}

impl Default for SsAnovaSpec {
    fn default() -> Self {
        Self { p: 100, n_alternatives: 400, knots: 4, order: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TruthSpec {
    SparseLinear(SparseLinearSpec),
    EmbeddedTestFunction(EmbeddedSpec),
    SsAnova(SsAnovaSpec),
}

impl TruthSpec {
    /// Number of input variables (features for the linear truth).
    pub fn dimension(&self) -> usize {
        match self {
            TruthSpec::SparseLinear(s) => s.n_groups * s.group_size,
            TruthSpec::EmbeddedTestFunction(s) => s.p,
            TruthSpec::SsAnova(s) => s.p,
        }
    }

    pub fn n_alternatives(&self) -> usize {
        match self {
            TruthSpec::SparseLinear(s) => s.n_alternatives,
            TruthSpec::EmbeddedTestFunction(s) => s.n_alternatives,
            TruthSpec::SsAnova(s) => s.n_alternatives,
        }
    }

    /// Input box of each variable; the linear truth has none.
    pub fn domains(&self) -> Vec<(f64, f64)> {
        match self {
            TruthSpec::SparseLinear(_) => vec![],
            TruthSpec::EmbeddedTestFunction(s) => {
                let mut d = s.function.domain();
                d.resize(s.p, s.nuisance_domain);
                d
            }
            TruthSpec::SsAnova(s) => {
                let mut d = vec![(-5.0, 5.0); 2];
                d.resize(s.p, (0.0, 1.0));
                d
            }
        }
    }

    /// Whether the Lasso should profile out an intercept by default.
    pub fn centers_by_default(&self) -> bool {
        !matches!(self, TruthSpec::SparseLinear(_))
    }

    pub fn is_additive(&self) -> bool {
        !matches!(self, TruthSpec::SparseLinear(_))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_alternatives() == 0 {
            return Err(invalid("need at least one alternative"));
        }
        match self {
            TruthSpec::SparseLinear(s) => {
                if s.n_groups == 0 || s.group_size == 0 {
                    return Err(invalid("need at least one nonempty group"));
                }
                if s.relevant_groups > s.n_groups {
                    return Err(invalid("more relevant groups than groups"));
                }
                if !(s.alternative_sd >= 0.0 && s.relative_sd >= 0.0) {
                    return Err(invalid("standard deviations must be nonnegative"));
                }
            }
            TruthSpec::EmbeddedTestFunction(s) => {
                if s.p < s.function.dimension() {
                    return Err(invalid(format!("p = {} cannot hold {}", s.p, s.function)));
                }
                if !(s.range > 0.0) {
                    return Err(invalid("range must be positive"));
                }
                if !(s.nuisance_domain.0 < s.nuisance_domain.1) {
                    return Err(invalid("empty nuisance domain"));
                }
                if s.order == 0 {
                    return Err(invalid("spline order must be at least 1"));
                }
            }
            TruthSpec::SsAnova(s) => {
                if s.p < 5 {
                    return Err(invalid("the additive truth needs at least five variables"));
                }
                if s.order == 0 {
                    return Err(invalid("spline order must be at least 1"));
                }
            }
        }
        Ok(())
    }
}

/// A realized problem instance: alternatives, their features and true values.
#[derive(Debug, Clone)]
pub struct Problem {
    /// Feature rows `x̃` (M × m).
    pub alternatives: DMatrix<f64>,
    /// Raw inputs (M × p) for additive truths.
    pub raw: Option<DMatrix<f64>>,
    pub feature_map: Option<AdditiveFeatureMap>,
    pub groups: GroupStructure,
    pub truth_values: DVector<f64>,
    /// Groups whose true coefficients or component functions are nonzero.
    pub true_support: Vec<usize>,
    pub coefficients: Option<DVector<f64>>,
}

impl Problem {
    pub fn generate(spec: &TruthSpec, seed: u64) -> Result<Problem> {
        spec.validate()?;
        match spec {
            TruthSpec::SparseLinear(s) => gen_sparse_linear_truth(s, seed),
            TruthSpec::EmbeddedTestFunction(s) => gen_embedded_truth(s, seed),
            TruthSpec::SsAnova(s) => gen_ssanova_truth(s, seed),
        }
    }

    /// `max µ − min µ` over the alternatives.
    pub fn truth_range(&self) -> f64 {
        self.truth_values.max() - self.truth_values.min()
    }

    pub fn n_alternatives(&self) -> usize {
        self.alternatives.nrows()
    }
}

fn normal(mean: f64, sd: f64) -> Result<Normal<f64>> {
    Normal::new(mean, sd).map_err(|e| invalid(e.to_string()))
}

/// Sparse linear truth: the first `relevant_groups` groups carry Gaussian coefficients.
pub fn gen_sparse_linear_truth(spec: &SparseLinearSpec, seed: u64) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = GroupStructure::uniform(spec.n_groups, spec.group_size)?;
    let m = spec.n_groups * spec.group_size;
    let n_rel = spec.relevant_groups * spec.group_size;
    let mut alpha = DVector::zeros(m);
    for k in 0..n_rel {
        let mean = if n_rel > 1 {
            spec.mean_lo + (spec.mean_hi - spec.mean_lo) * k as f64 / (n_rel - 1) as f64
        } else {
            spec.mean_lo
        };
        alpha[k] = normal(mean, spec.relative_sd * mean.abs())?.sample(&mut rng);
    }
    let dist = normal(spec.alternative_mean, spec.alternative_sd)?;
    let alternatives = DMatrix::from_fn(spec.n_alternatives, m, |_, _| dist.sample(&mut rng));
    let truth_values = &alternatives * &alpha;
    Ok(Problem {
        alternatives,
        raw: None,
        feature_map: None,
        groups,
        truth_values,
        true_support: (0..spec.relevant_groups).collect(),
        coefficients: Some(alpha),
    })
}

fn sample_box<R: Rng>(rng: &mut R, domains: &[(f64, f64)], n: usize) -> DMatrix<f64> {
    let mut raw = DMatrix::zeros(n, domains.len());
    for i in 0..n {
        for (j, &(lo, hi)) in domains.iter().enumerate() {
            raw[(i, j)] = rng.random_range(lo..=hi);
        }
    }
    raw
}

fn spline_map(domains: &[(f64, f64)], knots: usize, order: usize, pairs: &[(usize, usize)]) -> Result<AdditiveFeatureMap> {
    let bases = domains.iter().map(|&(lo, hi)| SplineBasis::uniform(lo, hi, knots, order)).collect::<Result<Vec<_>>>()?;
    AdditiveFeatureMap::with_pairs(bases, pairs)
}

fn relevant_components(map: &AdditiveFeatureMap, n_relevant: usize) -> Vec<usize> {
    map.components()
        .iter()
        .enumerate()
        .filter(|(_, c)| match **c {
            Component::Main(v) => v < n_relevant,
            Component::Pair(a, b) => a < n_relevant || b < n_relevant,
        })
        .map(|(j, _)| j)
        .collect()
}

/// Negated benchmark on its domain, rescaled to the requested range, plus nuisance variables.
pub fn gen_embedded_truth(spec: &EmbeddedSpec, seed: u64) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = spec.function;
    let d = f.dimension();
    let truth = TruthSpec::EmbeddedTestFunction(spec.clone());
    let domains = truth.domains();
    let raw = sample_box(&mut rng, &domains, spec.n_alternatives);
    let mut mu = DVector::zeros(spec.n_alternatives);
    for i in 0..spec.n_alternatives {
        let x: Vec<f64> = (0..d).map(|j| raw[(i, j)]).collect();
        mu[i] = -f.eval(&x)?;
    }
    let (lo, hi) = (mu.min(), mu.max());
    if hi > lo {
        mu.apply(|v| *v = spec.range * (*v - lo) / (hi - lo));
    } else {
        mu.fill(0.0);
    }
    let map = spline_map(&domains, spec.knots, spec.order, &f.interactions())?;
    let alternatives = map.map_all(&raw)?;
    Ok(Problem {
        alternatives,
        raw: Some(raw),
        true_support: relevant_components(&map, d),
        groups: map.group_structure().clone(),
        feature_map: Some(map),
        truth_values: mu,
        coefficients: None,
    })
}

/// The additive truth of the sparse additive experiment, negated for maximization.
pub fn gen_ssanova_truth(spec: &SsAnovaSpec, seed: u64) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domains = TruthSpec::SsAnova(spec.clone()).domains();
    let raw = sample_box(&mut rng, &domains, spec.n_alternatives);
    let mu = DVector::from_fn(spec.n_alternatives, |i, _| {
        -(three_hump(raw[(i, 0)], raw[(i, 1)]) + f3(raw[(i, 2)]) + f4(raw[(i, 3)]) + f5(raw[(i, 4)]))
    });
    let map = spline_map(&domains, spec.knots, spec.order, &[(0, 1)])?;
    let alternatives = map.map_all(&raw)?;
    Ok(Problem {
        alternatives,
        raw: Some(raw),
        true_support: relevant_components(&map, 5),
        groups: map.group_structure().clone(),
        feature_map: Some(map),
        truth_values: mu,
        coefficients: None,
    })
}

/// Key region of the three-hump camel, where its three local minima lie.
pub const KEY_REGION: (f64, f64) = (-2.0, 2.0);

/// Square grid of points `lo..=hi` with `n` points per side, first coordinate slowest.
pub fn square_grid(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
    let ticks: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
    ticks.iter().flat_map(|&a| ticks.iter().map(move |&b| vec![a, b])).collect()
}

/// Grid point maximizing the estimated interaction surface of `x₁, x₂`, together
/// with its distance to the nearest local maximum of the negated three-hump camel.
pub fn localize_pair_maximum(map: &AdditiveFeatureMap, vartheta: &DVector<f64>, grid: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let comp = map
        .component_index(Component::Pair(0, 1))
        .ok_or_else(|| invalid("feature map has no (x1, x2) interaction"))?;
    let values = map.reconstruct_component(vartheta, comp, grid)?;
    let best = crate::kg::argmax_lowest(&values).ok_or(crate::error::Error::Empty("grid"))?;
    let pt = grid[best].clone();
    let dist = three_hump_local_minima()
        .iter()
        .map(|&(a, b)| ((pt[0] - a).powi(2) + (pt[1] - b).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min);
    Ok((pt, dist))
}
