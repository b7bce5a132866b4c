//! Experiment configuration files (TOML) and the named presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lasso::CovarianceOptions;
use crate::policy::{PolicyConfig, PolicyKind};
use crate::sim::{EmbeddedSpec, ExperimentSpec, NoiseLevel, PriorSpec, SparseLinearSpec, SsAnovaSpec, TestFunction, TruthSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// λ schedule constants and the optional sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaConfig {
    /// `c₀ = multiplier · σ_ε`.
    pub multiplier: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<f64>,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        Self { multiplier: PolicyConfig::default().lambda_mult, sweep: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_terms: usize,
    pub mc_samples: usize,
    pub c_min: f64,
    pub c_max: f64,
    pub warmup_rounds: usize,
    /// Center the Lasso statistics; defaults to the truth's choice.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<bool>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            tolerance: p.lasso_tol,
            max_terms: p.max_terms,
            mc_samples: p.covariance.n_samples,
            c_min: p.covariance.c_min,
            c_max: p.covariance.c_max,
            warmup_rounds: p.warmup_rounds,
            center: None,
        }
    }
}

/// One experiment: truth, policies, budget, replications and solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub seed: u64,
    pub replications: usize,
    pub budget: usize,
    pub policies: Vec<PolicyKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub traces: bool,
    pub truth: TruthSpec,
    pub noise: NoiseLevel,
    #[serde(default)]
    pub lambda: LambdaConfig,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema {} (expected {SCHEMA_VERSION})", self.schema)));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.solver.mc_samples < 2 {
            return Err(Error::Config("mc_samples must be at least 2".into()));
        }
        self.to_spec().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// The runner's view of this configuration.
    pub fn to_spec(&self) -> ExperimentSpec {
        let s = &self.solver;
        ExperimentSpec {
            truth: self.truth.clone(),
            policies: self.policies.clone(),
            policy: PolicyConfig {
                budget: self.budget,
                noise_var: 1.0,
                seed: self.seed,
                max_terms: s.max_terms,
                lambda_mult: self.lambda.multiplier,
                warmup_rounds: s.warmup_rounds,
                covariance: CovarianceOptions { n_samples: s.mc_samples, c_min: s.c_min, c_max: s.c_max },
                lasso_tol: s.tolerance,
                center: false,
            },
            prior: self.prior,
            noise: self.noise,
            center: s.center,
            traces: self.traces,
        }
    }

    fn base(truth: TruthSpec, policies: Vec<PolicyKind>, noise: NoiseLevel, budget: usize) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            seed: 0,
            replications: 100,
            budget,
            policies,
            output_dir: None,
            traces: false,
            truth,
            noise,
            lambda: LambdaConfig::default(),
            prior: PriorSpec::default(),
            solver: SolverConfig::default(),
        }
    }

    /// Sparse linear truth with KGSpLin, KGLin and exploration, plus a λ sweep.
    pub fn fig1(noise_fraction: f64) -> Self {
        let mut c = Self::base(
            TruthSpec::SparseLinear(SparseLinearSpec::default()),
            vec![PolicyKind::KgSpLin, PolicyKind::KgLin, PolicyKind::Explore],
            NoiseLevel::RangeFraction(noise_fraction),
            200,
        );
        c.lambda = LambdaConfig { multiplier: FIG1_LAMBDA, sweep: FIG1_SWEEP.to_vec() };
        c.prior.variance = FIG1_PRIOR_VARIANCE;
        c
    }

    /// A benchmark function hidden among nuisance variables, KGSpLin against KGLin.
    pub fn table2(function: TestFunction, noise_sd: f64) -> Self {
        let mut c = Self::base(
            TruthSpec::EmbeddedTestFunction(EmbeddedSpec::new(function)),
            vec![PolicyKind::KgSpLin, PolicyKind::KgLin],
            NoiseLevel::Sd(noise_sd),
            50,
        );
        c.lambda.multiplier = TABLE2_LAMBDA;
        c
    }

    /// The sparse additive experiment, KGSpAM against KGLin.
    pub fn spam() -> Self {
        let mut c = Self::base(
            TruthSpec::SsAnova(SsAnovaSpec::default()),
            vec![PolicyKind::KgSpAm, PolicyKind::KgLin],
            NoiseLevel::RangeFraction(SPAM_NOISE_FRACTION),
            30,
        );
        c.replications = 20;
        c.lambda.multiplier = SPAM_LAMBDA;
        c
    }
}

/// Default λ multiplier for the sparse linear experiment.
pub const FIG1_LAMBDA: f64 = 0.5;
/// Logarithmic λ-multiplier grid for the misclassification sweep.
pub const FIG1_SWEEP: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
/// Coefficient prior variance for the sparse linear experiment.
pub const FIG1_PRIOR_VARIANCE: f64 = 400.0;
pub const TABLE2_LAMBDA: f64 = 0.1;
pub const SPAM_LAMBDA: f64 = 0.1;
/// Noise sd of the sparse additive experiment as a fraction of the truth's range.
pub const SPAM_NOISE_FRACTION: f64 = 0.2;

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema = 1
seed = 7
replications = 1
budget = 5
policies = ["kgsplin"]

[truth]
kind = "sparse-linear"
n_groups = 3
group_size = 2
relevant_groups = 1
n_alternatives = 6

[noise]
sd = 0.5
"#;

    #[test]
    fn minimal_config_parses() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.budget, 5);
        assert_eq!(c.noise, NoiseLevel::Sd(0.5));
        match &c.truth {
            TruthSpec::SparseLinear(s) => {
                assert_eq!((s.n_groups, s.group_size, s.mean_lo), (3, 2, 11.0));
            }
            other => panic!("wrong truth {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("budget = 5", "budget = 5\nbudgte = 6");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(Error::Config(_))));
        let bad = MINIMAL.replace("n_groups = 3", "n_groups = 3\ngroups = 3");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let bad = MINIMAL.replace("sd = 0.5", "sd = 0.5\nsdd = 1");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn schema_and_policies_are_checked() {
        assert!(ExperimentConfig::from_toml_str(&MINIMAL.replace("schema = 1", "schema = 2")).is_err());
        assert!(ExperimentConfig::from_toml_str(&MINIMAL.replace("[\"kgsplin\"]", "[\"greedy\"]")).is_err());
        assert!(ExperimentConfig::from_toml_str(&MINIMAL.replace("[\"kgsplin\"]", "[\"kgspam\"]")).is_err());
        assert!(ExperimentConfig::from_toml_str(&MINIMAL.replace("seed = 7\n", "")).is_err());
    }

    #[test]
    fn presets_round_trip() {
        for c in [ExperimentConfig::fig1(0.05), ExperimentConfig::table2(TestFunction::Trid, 10.0), ExperimentConfig::spam()] {
            c.validate().unwrap();
            let text = c.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
        }
    }
}
