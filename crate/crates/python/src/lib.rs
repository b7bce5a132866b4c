use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sparse_kg::belief::{beta_bernoulli_update, fuse_posterior, GroupStructure, SparseBeliefState};
use sparse_kg::config::ExperimentConfig;
use sparse_kg::lasso::{recursive_update, solve_batch, LassoState};
use sparse_kg::splines::SplineBasis;

fn err(e: sparse_kg::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn groups(g: Vec<Vec<usize>>) -> PyResult<GroupStructure> {
    GroupStructure::new(g).map_err(err)
}

/// `E[max_i (a_i + b_i Z)] - max_i a_i` for standard normal `Z`.
#[pyfunction]
fn compute_h(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    sparse_kg::kg::compute_h(&a, &b).map_err(err)
}

/// Recursive l1,inf group Lasso over running sufficient statistics.
#[pyclass(name = "GroupLasso")]
struct PyGroupLasso {
    inner: LassoState,
}

#[pymethods]
impl PyGroupLasso {
    #[new]
    #[pyo3(signature = (groups, tol = 1e-9))]
    fn new(groups: Vec<Vec<usize>>, tol: f64) -> PyResult<Self> {
        let g = self::groups(groups)?;
        Ok(Self { inner: LassoState::empty(g, 0.0, tol).map_err(err)? })
    }

    /// Fold in one observation and move to the penalty `lam`.
    fn update(&mut self, x: Vec<f64>, y: f64, lam: f64) -> PyResult<()> {
        self.inner = recursive_update(&self.inner, &DVector::from_vec(x), y, lam).map_err(err)?;
        Ok(())
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.iter().copied().collect()
    }

    #[getter]
    fn lam(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn n_obs(&self) -> usize {
        self.inner.n_obs
    }

    fn support_groups(&self) -> Vec<usize> {
        self.inner.support_groups()
    }

    fn gram(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.gram)
    }

    fn moment(&self) -> Vec<f64> {
        self.inner.moment.iter().copied().collect()
    }
}

/// Minimizer of the group Lasso objective for the given statistics.
#[pyfunction]
#[pyo3(signature = (gram, moment, lam, groups, tol = 1e-9))]
fn lasso_solve(gram: Vec<Vec<f64>>, moment: Vec<f64>, lam: f64, groups: Vec<Vec<usize>>, tol: f64) -> PyResult<Vec<f64>> {
    let state = solve_batch(&matrix(&gram)?, &DVector::from_vec(moment), lam, &self::groups(groups)?, tol).map_err(err)?;
    Ok(state.beta.iter().copied().collect())
}

/// Gaussian belief on the coefficients with Beta inclusion counts per group.
#[pyclass(name = "SparseBelief")]
#[derive(Clone)]
struct PySparseBelief {
    inner: SparseBeliefState,
}

#[pymethods]
impl PySparseBelief {
    #[new]
    #[pyo3(signature = (groups, variance, xi0 = 1.0, eta0 = 1.0))]
    fn new(groups: Vec<Vec<usize>>, variance: f64, xi0: f64, eta0: f64) -> PyResult<Self> {
        let inner = SparseBeliefState::with_isotropic_prior(self::groups(groups)?, variance, xi0, eta0).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.vartheta.iter().copied().collect()
    }

    #[getter]
    fn covariance(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.sigma_vartheta)
    }

    #[getter]
    fn counts(&self) -> Vec<(f64, f64)> {
        self.inner.beta_counts.iter().map(|c| (c.xi, c.eta)).collect()
    }

    /// Sparse KG value of every row of `alternatives`.
    #[pyo3(signature = (alternatives, noise_var, max_terms = 16))]
    fn kg_values(&self, alternatives: Vec<Vec<f64>>, noise_var: f64, max_terms: usize) -> PyResult<Vec<f64>> {
        sparse_kg::kg::kg_values_sparse(&self.inner, &matrix(&alternatives)?, noise_var, max_terms).map_err(err)
    }

    /// Precision-weighted fusion with an estimate on the coordinates `support`.
    fn fuse(&self, mean: Vec<f64>, covariance: Vec<Vec<f64>>, support: Vec<usize>) -> PyResult<Self> {
        let inner = fuse_posterior(&self.inner, &DVector::from_vec(mean), &matrix(&covariance)?, &support).map_err(err)?;
        Ok(Self { inner })
    }

    /// Count one inclusion for each group in `selected`, one exclusion for the rest.
    fn observe_support(&self, selected: Vec<usize>) -> Self {
        Self { inner: beta_bernoulli_update(&self.inner, &selected) }
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self { inner: SparseBeliefState::from_json(s).map_err(err)? })
    }
}

/// Normalized B-spline basis on a clamped uniform knot sequence.
#[pyclass(name = "SplineBasis")]
struct PySplineBasis {
    inner: SplineBasis,
}

#[pymethods]
impl PySplineBasis {
    #[new]
    #[pyo3(signature = (lo, hi, interior, order = 4))]
    fn new(lo: f64, hi: f64, interior: usize, order: usize) -> PyResult<Self> {
        Ok(Self { inner: SplineBasis::uniform(lo, hi, interior, order).map_err(err)? })
    }

    #[getter]
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn eval(&self, x: f64) -> Vec<f64> {
        self.inner.eval(x).iter().copied().collect()
    }
}

/// TOML for a named preset: "fig1", "table2" (Matyas, sd 1) or "spam".
#[pyfunction]
fn preset(name: &str) -> PyResult<String> {
    let config = match name {
        "fig1" => ExperimentConfig::fig1(0.05),
        "table2" => ExperimentConfig::table2(sparse_kg::sim::TestFunction::Matyas, 1.0),
        "spam" => ExperimentConfig::spam(),
        other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
    };
    config.to_toml_string().map_err(err)
}

/// Run the experiment described by a TOML string; returns `{file name: contents}`.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: &str) -> PyResult<Vec<(String, String)>> {
    let config = ExperimentConfig::from_toml_str(config).map_err(err)?;
    let output = py.detach(|| sparse_kg::report::run_experiment(&config)).map_err(err)?;
    Ok(output.files)
}

#[pymodule]
fn sparsekg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(compute_h, m)?)?;
    m.add_function(wrap_pyfunction!(lasso_solve, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<PyGroupLasso>()?;
    m.add_class::<PySparseBelief>()?;
    m.add_class::<PySplineBasis>()?;
    Ok(())
}
