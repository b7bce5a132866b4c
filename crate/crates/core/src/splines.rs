//! Normalized B-spline bases, tensor products and additive feature maps.

use nalgebra::{DMatrix, DVector};

use crate::belief::GroupStructure;
use crate::error::{dim, invalid, Error, Result};

/// Normalized B-spline basis of order `l` (degree `l − 1`) with `K` equally spaced
/// interior knots on `[lo, hi]`; its dimension is `K + l`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    breakpoints: Vec<f64>,
    knots: Vec<f64>,
    order: usize,
}

impl SplineBasis {
    pub fn uniform(lo: f64, hi: f64, interior: usize, order: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid(format!("spline domain [{lo}, {hi}] is empty")));
        }
        let step = (hi - lo) / (interior + 1) as f64;
        let breakpoints = (0..=interior + 1)
            .map(|i| if i == interior + 1 { hi } else { lo + step * i as f64 })
            .collect();
        Self::with_breakpoints(breakpoints, order)
    }

    /// Clamped basis on strictly increasing breakpoints `τ_0 < … < τ_{K+1}`.
    pub fn with_breakpoints(breakpoints: Vec<f64>, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(invalid("spline order must be at least 1"));
        }
        if breakpoints.len() < 2 || breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("breakpoints must be strictly increasing with at least two entries"));
        }
        let lo = breakpoints[0];
        let hi = *breakpoints.last().expect("nonempty");
        let mut knots = vec![lo; order];
        knots.extend_from_slice(&breakpoints[1..breakpoints.len() - 1]);
        knots.extend(std::iter::repeat_n(hi, order));
        Ok(Self { breakpoints, knots, order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of interior knots `K`.
    pub fn interior_knots(&self) -> usize {
        self.breakpoints.len() - 2
    }

    pub fn dimension(&self) -> usize {
        self.interior_knots() + self.order
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.breakpoints[0], *self.breakpoints.last().expect("nonempty"))
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Full clamped knot vector (end breakpoints repeated `l` times).
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn clamp(&self, x: f64) -> f64 {
        let (lo, hi) = self.domain();
        if x < lo || x > hi {
            log::warn!("spline input {x} outside [{lo}, {hi}]; clamped to the boundary");
        }
        x.clamp(lo, hi)
    }

    /// Values of all `d` basis functions at `x`.
    pub fn eval(&self, x: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dimension());
        let (first, vals) = self.eval_nonzero(x);
        for (i, v) in vals.into_iter().enumerate() {
            out[first + i] = v;
        }
        out
    }

    /// Index of the first nonzero basis function at `x` and the `l` values from there on.
    pub fn eval_nonzero(&self, x: f64) -> (usize, Vec<f64>) {
        let x = self.clamp(x);
        let l = self.order;
        let d = self.dimension();
        let t = &self.knots;
        // Knot span μ with t_μ ≤ x < t_{μ+1}; the right end belongs to the last span.
        let mu = if x >= t[d] { d - 1 } else { t[l - 1..=d].partition_point(|&k| k <= x) + l - 2 };
        let mut n = vec![0.0; l];
        let mut left = vec![0.0; l];
        let mut right = vec![0.0; l];
        n[0] = 1.0;
        for j in 1..l {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        (mu + 1 - l, n)
    }
}

/// Free-function form of [`SplineBasis::eval`].
pub fn eval_basis(basis: &SplineBasis, x: f64) -> DVector<f64> {
    basis.eval(x)
}

/// Tensor-product basis `φ_r(x_j) φ_q(x_k)`, flattened row-major in `(r, q)`.
pub fn eval_tensor(basis_j: &SplineBasis, basis_k: &SplineBasis, x_j: f64, x_k: f64) -> DVector<f64> {
    let a = basis_j.eval(x_j);
    let b = basis_k.eval(x_k);
    let dk = b.len();
    DVector::from_fn(a.len() * dk, |i, _| a[i / dk] * b[i % dk])
}

/// One additive component: a main effect of a single variable or a two-way interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Main(usize),
    Pair(usize, usize),
}

/// Map from raw alternatives to concatenated spline coefficients, one feature group
/// per additive component.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveFeatureMap {
    bases: Vec<SplineBasis>,
    components: Vec<Component>,
    offsets: Vec<usize>,
    groups: GroupStructure,
}

impl AdditiveFeatureMap {
    /// `bases[v]` is the basis of raw variable `v`; components are laid out in the given order.
    pub fn new(bases: Vec<SplineBasis>, components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Empty("component list"));
        }
        let n = bases.len();
        let mut sizes = Vec::with_capacity(components.len());
        for c in &components {
            match *c {
                Component::Main(v) if v < n => sizes.push(bases[v].dimension()),
                Component::Pair(a, b) if a < n && b < n && a != b => sizes.push(bases[a].dimension() * bases[b].dimension()),
                _ => return Err(invalid(format!("component {c:?} does not fit {n} variables"))),
            }
        }
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for s in &sizes {
            offsets.push(acc);
            acc += s;
        }
        let groups = GroupStructure::contiguous(&sizes)?;
        Ok(Self { bases, components, offsets, groups })
    }

    /// One main effect per variable.
    pub fn additive(bases: Vec<SplineBasis>) -> Result<Self> {
        let comps = (0..bases.len()).map(Component::Main).collect();
        Self::new(bases, comps)
    }

    /// The listed interactions first, then main effects for every variable that
    /// does not take part in an interaction.
    pub fn with_pairs(bases: Vec<SplineBasis>, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut paired = vec![false; bases.len()];
        let mut comps = Vec::new();
        for &(a, b) in pairs {
            if a >= bases.len() || b >= bases.len() {
                return Err(invalid(format!("pair ({a}, {b}) out of range")));
            }
            paired[a] = true;
            paired[b] = true;
            comps.push(Component::Pair(a, b));
        }
        comps.extend((0..bases.len()).filter(|&v| !paired[v]).map(Component::Main));
        Self::new(bases, comps)
    }

    pub fn n_variables(&self) -> usize {
        self.bases.len()
    }

    pub fn dimension(&self) -> usize {
        self.groups.n_features()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn group_structure(&self) -> &GroupStructure {
        &self.groups
    }

    pub fn basis(&self, variable: usize) -> &SplineBasis {
        &self.bases[variable]
    }

    /// Index of the component (and feature group) containing `Main(v)` or the pair `(a, b)`.
    pub fn component_index(&self, c: Component) -> Option<usize> {
        self.components.iter().position(|&x| x == c)
    }

    fn fill_component(&self, idx: usize, point: &[f64], out: &mut [f64]) {
        match self.components[idx] {
            Component::Main(v) => {
                let (first, vals) = self.bases[v].eval_nonzero(point[0]);
                out.iter_mut().for_each(|o| *o = 0.0);
                out[first..first + vals.len()].copy_from_slice(&vals);
            }
            Component::Pair(a, b) => {
                let t = eval_tensor(&self.bases[a], &self.bases[b], point[0], point[1]);
                out.copy_from_slice(t.as_slice());
            }
        }
    }

    fn component_point(&self, idx: usize, x_raw: &[f64]) -> [f64; 2] {
        match self.components[idx] {
            Component::Main(v) => [x_raw[v], 0.0],
            Component::Pair(a, b) => [x_raw[a], x_raw[b]],
        }
    }

    /// Feature vector of one raw alternative.
    pub fn map_alternative(&self, x_raw: &[f64]) -> Result<DVector<f64>> {
        if x_raw.len() != self.bases.len() {
            return Err(dim(format!("alternative has {} variables, map expects {}", x_raw.len(), self.bases.len())));
        }
        let mut out = DVector::zeros(self.dimension());
        for idx in 0..self.components.len() {
            let range = self.block(idx);
            let p = self.component_point(idx, x_raw);
            self.fill_component(idx, &p, &mut out.as_mut_slice()[range]);
        }
        Ok(out)
    }

    /// Feature matrix with one row per raw alternative (rows of `raw`).
    pub fn map_all(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(raw.nrows(), self.dimension());
        let mut buf = vec![0.0; raw.ncols()];
        for i in 0..raw.nrows() {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = raw[(i, j)];
            }
            let row = self.map_alternative(&buf)?;
            out.set_row(i, &row.transpose());
        }
        Ok(out)
    }

    fn block(&self, idx: usize) -> std::ops::Range<usize> {
        let start = self.offsets[idx];
        start..start + self.groups.group(idx).len()
    }

    /// Values of component `component` with coefficients taken from `vartheta`, at
    /// each grid point (one coordinate for main effects, two for interactions).
    pub fn reconstruct_component(&self, vartheta: &DVector<f64>, component: usize, grid: &[Vec<f64>]) -> Result<Vec<f64>> {
        if component >= self.components.len() {
            return Err(Error::OutOfRange { index: component, len: self.components.len() });
        }
        if vartheta.len() != self.dimension() {
            return Err(dim("coefficient vector does not match the feature map"));
        }
        let arity = match self.components[component] {
            Component::Main(_) => 1,
            Component::Pair(..) => 2,
        };
        let range = self.block(component);
        let coef = &vartheta.as_slice()[range.clone()];
        let mut buf = vec![0.0; range.len()];
        grid.iter()
            .map(|pt| {
                if pt.len() != arity {
                    return Err(dim(format!("grid point has {} coordinates, component needs {arity}", pt.len())));
                }
                let p = [pt[0], if arity == 2 { pt[1] } else { 0.0 }];
                self.fill_component(component, &p, &mut buf);
                Ok(buf.iter().zip(coef).map(|(a, b)| a * b).sum())
            })
            .collect()
    }
}

/// Least-squares spline coefficients for samples `(xs, ys)`.
pub fn least_squares_fit(basis: &SplineBasis, xs: &[f64], ys: &[f64]) -> Result<DVector<f64>> {
    if xs.len() != ys.len() {
        return Err(dim("sample abscissae and ordinates differ in length"));
    }
    let d = basis.dimension();
    let mut design = DMatrix::zeros(xs.len(), d);
    for (i, &x) in xs.iter().enumerate() {
        design.set_row(i, &basis.eval(x).transpose());
    }
    let y = DVector::from_column_slice(ys);
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * y;
    gram.cholesky().map(|c| c.solve(&rhs)).ok_or(Error::Singular("spline design"))
}
