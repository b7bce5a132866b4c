//! Knowledge-gradient values for correlated and sparse linear beliefs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};
use libm::erfc;

use crate::belief::{BetaCounts, LookupBelief, SparseBeliefState};
use crate::error::{dim, invalid, Error, Result};
use crate::linalg::{select_columns, submatrix, subvector, symmetrize};

/// Default number of sparsity realizations kept in the weighted KG sum.
pub const DEFAULT_MAX_TERMS: usize = 16;

/// Slopes closer than this are treated as equal when building the envelope.
const SLOPE_TIE: f64 = 1e-12;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn std_normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `f(z) = φ(z) + z Φ(z)`, the expected positive part of `z + Z` for standard normal `Z`.
pub fn f_scalar(z: f64) -> f64 {
    if z >= -5.0 {
        return (std_normal_pdf(z) + z * std_normal_cdf(z)).max(0.0);
    }
    // Deep left tail: f(-t) = φ(t) (1 - t R(t)) with R the Mills ratio.
    // With R(t) = 1 / (t + u) the bracket becomes u / (t + u), free of cancellation.
    let t = -z;
    let mut c = 0.0;
    for k in (2..=30).rev() {
        c = k as f64 / (t + c);
    }
    let u = 1.0 / (t + c);
    std_normal_pdf(t) * u / (t + u)
}

/// Pairs of intercepts `a` and slopes `b` of the lines `a_i + b_i Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePairSet {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffinePairSet {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        check_pairs(&a, &b)?;
        Ok(Self { a, b })
    }

    pub fn h(&self) -> Result<f64> {
        compute_h(&self.a, &self.b)
    }
}

fn check_pairs(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Empty("affine pair set"));
    }
    if a.len() != b.len() {
        return Err(dim(format!("{} intercepts but {} slopes", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(invalid("affine pairs must be finite"));
    }
    Ok(())
}

/// `E[max_i (a_i + b_i Z)] - max_i a_i` for standard normal `Z`.
///
/// Lines are sorted by slope, ties keep the larger intercept, and lines that never
/// attain the upper envelope are discarded with a single stack scan.
pub fn compute_h(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pairs(a, b)?;
    let mut scratch = Envelope::default();
    Ok(scratch.h(a.iter().copied().zip(b.iter().copied())))
}

/// Reusable buffers for envelope computations.
#[derive(Default)]
struct Envelope {
    lines: Vec<(f64, f64)>,
    // envelope lines as (a, b, left breakpoint)
    hull: Vec<(f64, f64, f64)>,
}

impl Envelope {
    fn h(&mut self, pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
        self.lines.clear();
        self.lines.extend(pairs.map(|(a, b)| (b, a)));
        self.lines.sort_unstable_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
        let env = &mut self.hull;
        env.clear();
        for &(bi, ai) in &self.lines {
            if let Some(&(at, bt, _)) = env.last() {
                if (bi - bt).abs() < SLOPE_TIE {
                    if ai <= at {
                        continue;
                    }
                    env.pop();
                }
            }
            let mut cut = f64::NEG_INFINITY;
            while let Some(&(at, bt, ct)) = env.last() {
                let c = (at - ai) / (bi - bt);
                if c <= ct {
                    env.pop();
                } else {
                    cut = c;
                    break;
                }
            }
            env.push((ai, bi, cut));
        }
        let mut h = 0.0;
        for w in env.windows(2) {
            let (_, b0, _) = w[0];
            let (_, b1, c1) = w[1];
            h += (b1 - b0) * f_scalar(-c1.abs());
        }
        h.max(0.0)
    }
}

/// Predictive change direction `σ̃ = Σ e_x / sqrt(σ² + Σ_xx)` for one alternative.
pub fn sigma_tilde(cov_row: &DVector<f64>, cov_diag_xx: f64, noise_var: f64) -> Result<DVector<f64>> {
    let denom = noise_var + cov_diag_xx;
    if !(denom > 0.0) {
        return Err(Error::NonpositiveVariance(denom));
    }
    Ok(cov_row / denom.sqrt())
}

/// One on/off configuration of the groups together with its prior probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityRealization {
    pub zeta: Vec<bool>,
    pub weight: f64,
}

impl SparsityRealization {
    pub fn active_groups(&self) -> Vec<usize> {
        self.zeta.iter().enumerate().filter(|(_, &z)| z).map(|(j, _)| j).collect()
    }
}

#[derive(Debug, PartialEq)]
struct Candidate {
    weight: f64,
    flips: Vec<usize>,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.weight.total_cmp(&other.weight).then_with(|| other.flips.cmp(&self.flips))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The `max_terms` most probable realizations under independent Beta-Bernoulli
/// inclusion, in nonincreasing order of weight.
///
/// Starts from the most likely configuration and explores flips of the least
/// confident groups best-first. Realizations of probability zero are never returned.
pub fn enumerate_realizations(beta_counts: &[BetaCounts], max_terms: usize) -> Result<Vec<SparsityRealization>> {
    if max_terms == 0 {
        return Err(invalid("max_terms must be at least 1"));
    }
    beta_counts.iter().try_for_each(BetaCounts::validate)?;
    let q: Vec<f64> = beta_counts.iter().map(BetaCounts::inclusion_probability).collect();
    let mode: Vec<bool> = q.iter().map(|&qj| qj >= 0.5).collect();
    let weight_of = |zeta: &[bool]| -> f64 {
        zeta.iter().zip(&q).map(|(&z, &qj)| if z { qj } else { 1.0 - qj }).product()
    };

    // Flip candidates sorted by likelihood ratio, most plausible first.
    let mut flippable: Vec<(usize, f64)> = q
        .iter()
        .enumerate()
        .map(|(j, &qj)| (j, qj.min(1.0 - qj) / qj.max(1.0 - qj)))
        .filter(|&(_, r)| r > 0.0)
        .collect();
    flippable.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));

    let realize = |flips: &[usize]| -> Vec<bool> {
        let mut z = mode.clone();
        for &k in flips {
            let j = flippable[k].0;
            z[j] = !z[j];
        }
        z
    };

    let mut out = Vec::with_capacity(max_terms);
    let w0 = weight_of(&mode);
    out.push(SparsityRealization { zeta: mode.clone(), weight: w0 });

    let mut heap = BinaryHeap::new();
    if !flippable.is_empty() {
        let z = realize(&[0]);
        heap.push(Candidate { weight: weight_of(&z), flips: vec![0] });
    }
    while out.len() < max_terms {
        let Some(cand) = heap.pop() else { break };
        if cand.weight <= 0.0 {
            break;
        }
        let last = *cand.flips.last().expect("candidates are nonempty");
        if last + 1 < flippable.len() {
            let mut extend = cand.flips.clone();
            extend.push(last + 1);
            let z = realize(&extend);
            heap.push(Candidate { weight: weight_of(&z), flips: extend });

            let mut shift = cand.flips.clone();
            *shift.last_mut().expect("nonempty") = last + 1;
            let z = realize(&shift);
            heap.push(Candidate { weight: weight_of(&z), flips: shift });
        }
        out.push(SparsityRealization { zeta: realize(&cand.flips), weight: cand.weight });
    }
    Ok(out)
}

/// KG values of every alternative under a correlated normal belief on the alternative values.
pub fn kg_values_lookup(belief: &LookupBelief, noise_var: f64) -> Result<Vec<f64>> {
    kg_values_from_cov(belief.theta.as_slice(), &belief.sigma, noise_var)
}

fn kg_values_from_cov(a: &[f64], cov: &DMatrix<f64>, noise_var: f64) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(Error::Empty("affine pair set"));
    }
    if a.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return Err(invalid("affine pairs must be finite"));
    }
    let mut scratch = Envelope::default();
    let mut out = Vec::with_capacity(a.len());
    for x in 0..a.len() {
        let denom = noise_var + cov[(x, x)];
        if !(denom > 0.0) {
            return Err(Error::NonpositiveVariance(denom));
        }
        let s = denom.sqrt().recip();
        out.push(scratch.h(a.iter().copied().zip(cov.column(x).iter().map(|&c| c * s))));
    }
    Ok(out)
}

fn check_state_alternatives(state: &SparseBeliefState, alternatives: &DMatrix<f64>) -> Result<()> {
    if alternatives.nrows() == 0 {
        return Err(Error::Empty("alternative matrix"));
    }
    if alternatives.ncols() != state.vartheta.len() {
        return Err(dim(format!(
            "alternatives have {} features, belief has {}",
            alternatives.ncols(),
            state.vartheta.len()
        )));
    }
    Ok(())
}

/// Sparse KG values of all alternatives: for each enumerated realization, the KG
/// value under the belief restricted to the active groups, weighted by its probability.
pub fn kg_values_sparse(
    state: &SparseBeliefState,
    alternatives: &DMatrix<f64>,
    noise_var: f64,
    max_terms: usize,
) -> Result<Vec<f64>> {
    check_state_alternatives(state, alternatives)?;
    let n_alt = alternatives.nrows();
    let mut total = vec![0.0; n_alt];
    for real in enumerate_realizations(&state.beta_counts, max_terms)? {
        let cols = state.groups.features_of(&real.active_groups());
        if cols.is_empty() {
            continue;
        }
        let x_c = select_columns(alternatives, &cols);
        let a = &x_c * subvector(&state.vartheta, &cols);
        let mut cov = &x_c * submatrix(&state.sigma_vartheta, &cols, &cols) * x_c.transpose();
        symmetrize(&mut cov);
        let values = kg_values_from_cov(a.as_slice(), &cov, noise_var)?;
        for (t, v) in total.iter_mut().zip(values) {
            *t += real.weight * v;
        }
    }
    Ok(total)
}

/// Sparse KG value of the single alternative `x`.
pub fn kg_value_sparse(
    state: &SparseBeliefState,
    alternatives: &DMatrix<f64>,
    x: usize,
    noise_var: f64,
    max_terms: usize,
) -> Result<f64> {
    check_state_alternatives(state, alternatives)?;
    let n_alt = alternatives.nrows();
    if x >= n_alt {
        return Err(Error::OutOfRange { index: x, len: n_alt });
    }
    let mut total = 0.0;
    for real in enumerate_realizations(&state.beta_counts, max_terms)? {
        let cols = state.groups.features_of(&real.active_groups());
        if cols.is_empty() {
            continue;
        }
        let x_c = select_columns(alternatives, &cols);
        let a = &x_c * subvector(&state.vartheta, &cols);
        // Only the x-th column of the induced covariance is needed.
        let s_cc = submatrix(&state.sigma_vartheta, &cols, &cols);
        let row_x = x_c.row(x).transpose();
        let cov_col = &x_c * (&s_cc * &row_x);
        let b = sigma_tilde(&cov_col, cov_col[x], noise_var)?;
        total += real.weight * compute_h(a.as_slice(), b.as_slice())?;
    }
    Ok(total)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, bv)) if !(v > bv) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Alternative with the largest sparse KG value, lowest index on ties.
pub fn kg_argmax(
    state: &SparseBeliefState,
    alternatives: &DMatrix<f64>,
    noise_var: f64,
    max_terms: usize,
) -> Result<usize> {
    let values = kg_values_sparse(state, alternatives, noise_var, max_terms)?;
    argmax_lowest(&values).ok_or(Error::Empty("alternative matrix"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::GroupStructure;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    #[test]
    fn f_reference_values() {
        assert_relative_eq!(f_scalar(0.0), 0.398_942_3, epsilon = 1e-7);
        assert_relative_eq!(f_scalar(-1.0), 0.083_315_5, epsilon = 1e-7);
        for z in [8.0, 10.0, 20.0] {
            assert_relative_eq!(f_scalar(z), z, epsilon = 1e-12);
        }
    }

    #[test]
    fn f_tail_is_continuous_and_positive() {
        let below = f_scalar(-5.0 - 1e-9);
        let above = f_scalar(-5.0 + 1e-9);
        assert_relative_eq!(below, above, max_relative = 1e-7);
        let mut prev = 0.0;
        for i in 0..400 {
            let z = -40.0 + 0.1 * i as f64;
            let v = f_scalar(z);
            assert!(v >= prev, "not monotone at {z}");
            prev = v;
        }
        assert!(f_scalar(-10.0) > 0.0);
    }

    #[test]
    fn h_examples() {
        assert_eq!(compute_h(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_relative_eq!(compute_h(&[0.0, 0.0], &[0.0, 1.0]).unwrap(), 0.398_942_3, epsilon = 1e-7);
        assert_relative_eq!(compute_h(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.083_315_5, epsilon = 1e-7);
        assert!(compute_h(&[], &[]).is_err());
    }

    #[test]
    fn h_drops_dominated_lines() {
        // The middle line lies below the envelope of the outer two everywhere.
        let with = compute_h(&[0.0, -5.0, 0.0], &[-1.0, 0.0, 1.0]).unwrap();
        let without = compute_h(&[0.0, 0.0], &[-1.0, 1.0]).unwrap();
        assert_relative_eq!(with, without, epsilon = 1e-15);
        assert_relative_eq!(with, 2.0 * f_scalar(0.0), epsilon = 1e-15);
    }

    #[test]
    fn sigma_tilde_examples() {
        let s = sigma_tilde(&DVector::from_vec(vec![1.0, 0.0]), 1.0, 1.0).unwrap();
        assert_relative_eq!(s[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        let s = sigma_tilde(&DVector::from_vec(vec![2.0, 1.0]), 2.0, 2.0).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 0.5]);
        assert!(sigma_tilde(&DVector::from_vec(vec![1.0]), -1.0, 1.0).is_err());
    }

    fn counts(v: &[(f64, f64)]) -> Vec<BetaCounts> {
        v.iter().map(|&(x, e)| BetaCounts::new(x, e).unwrap()).collect()
    }

    #[test]
    fn realization_examples() {
        let r = enumerate_realizations(&counts(&[(1.0, 1.0), (1.0, 1.0)]), 4).unwrap();
        assert_eq!(r.len(), 4);
        assert!(r.iter().all(|x| (x.weight - 0.25).abs() < 1e-15));
        let mut seen: Vec<_> = r.iter().map(|x| x.zeta.clone()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 4);

        let r = enumerate_realizations(&counts(&[(3.0, 1.0)]), 1).unwrap();
        assert_eq!(r, vec![SparsityRealization { zeta: vec![true], weight: 0.75 }]);

        let r = enumerate_realizations(&counts(&[(9.0, 1.0); 3]), 2).unwrap();
        assert_eq!(r[0].zeta, vec![true; 3]);
        assert_relative_eq!(r[0].weight, 0.729, epsilon = 1e-15);
        assert_eq!(r[1].zeta.iter().filter(|z| !**z).count(), 1);
        assert_relative_eq!(r[1].weight, 0.081, epsilon = 1e-15);
    }

    #[test]
    fn certain_groups_are_never_flipped() {
        let r = enumerate_realizations(&counts(&[(1.0, 0.0), (1.0, 1.0)]), 10).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|x| x.zeta[0]));
        assert!(enumerate_realizations(&counts(&[(1.0, 1.0)]), 0).is_err());
        assert!(BetaCounts::new(-1.0, 1.0).is_err());
        assert!(BetaCounts::new(0.0, 0.0).is_err());
    }

    fn single_group_state(vartheta: Vec<f64>, sigma: DMatrix<f64>, c: (f64, f64)) -> SparseBeliefState {
        let m = vartheta.len();
        SparseBeliefState::new(
            DVector::from_vec(vartheta),
            sigma,
            counts(&[c]),
            GroupStructure::uniform(1, m).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn certain_inclusion_reduces_to_linear_kg() {
        let sigma = dmatrix![2.0, 0.3; 0.3, 1.0];
        let state = single_group_state(vec![0.5, -0.2], sigma.clone(), (1.0, 0.0));
        let x = dmatrix![1.0, 0.0; 0.5, 0.5; -1.0, 2.0];
        let induced = crate::belief::LinearBelief::new(state.vartheta.clone(), sigma).unwrap().induced(&x).unwrap();
        let lin = kg_values_lookup(&induced, 0.7).unwrap();
        let sparse = kg_values_sparse(&state, &x, 0.7, 16).unwrap();
        for i in 0..3 {
            assert_relative_eq!(lin[i], sparse[i], epsilon = 1e-14);
            assert_relative_eq!(kg_value_sparse(&state, &x, i, 0.7, 16).unwrap(), lin[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn certain_exclusion_has_zero_value() {
        let state = single_group_state(vec![1.0, 2.0], DMatrix::identity(2, 2), (0.0, 1.0));
        let x = dmatrix![1.0, 0.0; 0.0, 1.0];
        assert_eq!(kg_values_sparse(&state, &x, 1.0, 16).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn argmax_tie_and_degenerate() {
        let state = single_group_state(vec![0.0], DMatrix::identity(1, 1), (1.0, 1.0));
        let same = dmatrix![1.0; 1.0; 1.0];
        assert_eq!(kg_argmax(&state, &same, 1.0, 16).unwrap(), 0);
        let one_flat = dmatrix![0.0; 1.0];
        assert_eq!(kg_argmax(&state, &one_flat, 1.0, 16).unwrap(), 1);
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0]), Some(1));
    }

    proptest! {
        #[test]
        fn h_nonnegative_and_shift_permutation_invariant(
            pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..10),
            shift in -5.0f64..5.0,
            rot in 0usize..10,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
            let h = compute_h(&a, &b).unwrap();
            prop_assert!(h >= 0.0);
            let shifted: Vec<f64> = a.iter().map(|v| v + shift).collect();
            prop_assert!((compute_h(&shifted, &b).unwrap() - h).abs() <= 1e-9 * (1.0 + h));
            let k = rot % a.len();
            let mut ap = a.clone();
            let mut bp = b.clone();
            ap.rotate_left(k);
            bp.rotate_left(k);
            ap.reverse();
            bp.reverse();
            prop_assert!((compute_h(&ap, &bp).unwrap() - h).abs() <= 1e-12 * (1.0 + h));
        }

        #[test]
        fn h_zero_for_equal_slopes(a in prop::collection::vec(-3.0f64..3.0, 1..10), b in -3.0f64..3.0) {
            let bs = vec![b; a.len()];
            prop_assert_eq!(compute_h(&a, &bs).unwrap(), 0.0);
        }

        #[test]
        fn realizations_match_full_enumeration(
            raw in prop::collection::vec((0.1f64..5.0, 0.1f64..5.0), 1..8),
            max_terms in 1usize..20,
        ) {
            let c = counts(&raw);
            let got = enumerate_realizations(&c, max_terms).unwrap();
            let p = c.len();
            let mut all: Vec<f64> = (0..1usize << p)
                .map(|mask| {
                    (0..p)
                        .map(|j| {
                            let q = c[j].inclusion_probability();
                            if mask >> j & 1 == 1 { q } else { 1.0 - q }
                        })
                        .product()
                })
                .collect();
            all.sort_by(|x, y| y.total_cmp(x));
            prop_assert_eq!(got.len(), max_terms.min(1 << p));
            for (k, r) in got.iter().enumerate() {
                prop_assert!((r.weight - all[k]).abs() <= 1e-12);
                if k > 0 {
                    prop_assert!(r.weight <= got[k - 1].weight + 1e-15);
                }
            }
            let mut z: Vec<_> = got.iter().map(|r| r.zeta.clone()).collect();
            z.sort();
            z.dedup();
            prop_assert_eq!(z.len(), got.len());
        }
    }
}
