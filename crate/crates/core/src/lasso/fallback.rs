//! Accelerated proximal gradient solver, used when path following breaks down.

use nalgebra::{DMatrix, DVector};

use super::prox::prox_linf_group;
use crate::belief::GroupStructure;

/// Largest eigenvalue of a PSD matrix by power iteration.
fn spectral_bound(gram: &DMatrix<f64>) -> f64 {
    let m = gram.nrows();
    let mut v = DVector::from_fn(m, |i, _| 1.0 + (i % 7) as f64 * 0.1);
    v.normalize_mut();
    let mut est = 0.0;
    for _ in 0..500 {
        let w = gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w / norm;
        if (next - est).abs() <= 1e-10 * next {
            est = next;
            break;
        }
        est = next;
    }
    // Power iteration approaches from below; pad so the step stays safe.
    est * 1.01 + 1e-12 * gram.diagonal().amax()
}

fn prox_all(v: &DVector<f64>, weight: f64, groups: &GroupStructure) -> DVector<f64> {
    let mut out = v.clone();
    for g in groups.groups() {
        let block = DVector::from_iterator(g.len(), g.iter().map(|&k| v[k]));
        let p = prox_linf_group(&block, weight);
        for (i, &k) in g.iter().enumerate() {
            out[k] = p[i];
        }
    }
    out
}

/// FISTA with adaptive restart for `½ βᵀRβ − βᵀr + λ‖β‖_{1,∞}`.
///
/// Stops when an iteration moves the estimate by at most `tol` in the sup norm,
/// or after `max_iter` iterations.
pub fn fista(
    gram: &DMatrix<f64>,
    moment: &DVector<f64>,
    lambda: f64,
    groups: &GroupStructure,
    tol: f64,
    max_iter: usize,
    start: Option<&DVector<f64>>,
) -> DVector<f64> {
    let m = moment.len();
    let lip = spectral_bound(gram);
    if lip == 0.0 {
        return DVector::zeros(m);
    }
    let step = 1.0 / lip;
    let mut x = start.cloned().unwrap_or_else(|| DVector::zeros(m));
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..max_iter {
        let grad = gram * &y - moment;
        let x_next = prox_all(&(&y - grad * step), lambda * step, groups);
        let delta = &x_next - &x;
        let moved = delta.amax();
        // Restart momentum when it points uphill.
        let uphill = (&y - &x_next).dot(&delta) < 0.0;
        let t_next = if uphill { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt()) };
        y = if uphill { x_next.clone() } else { &x_next + delta * ((t - 1.0) / t_next) };
        t = t_next;
        x = x_next;
        if moved <= tol {
            break;
        }
    }
    x
}
