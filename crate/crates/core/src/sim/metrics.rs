//! Opportunity cost, misclassification counts and summary statistics.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};

/// `max µ − µ_chosen`.
pub fn opportunity_cost(truth_values: &[f64], chosen: usize) -> Result<f64> {
    let best = truth_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let v = truth_values.get(chosen).ok_or(Error::OutOfRange { index: chosen, len: truth_values.len() })?;
    Ok((best - v).max(0.0))
}

/// Size of the symmetric difference between estimated and true group supports.
pub fn count_misclassified_groups(estimated: &[usize], truth: &[usize], p: usize) -> Result<usize> {
    if let Some(&bad) = estimated.iter().chain(truth).find(|&&j| j >= p) {
        return Err(Error::OutOfRange { index: bad, len: p });
    }
    let a: BTreeSet<_> = estimated.iter().collect();
    let b: BTreeSet<_> = truth.iter().collect();
    Ok(a.symmetric_difference(&b).count())
}

/// Mean, sample standard deviation, standard error and median.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary { n, mean: f64::NAN, sd: f64::NAN, se: f64::NAN, median: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        Summary { n, mean, sd, se: sd / (n as f64).sqrt(), median }
    }
}

/// Number of combined standard errors separating two means (`b` above `a` is positive).
pub fn separation(a: &Summary, b: &Summary) -> f64 {
    (b.mean - a.mean) / (a.se * a.se + b.se * b.se).sqrt()
}
