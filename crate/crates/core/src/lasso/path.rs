//! Active-set homotopy for the ℓ1,∞ group Lasso.
//!
//! On a fixed active structure the minimizer is parametrized by
//! `θ = (τ_j for active groups, β_k for rest coordinates)` with `β = E θ`:
//! coordinates in a max set sit at `s_k τ_j`, rest coordinates are free and
//! everything in an inactive group is zero. Stationarity then reads
//! `Eᵀ R E θ = Eᵀ r − λ e_τ`, a linear system whose solution moves affinely in
//! `λ`, and (after a Sherman–Morrison reparametrization) affinely in the weight
//! of a newly added observation. The path is followed from one transition point
//! to the next until the target is reached.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::Partition;
use crate::belief::GroupStructure;

/// Reciprocal condition bound below which the reduced system counts as singular.
const MIN_RCOND: f64 = 1e-13;
/// Relative residual allowed when solving a singular reduced system.
const CONSISTENCY_TOL: f64 = 1e-9;

#[derive(Debug)]
pub(crate) enum PathFailure {
    Singular,
    TooManyEvents,
    /// A coordinate with no data so far is touched by the new observation while
    /// its group is active; the path from t = 0 is discontinuous there.
    FrozenTouched,
}

#[derive(Debug, Clone, Copy)]
enum Column {
    Tau(usize),
    Coord(usize),
}

fn factorize(h: DMatrix<f64>) -> Result<Factor, PathFailure> {
    let scale = h.diagonal().amax();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(PathFailure::Singular);
    }
    if let Some(chol) = Cholesky::new(h.clone()) {
        let d = chol.l_dirty().diagonal();
        let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
        if hi > 0.0 && (lo / hi).powi(2) >= MIN_RCOND {
            return Ok(Factor::Chol(chol));
        }
    }
    let pinv = h.clone().pseudo_inverse(MIN_RCOND.sqrt() * scale).map_err(|_| PathFailure::Singular)?;
    Ok(Factor::Pinv { h, pinv })
}

/// Reduced system at the current statistics and structure.
struct Reduced {
    cols: Vec<Column>,
    re: DMatrix<f64>,
    factor: Option<Factor>,
    theta: DVector<f64>,
    beta: DVector<f64>,
    resid: DVector<f64>,
}

/// Factorization of the reduced matrix. When it is singular (groups tied with
/// the active set) the minimum-norm solution is used, the limit of a vanishing
/// ridge; right-hand sides outside its range have no solution.
enum Factor {
    Chol(Cholesky<f64, nalgebra::Dyn>),
    Pinv { h: DMatrix<f64>, pinv: DMatrix<f64> },
}

impl Reduced {
    fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, PathFailure> {
        let x = match &self.factor {
            None => return Ok(DVector::zeros(0)),
            Some(Factor::Chol(c)) => c.solve(rhs),
            Some(Factor::Pinv { h, pinv }) => {
                let x = pinv * rhs;
                let scale = h.diagonal().amax() * x.amax() + rhs.amax();
                if (h * &x - rhs).amax() > CONSISTENCY_TOL * scale {
                    return Err(PathFailure::Singular);
                }
                x
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(PathFailure::Singular);
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Leave(usize),
    Join { slot: usize, coord: usize, sign: f64 },
    Release { slot: usize, coord: usize },
    Enter(usize),
}

pub(crate) struct Homotopy<'a> {
    pub gram: DMatrix<f64>,
    pub moment: DVector<f64>,
    pub lambda: f64,
    pub partition: Partition,
    groups: &'a GroupStructure,
    events: usize,
    max_events: usize,
}

impl<'a> Homotopy<'a> {
    pub fn new(gram: DMatrix<f64>, moment: DVector<f64>, lambda: f64, partition: Partition, groups: &'a GroupStructure) -> Self {
        let max_events = 8 * (groups.n_features() + groups.n_groups()) + 200;
        Self { gram, moment, lambda, partition, groups, events: 0, max_events }
    }

    fn columns(&self) -> Vec<Column> {
        let mut cols = Vec::new();
        for (slot, g) in self.partition.active.iter().enumerate() {
            cols.push(Column::Tau(slot));
            cols.extend(g.rest.iter().map(|&k| Column::Coord(k)));
        }
        cols
    }

    /// `E v` for a reduced vector `v`.
    fn expand(&self, cols: &[Column], v: &DVector<f64>) -> DVector<f64> {
        let mut beta = DVector::zeros(self.gram.nrows());
        for (i, c) in cols.iter().enumerate() {
            match *c {
                Column::Tau(slot) => {
                    for &(k, s) in &self.partition.active[slot].max_set {
                        beta[k] = s * v[i];
                    }
                }
                Column::Coord(k) => beta[k] = v[i],
            }
        }
        beta
    }

    /// `Eᵀ v` for a full-length vector `v`.
    fn restrict(&self, cols: &[Column], v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            cols.len(),
            cols.iter().map(|c| match *c {
                Column::Tau(slot) => self.partition.active[slot].max_set.iter().map(|&(k, s)| s * v[k]).sum(),
                Column::Coord(k) => v[k],
            }),
        )
    }

    fn tau_indicator(cols: &[Column]) -> DVector<f64> {
        DVector::from_iterator(cols.len(), cols.iter().map(|c| matches!(c, Column::Tau(_)) as u8 as f64))
    }

    /// `R E` and the reduced matrix `Eᵀ R E` for the given columns.
    fn system(&self, cols: &[Column]) -> (DMatrix<f64>, DMatrix<f64>) {
        let m = self.gram.nrows();
        let q = cols.len();
        let mut re = DMatrix::zeros(m, q);
        for (i, c) in cols.iter().enumerate() {
            let mut col = re.column_mut(i);
            match *c {
                Column::Tau(slot) => {
                    for &(k, s) in &self.partition.active[slot].max_set {
                        col.axpy(s, &self.gram.column(k), 1.0);
                    }
                }
                Column::Coord(k) => col.copy_from(&self.gram.column(k)),
            }
        }
        let mut h = DMatrix::zeros(q, q);
        for j in 0..q {
            let hj = self.restrict(cols, &re.column(j).into_owned());
            h.set_column(j, &hj);
        }
        let h = 0.5 * (&h + h.transpose());
        (re, h)
    }

    fn reduce(&self) -> Result<Reduced, PathFailure> {
        let cols = self.columns();
        let m = self.gram.nrows();
        let q = cols.len();
        let (re, h) = self.system(&cols);
        let factor = if q == 0 { None } else { Some(factorize(h)?) };
        let mut red = Reduced {
            cols,
            re,
            factor,
            theta: DVector::zeros(0),
            beta: DVector::zeros(m),
            resid: self.moment.clone(),
        };
        if q > 0 {
            let rhs = self.restrict(&red.cols, &self.moment) - Self::tau_indicator(&red.cols) * self.lambda;
            red.theta = red.solve(&rhs)?;
            red.beta = self.expand(&red.cols, &red.theta);
            red.resid = &self.moment - &red.re * &red.theta;
        }
        Ok(red)
    }

    /// Solution of the stationarity system on the current structure closest to
    /// `near`. Works when the reduced system is singular (the minimizer is then
    /// not unique) by correcting `near` with a pseudo-inverse step.
    pub fn solution_near(&self, near: &DVector<f64>) -> Result<DVector<f64>, PathFailure> {
        let cols = self.columns();
        if cols.is_empty() {
            return Ok(DVector::zeros(self.gram.nrows()));
        }
        let (_, h) = self.system(&cols);
        let theta0 = DVector::from_iterator(
            cols.len(),
            cols.iter().map(|c| match *c {
                Column::Tau(slot) => {
                    let set = &self.partition.active[slot].max_set;
                    set.iter().map(|&(k, s)| s * near[k]).sum::<f64>() / set.len() as f64
                }
                Column::Coord(k) => near[k],
            }),
        );
        let rhs = self.restrict(&cols, &self.moment) - Self::tau_indicator(&cols) * self.lambda;
        let scale = h.diagonal().amax().max(f64::MIN_POSITIVE);
        let resid = &h * &theta0 - rhs;
        let step = h.svd(true, true).solve(&resid, 1e-12 * scale).map_err(|_| PathFailure::Singular)?;
        let theta = theta0 - step;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(PathFailure::Singular);
        }
        Ok(self.expand(&cols, &theta))
    }

    /// Current solution without moving along any path.
    pub fn solution(&self) -> Result<DVector<f64>, PathFailure> {
        Ok(self.reduce()?.beta)
    }

    fn bump(&mut self) -> Result<(), PathFailure> {
        self.events += 1;
        if self.events > self.max_events {
            Err(PathFailure::TooManyEvents)
        } else {
            Ok(())
        }
    }

    /// Follow the solution as λ moves to `target` on fixed statistics.
    pub fn follow_lambda(&mut self, target: f64) -> Result<(), PathFailure> {
        loop {
            let red = self.reduce()?;
            let remaining = (target - self.lambda).abs();
            if remaining == 0.0 {
                return Ok(());
            }
            let dl = (target - self.lambda).signum();
            let dtheta = -dl * red.solve(&Self::tau_indicator(&red.cols))?;
            let dbeta = self.expand(&red.cols, &dtheta);
            let dg = if red.cols.is_empty() { DVector::zeros(self.gram.nrows()) } else { -(&red.re * &dtheta) };
            match self.next_event(&red, &dtheta, &dbeta, &dg, dl, remaining) {
                None => {
                    self.lambda = target;
                    return Ok(());
                }
                Some((s, ev)) => {
                    let g_at = &red.resid + &dg * s;
                    self.lambda = if s >= remaining { target } else { self.lambda + dl * s };
                    self.apply(ev, &g_at);
                    self.bump()?;
                }
            }
        }
    }

    /// Follow the solution while the observation `(x, y)` is blended in with
    /// weight `t` running from 0 to 1 at fixed λ.
    pub fn follow_observation(&mut self, x: &DVector<f64>, y: f64) -> Result<(), PathFailure> {
        for g in &self.partition.active {
            if g.frozen.iter().any(|&k| x[k] != 0.0) {
                return Err(PathFailure::FrozenTouched);
            }
        }
        let base_gram = self.gram.clone();
        let base_moment = self.moment.clone();
        let mut t0 = 0.0;
        loop {
            let red = self.reduce()?;
            let u = self.restrict(&red.cols, x);
            let w = red.solve(&u)?;
            let c = if red.cols.is_empty() { 0.0 } else { u.dot(&w) };
            let e = y - x.dot(&red.beta);
            let span = 1.0 - t0;
            let s_max = span / (1.0 + c * span);
            let dtheta = &w * e;
            let dbeta = self.expand(&red.cols, &dtheta);
            let rw = if red.cols.is_empty() { DVector::zeros(x.len()) } else { &red.re * &w };
            let dg = (x - rw) * e;
            let next = self.next_event(&red, &dtheta, &dbeta, &dg, 0.0, s_max);
            let t_new = match next {
                Some((s, _)) if s < s_max => (t0 + s / (1.0 - c * s)).min(1.0),
                _ => 1.0,
            };
            self.gram = &base_gram + (x * x.transpose()) * t_new;
            self.moment = &base_moment + x * (y * t_new);
            match next {
                Some((s, ev)) if s < s_max => {
                    let g_at = &red.resid + &dg * s;
                    self.apply(ev, &g_at);
                    t0 = t_new;
                    self.bump()?;
                }
                _ => return Ok(()),
            }
        }
    }

    /// Earliest transition in `(0, s_max)` along the affine direction, if any.
    fn next_event(
        &self,
        red: &Reduced,
        dtheta: &DVector<f64>,
        dbeta: &DVector<f64>,
        dg: &DVector<f64>,
        dlambda: f64,
        s_max: f64,
    ) -> Option<(f64, Event)> {
        let mut best: Option<(f64, Event)> = None;
        let mut offer = |s: f64, ev: Event| {
            if s < s_max && best.is_none_or(|(b, _)| s < b) {
                best = Some((s, ev));
            }
        };
        // Hitting time of a function that must stay nonnegative.
        let hit = |value: f64, slope: f64| -> Option<f64> { (slope < 0.0).then(|| value.max(0.0) / -slope) };

        let g = &red.resid;
        let mut idx = 0;
        for (slot, grp) in self.partition.active.iter().enumerate() {
            let tau = red.theta[idx];
            let dtau = dtheta[idx];
            idx += 1 + grp.rest.len();
            if let Some(s) = hit(tau, dtau) {
                offer(s, Event::Leave(slot));
            }
            for &k in &grp.rest {
                if let Some(s) = hit(tau - red.beta[k], dtau - dbeta[k]) {
                    offer(s, Event::Join { slot, coord: k, sign: 1.0 });
                }
                if let Some(s) = hit(tau + red.beta[k], dtau + dbeta[k]) {
                    offer(s, Event::Join { slot, coord: k, sign: -1.0 });
                }
            }
            if grp.max_set.len() > 1 {
                for &(k, sg) in &grp.max_set {
                    if let Some(s) = hit(sg * g[k], sg * dg[k]) {
                        offer(s, Event::Release { slot, coord: k });
                    }
                }
            }
        }

        let mut is_active = vec![false; self.groups.n_groups()];
        for grp in &self.partition.active {
            is_active[grp.group] = true;
        }
        for (j, members) in self.groups.groups().iter().enumerate() {
            if is_active[j] {
                continue;
            }
            if let Some(s) = entry_time(members, g, dg, self.lambda, dlambda, s_max) {
                offer(s, Event::Enter(j));
            }
        }
        best
    }

    fn apply(&mut self, ev: Event, g: &DVector<f64>) {
        match ev {
            Event::Leave(slot) => {
                self.partition.active.remove(slot);
            }
            Event::Join { slot, coord, sign } => {
                let grp = &mut self.partition.active[slot];
                grp.rest.retain(|&k| k != coord);
                grp.max_set.push((coord, sign));
                grp.max_set.sort_by_key(|&(k, _)| k);
            }
            Event::Release { slot, coord } => {
                let grp = &mut self.partition.active[slot];
                grp.max_set.retain(|&(k, _)| k != coord);
                grp.rest.push(coord);
                grp.rest.sort_unstable();
            }
            Event::Enter(j) => {
                let grp = super::ActiveGroup::entering(j, self.groups.group(j), g, &self.gram);
                let pos = self.partition.active.partition_point(|a| a.group < j);
                self.partition.active.insert(pos, grp);
            }
        }
    }
}

/// First `s ∈ [0, s_max)` at which `‖g + s dg‖₁` reaches `λ + s dλ` on the group.
fn entry_time(members: &[usize], g: &DVector<f64>, dg: &DVector<f64>, lambda: f64, dlambda: f64, s_max: f64) -> Option<f64> {
    let slack = |s: f64| lambda + s * dlambda - members.iter().map(|&k| (g[k] + s * dg[k]).abs()).sum::<f64>();
    let slope0: f64 = dlambda
        - members
            .iter()
            .map(|&k| {
                let dir = if g[k] != 0.0 { g[k].signum() } else { dg[k].signum() };
                dir * dg[k]
            })
            .sum::<f64>();
    let v0 = slack(0.0);
    let scale = lambda.abs().max(1e-300);
    if v0 < -1e-9 * scale || (v0 <= 0.0 && slope0 < 0.0) {
        return Some(0.0);
    }
    // The slack is concave and piecewise linear; walk its breakpoints.
    let mut breaks: Vec<f64> = members
        .iter()
        .filter(|&&k| dg[k] != 0.0)
        .map(|&k| -g[k] / dg[k])
        .filter(|&s| s > 0.0 && s < s_max)
        .collect();
    breaks.push(s_max);
    breaks.sort_by(f64::total_cmp);
    let (mut s_prev, mut v_prev) = (0.0, v0.max(0.0));
    for s in breaks {
        let v = slack(s);
        if v < 0.0 {
            let root = s_prev + v_prev / (v_prev - v) * (s - s_prev);
            return Some(root.clamp(s_prev, s));
        }
        s_prev = s;
        v_prev = v;
    }
    None
}
