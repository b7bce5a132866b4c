//! Proximal operators for the ℓ∞ group penalty.

use nalgebra::DVector;

/// Euclidean projection of `v` onto the ℓ1 ball of the given radius.
pub fn project_l1_ball(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    if radius <= 0.0 {
        return DVector::zeros(v.len());
    }
    if v.iter().map(|x| x.abs()).sum::<f64>() <= radius {
        return v.clone();
    }
    let mut u: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut shift = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - radius) / (i + 1) as f64;
        if ui > t {
            shift = t;
        } else {
            break;
        }
    }
    v.map(|x| x.signum() * (x.abs() - shift).max(0.0))
}

/// `argmin_u ½‖u − v‖² + weight·‖u‖∞`, via the Moreau identity
/// `prox = v − proj_{ℓ1 ball(weight)}(v)`.
pub fn prox_linf_group(v: &DVector<f64>, weight: f64) -> DVector<f64> {
    if weight <= 0.0 {
        return v.clone();
    }
    v - project_l1_ball(v, weight)
}
