//! Central finite-difference oracle for gradient verification.
//!
//! The perturbed parameter is re-quantized to f32 storage before evaluating,
//! and the difference quotient divides by the actually-stored spread, so the
//! check measures the implemented f64 loss surface rather than an idealized
//! one.

use rand::seq::index::sample;

use crate::seeding;

/// Central-difference slope of `loss` along parameter `idx`.
pub fn central_diff(
    loss: &mut dyn FnMut(&[f32]) -> f64,
    params: &[f32],
    idx: usize,
    h: f64,
) -> f64 {
    let mut work = params.to_vec();
    let base = params[idx] as f64;
    let plus = (base + h) as f32;
    let minus = (base - h) as f32;
    work[idx] = plus;
    let f_plus = loss(&work);
    work[idx] = minus;
    let f_minus = loss(&work);
    (f_plus - f_minus) / (plus as f64 - minus as f64)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_fd: f64,
}

/// Relative error |analytic - fd| / max(|analytic| + |fd|, 1e-8) over the
/// given parameter indices.
pub fn check_gradients(
    loss: &mut dyn FnMut(&[f32]) -> f64,
    analytic: &[f64],
    params: &[f32],
    indices: &[usize],
    h: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_fd: 0.0,
    };
    for &idx in indices {
        let fd = central_diff(loss, params, idx, h);
        let a = analytic[idx];
        let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = idx;
            report.worst_analytic = a;
            report.worst_fd = fd;
        }
    }
    report
}

/// `count` distinct parameter indices, seeded.
pub fn sample_indices(n_params: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeding::rng(seed);
    let mut picked = sample(&mut rng, n_params, count.min(n_params)).into_vec();
    picked.sort_unstable();
    picked
}
