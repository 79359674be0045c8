//! Central finite differences for verifying adjoints.
//!
//! These helpers only evaluate forward functions, so they stay independent
//! of the backward rules they are used to check.

/// Central difference estimate of the gradient of `f` at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest element-wise relative error between two gradients.
///
/// Each component is compared as `|a - n| / max(|a|, |n|, floor)` with
/// `floor = 1e-3 * max|n| + 1e-12`, so components that are negligible next
/// to the gradient's largest entry are judged against that scale rather
/// than against round-off.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale + 1e-12;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
