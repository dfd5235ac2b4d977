//! Finite-difference gradient oracle used to validate the tape.

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate.
pub fn finite_difference_gradient(mut loss_fn: impl FnMut(&[f64]) -> f64, params: &[f64], step: f64) -> Vec<f64> {
    let mut point = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = point[i];
            point[i] = orig + step;
            let plus = loss_fn(&point);
            point[i] = orig - step;
            let minus = loss_fn(&point);
            point[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖b‖, tiny)` over flattened vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error on vectors of different length");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}
