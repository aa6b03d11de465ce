//! Finite-difference gradient checking utilities (f64 only).

/// Central-difference numeric gradient of a scalar function `f` at `x`.
pub fn numeric_gradient<Func>(mut f: Func, x: &[f64], step: f64) -> Vec<f64>
where
    Func: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, ε) — relative error between gradient vectors.
pub fn l2_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}
