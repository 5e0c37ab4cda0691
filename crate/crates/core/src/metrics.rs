//! Mean absolute percentage errors of capacity beliefs and user rates.

/// `100 Σ |μ_m − b_m| / (M b_m)`.
pub fn e_links(mu: &[f64], b_true: &[f64]) -> f64 {
    mean_abs_percentage(mu, b_true)
}

/// `100 Σ |x_n − x*_n| / (N x*_n)`.
pub fn e_users(x: &[f64], x_star: &[f64]) -> f64 {
    mean_abs_percentage(x, x_star)
}

fn mean_abs_percentage(value: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(value.len(), reference.len(), "metric inputs differ in length");
    if value.is_empty() {
        return 0.0;
    }
    let total: f64 = value
        .iter()
        .zip(reference)
        .map(|(v, r)| (v - r).abs() / r)
        .sum();
    100.0 * total / value.len() as f64
}
