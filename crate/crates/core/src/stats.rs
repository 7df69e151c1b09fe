//! Population statistics shared by the objective and reporting code.

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Population variance (divides by the count). Zero for empty input.
pub fn variance(xs: &[f64]) -> f64 {
    match mean(xs) {
        None => 0.0,
        Some(m) => xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64,
    }
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

pub fn min(xs: &[f64]) -> Option<f64> {
    xs.iter().copied().reduce(f64::min)
}
