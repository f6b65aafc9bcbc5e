//! Small numeric helpers shared by estimators and the harness.

pub use crate::autodiff::logsumexp;

/// `log(mean(exp(xs)))`, overflow-safe.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    logsumexp(xs) - (xs.len() as f64).ln()
}

/// Sample mean and standard error (`std / sqrt(n)`, unbiased variance).
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean and sample standard deviation.
pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let (mean, se) = mean_and_stderr(xs);
    (mean, se * (xs.len() as f64).sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
