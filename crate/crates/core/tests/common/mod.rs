#![allow(dead_code)]

use nalgebra::DMatrix;

/// Largest `|Ĉ_ij − Σ_ij| / SE_ij` over all entries, where `Ĉ` is the
/// zero-mean empirical covariance of the rows of `x` and `SE_ij` the sample
/// standard error of the mean of `x_i x_j`.
pub fn max_cov_z(x: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    let (n, m) = x.shape();
    let mut worst: f64 = 0.0;
    for i in 0..m {
        for j in i..m {
            let prods: Vec<f64> = (0..n).map(|t| x[(t, i)] * x[(t, j)]).collect();
            let mean = prods.iter().sum::<f64>() / n as f64;
            let var = prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let z = (mean - sigma[(i, j)]).abs() / (var / n as f64).sqrt();
            worst = worst.max(z);
        }
    }
    worst
}

/// Kurtosis `m4/m2²` of a zero-mean sample and its delta-method standard error.
pub fn kurtosis_with_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m2 = v.iter().map(|x| x * x).sum::<f64>() / n;
    let m4 = v.iter().map(|x| x.powi(4)).sum::<f64>() / n;
    let k = m4 / (m2 * m2);
    let infl: Vec<f64> = v
        .iter()
        .map(|x| (x.powi(4) - m4) / (m2 * m2) - 2.0 * m4 * (x * x - m2) / m2.powi(3))
        .collect();
    let mean = infl.iter().sum::<f64>() / n;
    let var = infl.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (k, (var / n).sqrt())
}
