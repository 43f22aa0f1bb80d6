//! Slow, definition-level reference implementations used to cross-check the
//! production metrics.

/// Pearson correlation from the covariance definition; `None` when either
/// input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    weighted_pearson(x, y, &vec![1.0; x.len()])
}

/// Weighted Pearson correlation: weighted covariance over the product of
/// weighted standard deviations.
pub fn weighted_pearson(x: &[f64], y: &[f64], w: &[f64]) -> Option<f64> {
    assert!(x.len() == y.len() && x.len() == w.len());
    let total: f64 = w.iter().sum();
    let mean = |v: &[f64]| (0..v.len()).map(|i| w[i] * v[i]).sum::<f64>() / total;
    let (mx, my) = (mean(x), mean(y));
    let cov = |a: &[f64], ma: f64, b: &[f64], mb: f64| {
        (0..a.len()).map(|i| w[i] * (a[i] - ma) * (b[i] - mb)).sum::<f64>() / total
    };
    let (sxy, sxx, syy) = (cov(x, mx, y, my), cov(x, mx, x, mx), cov(y, my, y, my));
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Rank of each value by counting: one plus the number of strictly smaller
/// values, plus half the number of other equal values.
pub fn counted_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&counted_ranks(x), &counted_ranks(y))
}

pub fn weighted_spearman(x: &[f64], y: &[f64], w: &[f64]) -> Option<f64> {
    weighted_pearson(&counted_ranks(x), &counted_ranks(y), w)
}
