//! Two-sample testing and multiple-testing correction.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

fn is_constant(xs: &[f64]) -> bool {
    xs.iter().all(|&x| x == xs[0])
}

/// Arithmetic mean; exact for constant samples.
pub fn mean(xs: &[f64]) -> f64 {
    if !xs.is_empty() && is_constant(xs) {
        return xs[0];
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased (n − 1) sample variance; exactly zero for constant samples.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if is_constant(xs) {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Population (n) standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Two-sided Welch t-test p-value with Welch–Satterthwaite degrees of freedom.
///
/// With zero variance in both groups the test degenerates: equal means give
/// `p = 1`, different means give `p = 0`.
pub fn welch_t_test(control: &[f64], perturbed: &[f64]) -> Result<f64> {
    if control.len() < 2 || perturbed.len() < 2 {
        return Err(Error::Usage(format!(
            "Welch t-test needs >= 2 samples per group, got {} and {}",
            control.len(),
            perturbed.len()
        )));
    }
    let (n1, n2) = (control.len() as f64, perturbed.len() as f64);
    let (m1, m2) = (mean(control), mean(perturbed));
    let (s1, s2) = (sample_variance(control) / n1, sample_variance(perturbed) / n2);
    let se2 = s1 + s2;
    if se2 == 0.0 {
        return Ok(if m1 == m2 { 1.0 } else { 0.0 });
    }
    let t = (m2 - m1) / se2.sqrt();
    if t == 0.0 {
        return Ok(1.0);
    }
    let df = se2 * se2 / (s1 * s1 / (n1 - 1.0) + s2 * s2 / (n2 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Numerical(format!("invalid t distribution (df = {df}): {e}")))?;
    Ok((2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
}

/// Benjamini–Hochberg adjusted p-values (step-up, monotone, capped at 1).
pub fn benjamini_hochberg(pvalues: &[f64]) -> Vec<f64> {
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        let q = pvalues[i] * m as f64 / (rank + 1) as f64;
        running = running.min(q);
        adjusted[i] = running.min(1.0);
    }
    adjusted
}

#[cfg(test)]
mod tests {
    use super::*;

    // Expected p-values from scipy.stats.ttest_ind(equal_var=False).
    #[test]
    fn welch_matches_reference_values() {
        let cases: [(&[f64], &[f64], f64); 3] = [
            (
                &[1.1, 0.9, 1.0, 1.2],
                &[2.0, 2.2, 1.9, 2.1],
                3.436_402_807_612_167_3e-5,
            ),
            (
                &[0.5, 1.5, 1.0],
                &[1.2, 0.4, 2.9, 1.7, 0.3],
                0.609_949_635_255_965_2,
            ),
            (
                &[3.0, 3.1, 2.9, 3.05],
                &[3.0, 3.2, 2.8, 3.1, 2.95, 3.0],
                0.953_959_143_518_823_8,
            ),
        ];
        for (a, b, expected) in cases {
            let p = welch_t_test(a, b).unwrap();
            assert!((p - expected).abs() < 1e-6, "{p} vs {expected}");
        }
    }

    #[test]
    fn identical_groups_give_one() {
        let x = [1.0, 2.0, 3.5];
        assert_eq!(welch_t_test(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn zero_variance_rules() {
        assert_eq!(welch_t_test(&[0.0; 3], &[5.0; 3]).unwrap(), 0.0);
        assert_eq!(welch_t_test(&[2.0; 3], &[2.0; 4]).unwrap(), 1.0);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(welch_t_test(&[1.0], &[1.0, 2.0]), Err(Error::Usage(_))));
    }

    // statsmodels multipletests(method="fdr_bh").
    #[test]
    fn bh_matches_reference() {
        let adj = benjamini_hochberg(&[0.01, 0.04, 0.03, 0.2, 0.5]);
        let expected = [0.05, 0.066_666_666_666_666_67, 0.066_666_666_666_666_67, 0.25, 0.5];
        for (a, e) in adj.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}
