use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigTest {
    /// Two-sided paired t-test on the per-seed differences.
    #[default]
    PairedT,
    /// Two-sided exact signed-rank test; zero differences are dropped.
    Wilcoxon,
}

/// p-value for seed-matched accuracies `a` and `b`.
pub fn significance(a: &[f64], b: &[f64], test: SigTest) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Config(format!("need two equally long samples of >= 2, got {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite accuracy".into()));
    }
    Ok(match test {
        SigTest::PairedT => paired_t(&d),
        SigTest::Wilcoxon => signed_rank(&d),
    })
}

fn paired_t(d: &[f64]) -> f64 {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return if mean == 0.0 { 1.0 } else { 0.0 };
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("df >= 1");
    (2.0 * dist.cdf(-t.abs())).min(1.0)
}

/// Exact null distribution of the positive-rank sum by dynamic programming
/// over doubled (integer) midranks.
fn signed_rank(d: &[f64]) -> f64 {
    let mut nz: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    if nz.is_empty() {
        return 1.0;
    }
    nz.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let n = nz.len();
    let mut ranks2 = vec![0usize; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nz[j + 1].abs() == nz[i].abs() {
            j += 1;
        }
        // midrank of positions i..=j (1-based), doubled
        for r in ranks2.iter_mut().take(j + 1).skip(i) {
            *r = i + j + 2;
        }
        i = j + 1;
    }
    let w: usize = nz.iter().zip(&ranks2).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total: usize = ranks2.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for &r in &ranks2 {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all = 2f64.powi(n as i32);
    let lower: f64 = counts[..=w].iter().sum::<f64>() / all;
    let upper: f64 = counts[w..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diffs(d: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let a: Vec<f64> = (0..d.len()).map(|i| 0.6 + 0.01 * i as f64).collect();
        let b = a.iter().zip(d).map(|(x, y)| x - y).collect();
        (a, b)
    }

    #[test]
    fn identical_samples_give_one() {
        let a = [0.7, 0.71, 0.69];
        assert_eq!(significance(&a, &a, SigTest::PairedT).unwrap(), 1.0);
        assert_eq!(significance(&a, &a, SigTest::Wilcoxon).unwrap(), 1.0);
    }

    #[test]
    fn constant_shift_is_maximally_significant() {
        let a = [0.7, 0.71, 0.69, 0.72];
        let b: Vec<f64> = a.iter().map(|v| v - 0.25).collect();
        // the shift is exact in binary, so the differences have zero variance
        assert!(significance(&a, &b, SigTest::PairedT).unwrap() < 1e-6);
    }

    #[test]
    fn t_test_matches_reference_values() {
        // reference values from scipy.stats.ttest_1samp on the differences
        let (a, b) = diffs(&[0.01, -0.01, 0.01, -0.01, 0.0]);
        assert!((significance(&a, &b, SigTest::PairedT).unwrap() - 1.0).abs() < 1e-9);
        let (a, b) = diffs(&[2.0, 1.0, 3.0, 0.5, 1.5]);
        assert!((significance(&a, &b, SigTest::PairedT).unwrap() - 0.020475874420910676).abs() < 1e-9);
        let (a, b) = diffs(&[0.8, -0.3, 1.2, 0.4, 0.9, -0.1]);
        assert!((significance(&a, &b, SigTest::PairedT).unwrap() - 0.10166080247642217).abs() < 1e-9);
    }

    #[test]
    fn signed_rank_matches_reference_values() {
        // scipy.stats.wilcoxon, exact mode
        for (d, p) in [
            (vec![0.8, -0.3, 1.2, 0.4, 0.9, -0.1], 0.15625),
            (vec![1.0, -2.0, 3.0, 4.0, 5.0], 0.1875),
            (vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, -7.0, 8.0], 0.1484375),
        ] {
            let (a, b) = diffs(&d);
            assert!((significance(&a, &b, SigTest::Wilcoxon).unwrap() - p).abs() < 1e-9, "{d:?}");
        }
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(significance(&[0.1, 0.2], &[0.1], SigTest::PairedT).is_err());
        assert!(significance(&[0.1], &[0.1], SigTest::PairedT).is_err());
    }
}
