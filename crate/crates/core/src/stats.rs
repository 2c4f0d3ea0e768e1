//! Summary statistics and the tests the experiments report.
//!
//! Percentiles use linear interpolation between order statistics (the
//! "type 7" convention): for sorted `x[0..n]` and `q ∈ [0, 1]`, take
//! `h = (n - 1)·q` and interpolate between `x[⌊h⌋]` and `x[⌊h⌋ + 1]`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{check_len, Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); zero for `n < 2`.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Type-7 percentile, `q` in `[0, 100]`.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    percentile_sorted(&s, q)
}

fn percentile_sorted(s: &[f64], q: f64) -> f64 {
    assert!(!s.is_empty(), "percentile of empty sample");
    let h = (s.len() - 1) as f64 * (q / 100.0).clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
    pub p99: f64,
}

impl SummaryStats {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self {
            n: s.len(),
            mean: mean(&s),
            std: std_dev(&s),
            min: s[0],
            max: s[s.len() - 1],
            p25: percentile_sorted(&s, 25.0),
            p50: percentile_sorted(&s, 50.0),
            p75: percentile_sorted(&s, 75.0),
            p90: percentile_sorted(&s, 90.0),
            p99: percentile_sorted(&s, 99.0),
        })
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-tailed p-value of a t statistic with `df` degrees of freedom.
pub fn t_two_tailed(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub n: usize,
    /// `None` when either input is constant.
    pub rho: Option<f64>,
    pub p_two_tailed: Option<f64>,
}

/// Spearman rank correlation; p-value from the t approximation with `n - 2`
/// degrees of freedom.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    check_len("spearman inputs", xs.len(), ys.len())?;
    if xs.len() < 3 {
        return Err(Error::Domain("spearman needs at least 3 pairs".into()));
    }
    let n = xs.len();
    let rho = pearson(&average_ranks(xs), &average_ranks(ys));
    let p = rho.map(|r| {
        if r.abs() >= 1.0 {
            0.0
        } else {
            let df = (n - 2) as f64;
            t_two_tailed(r * (df / (1.0 - r * r)).sqrt(), df)
        }
    });
    Ok(Correlation {
        n,
        rho,
        p_two_tailed: p,
    })
}

/// Area under the ROC curve via the Mann–Whitney statistic (ties count ½).
/// `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_len("auc inputs", scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let ranks = average_ranks(scores);
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = r_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos as f64 * n_neg as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_two_tailed: f64,
    pub paired: bool,
    /// Set when the relevant variance is exactly zero.
    pub zero_variance: bool,
}

/// Paired t-test on `a - b`, or Welch's unequal-variance test.
pub fn t_test(a: &[f64], b: &[f64], paired: bool) -> Result<TTest> {
    if paired {
        check_len("paired t-test", a.len(), b.len())?;
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Domain("t-test needs at least 2 observations per group".into()));
    }
    let (diff, se2, df) = if paired {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let n = d.len() as f64;
        let s = std_dev(&d);
        (mean(&d), s * s / n, n - 1.0)
    } else {
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let (va, vb) = (std_dev(a).powi(2), std_dev(b).powi(2));
        let (qa, qb) = (va / na, vb / nb);
        let se2 = qa + qb;
        let df = if se2 > 0.0 {
            se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0))
        } else {
            na + nb - 2.0
        };
        (mean(a) - mean(b), se2, df)
    };
    if se2 == 0.0 {
        let (t, p) = if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0)
        };
        return Ok(TTest {
            t,
            df,
            p_two_tailed: p,
            paired,
            zero_variance: true,
        });
    }
    let t = diff / se2.sqrt();
    Ok(TTest {
        t,
        df,
        p_two_tailed: t_two_tailed(t, df),
        paired,
        zero_variance: false,
    })
}

/// Quartile bin ids `1..=4` split at the 25/50/75th percentiles; a value equal
/// to a cut point goes to the lower bin.
pub fn quartile_bin(values: &[f64]) -> Result<Vec<u8>> {
    if values.len() < 4 {
        return Err(Error::Domain("quartile binning needs at least 4 values".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let cuts = [
        percentile_sorted(&s, 25.0),
        percentile_sorted(&s, 50.0),
        percentile_sorted(&s, 75.0),
    ];
    Ok(values
        .iter()
        .map(|&v| 1 + cuts.iter().filter(|&&c| v > c).count() as u8)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn spearman_examples() {
        let r = spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(r.rho, Some(1.0));
        let r = spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap();
        assert_eq!(r.rho, Some(-1.0));
        let r = spearman(&[1.0, 1.0, 2.0, 3.0], &[2.0, 2.0, 4.0, 6.0]).unwrap();
        assert!((r.rho.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_constant_is_flagged() {
        let r = spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.rho, None);
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spearman_p_value_matches_t_approximation() {
        // rho = 0.5 with n = 12 → t = 0.5·sqrt(10/0.75) = 1.8257, df 10, p ≈ 0.0979
        let p = t_two_tailed(0.5 * (10.0f64 / 0.75).sqrt(), 10.0);
        assert!((p - 0.09785).abs() < 5e-4, "{p}");
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), Some(1.0));
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, true, false]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.3, 0.4], &[true, true]).unwrap(), None);
    }

    #[test]
    fn auc_random_is_half() {
        let mut rng = SplitMix64::new(2024);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.next_f64()).collect();
        let labels: Vec<bool> = (0..10_000).map(|_| rng.next_f64() < 0.5).collect();
        let a = auc(&scores, &labels).unwrap().unwrap();
        assert!((a - 0.5).abs() < 0.02, "{a}");
    }

    #[test]
    fn paired_identical_is_zero_variance() {
        let a = [1.0, 2.0, 3.0];
        let r = t_test(&a, &a, true).unwrap();
        assert!(r.zero_variance);
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p_two_tailed, 1.0);
    }

    #[test]
    fn welch_detects_unit_shift() {
        let mut rng = SplitMix64::new(77);
        let a: Vec<f64> = (0..200).map(|_| 1.0 + rng.normal()).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.normal()).collect();
        let r = t_test(&a, &b, false).unwrap();
        assert!(r.p_two_tailed < 1e-10, "{r:?}");
        let s = t_test(&b, &a, false).unwrap();
        assert_eq!(s.t, -r.t);
        assert_eq!(s.p_two_tailed, r.p_two_tailed);
    }

    #[test]
    fn welch_reference_value() {
        // scipy.stats.ttest_ind([1,2,3,4,5],[2,4,6,8,10], equal_var=False)
        // → t = -1.8973665961, df = 5.88235, p = 0.1075312
        let r = t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 6.0, 8.0, 10.0], false).unwrap();
        assert!((r.t + 1.897_366_596_1).abs() < 1e-9);
        assert!((r.df - 5.882_352_941).abs() < 1e-8);
        assert!((r.p_two_tailed - 0.107_531_19).abs() < 1e-6, "{}", r.p_two_tailed);
    }

    #[test]
    fn quartile_examples() {
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(quartile_bin(&v).unwrap(), vec![1, 1, 2, 2, 3, 3, 4, 4]);
        assert_eq!(quartile_bin(&[2.0; 6]).unwrap(), vec![1; 6]);
        assert!(quartile_bin(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn summary_of_constant() {
        let s = SummaryStats::of(&[4.0; 9]).unwrap();
        assert_eq!(s.std, 0.0);
        assert!([s.p25, s.p50, s.p75, s.p90, s.p99].iter().all(|&p| p == 4.0));
        assert!(SummaryStats::of(&[]).is_none());
    }

    #[test]
    fn type7_percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 50.0), 2.5);
        assert_eq!(percentile(&v, 25.0), 1.75);
        assert_eq!(percentile(&v, 100.0), 4.0);
    }
}
