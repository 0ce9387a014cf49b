use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

fn check(pred: &[f64], y: &[f64]) -> Result<()> {
    if pred.is_empty() || pred.len() != y.len() {
        return Err(Error::contract(format!(
            "metric needs equal non-empty inputs, got {} and {}",
            pred.len(),
            y.len()
        )));
    }
    Ok(())
}

pub fn mae(pred: &[f64], y: &[f64]) -> Result<f64> {
    check(pred, y)?;
    Ok(pred.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / y.len() as f64)
}

pub fn r2(pred: &[f64], y: &[f64]) -> Result<f64> {
    check(pred, y)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("R² of a constant target".into()));
    }
    let ss_res: f64 = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Rank statistic with average ranks for ties. `labels` are 0/1 (any
/// positive value counts as 1).
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l > 0.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l > 0.0)
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    /// Resamples on which the metric was undefined.
    pub skipped: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile 95% interval of `metric` over `resamples` draws of `n` units
/// with replacement. Resamples where the metric is undefined are skipped.
pub fn bootstrap_ci(
    n: usize,
    resamples: usize,
    seed: u64,
    metric: impl Fn(&[usize]) -> Result<f64>,
) -> Result<BootstrapCi> {
    if resamples < 100 {
        return Err(Error::config("probe.resamples", "must be at least 100"));
    }
    if n == 0 {
        return Err(Error::contract("bootstrap over zero units"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(resamples);
    let mut skipped = 0;
    let mut idx = vec![0usize; n];
    for _ in 0..resamples {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
        match metric(&idx) {
            Ok(v) => values.push(v),
            Err(Error::UndefinedMetric(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::UndefinedMetric(
            "metric undefined on every bootstrap resample".into(),
        ));
    }
    values.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        lo: quantile(&values, 0.025),
        hi: quantile(&values, 0.975),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auroc(s: &[f64], l: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] > 0.0 && l[j] == 0.0 {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let y = [1.0, 2.0, 4.0];
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(r2(&y, &y).unwrap(), 1.0);
        assert!(r2(&[7.0 / 3.0; 3], &y).unwrap().abs() < 1e-12);
        assert_eq!(auroc(&[0.9, 0.8, 0.3], &[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1.0, 1.0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auroc_matches_pair_counting_and_is_rank_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let n = rng.random_range(2..30);
            let s: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..8) as f64) / 2.0)
                .collect();
            let mut l: Vec<f64> = (0..n)
                .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
                .collect();
            l[0] = 1.0;
            l[1] = 0.0;
            let a = auroc(&s, &l).unwrap();
            assert!((a - brute_auroc(&s, &l)).abs() < 1e-12);
            let t: Vec<f64> = s.iter().map(|v| (v * 3.0).exp()).collect();
            assert!((auroc(&t, &l).unwrap() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn bootstrap_properties() {
        let c = vec![2.5; 20];
        let ci = bootstrap_ci(20, 200, 1, |idx| {
            mae(
                &idx.iter().map(|&i| c[i]).collect::<Vec<_>>(),
                &vec![0.0; idx.len()],
            )
        })
        .unwrap();
        assert_eq!((ci.lo, ci.hi), (2.5, 2.5));
        let y: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let f = |idx: &[usize]| Ok(idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64);
        let a = bootstrap_ci(30, 500, 9, f).unwrap();
        let b = bootstrap_ci(30, 500, 9, f).unwrap();
        assert_eq!(a, b);
        assert!(a.lo <= a.hi);
        assert!(bootstrap_ci(30, 50, 9, f).is_err());
        let labels = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let scores = [0.9, 0.1, 0.2, 0.3, 0.4, 0.5];
        let ci = bootstrap_ci(6, 300, 2, |idx| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
            auroc(&s, &l)
        })
        .unwrap();
        assert!(ci.skipped > 0);
    }
}
