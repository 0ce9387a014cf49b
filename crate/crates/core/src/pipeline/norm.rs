use serde::{Deserialize, Serialize};

use super::grid::WeekGrid;
use super::registry::{HOURS_PER_WEEK, N_VARS};
use crate::{Error, Result};

/// Default symmetric clip bound in z-units.
pub const DEFAULT_CLIP: f64 = 4.0;

/// Per-variable z-scoring statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub clip_lo: Vec<f64>,
    pub clip_hi: Vec<f64>,
    /// Observed training cells per variable.
    pub count: Vec<u64>,
}

/// Neumaier-compensated running sum; order-stable and accurate.
#[derive(Default, Clone, Copy)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Mean and population standard deviation over every observed training cell.
///
/// Variables never observed fall back to mean 0 / std 1; constant variables
/// fall back to std 1.
pub fn fit_norm_stats(train: &[WeekGrid], clip_lo: f64, clip_hi: f64) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::contract(
            "fit_norm_stats needs a non-empty training split",
        ));
    }
    if !(clip_lo < clip_hi) {
        return Err(Error::config(
            "pipeline.clip",
            format!("clip_lo {clip_lo} must be below clip_hi {clip_hi}"),
        ));
    }
    let mut sums = [KahanSum::default(); N_VARS];
    let mut counts = [0u64; N_VARS];
    for g in train {
        for h in 0..HOURS_PER_WEEK {
            for v in 0..N_VARS {
                if g.observed(h, v) {
                    sums[v].add(g.value(h, v));
                    counts[v] += 1;
                }
            }
        }
    }
    let mean: Vec<f64> = (0..N_VARS)
        .map(|v| {
            if counts[v] > 0 {
                sums[v].value() / counts[v] as f64
            } else {
                0.0
            }
        })
        .collect();
    let mut sq = [KahanSum::default(); N_VARS];
    for g in train {
        for h in 0..HOURS_PER_WEEK {
            for v in 0..N_VARS {
                if g.observed(h, v) {
                    let d = g.value(h, v) - mean[v];
                    sq[v].add(d * d);
                }
            }
        }
    }
    let mut std = vec![1.0; N_VARS];
    for v in 0..N_VARS {
        if counts[v] == 0 {
            log::warn!("variable {v} never observed in training data; using mean 0, std 1");
            continue;
        }
        let s = (sq[v].value() / counts[v] as f64).sqrt();
        if s > 0.0 && s.is_finite() {
            std[v] = s;
        } else {
            log::warn!("variable {v} is constant in training data; using std 1");
        }
    }
    Ok(NormStats {
        mean,
        std,
        clip_lo: vec![clip_lo; N_VARS],
        clip_hi: vec![clip_hi; N_VARS],
        count: counts.to_vec(),
    })
}

impl NormStats {
    /// z-score without clipping.
    pub fn z(&self, var: usize, value: f64) -> f64 {
        (value - self.mean[var]) / self.std[var]
    }
}

/// z-score observed cells, clip to the bounds, and zero every unobserved cell.
pub fn apply_norm(grid: &WeekGrid, stats: &NormStats) -> WeekGrid {
    let mut out = grid.clone();
    for h in 0..HOURS_PER_WEEK {
        for v in 0..N_VARS {
            let i = WeekGrid::idx(h, v);
            out.values[i] = if grid.mask[i] {
                stats
                    .z(v, grid.values[i])
                    .clamp(stats.clip_lo[v], stats.clip_hi[v])
            } else {
                0.0
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_with(var: usize, values: &[f64]) -> WeekGrid {
        let mut g = WeekGrid::empty(1, 0);
        for (h, &x) in values.iter().enumerate() {
            g.set(h, var, x);
        }
        g
    }

    #[test]
    fn mean_and_population_std() {
        let s = fit_norm_stats(&[grid_with(3, &[1.0, 3.0])], -4.0, 4.0).unwrap();
        assert_eq!(s.mean[3], 2.0);
        assert_eq!(s.std[3], 1.0);
        assert_eq!((s.mean[0], s.std[0]), (0.0, 1.0));
    }

    #[test]
    fn constant_variable_falls_back_to_unit_std() {
        let s = fit_norm_stats(&[grid_with(5, &[7.0, 7.0, 7.0])], -4.0, 4.0).unwrap();
        assert_eq!(s.mean[5], 7.0);
        assert_eq!(s.std[5], 1.0);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(fit_norm_stats(&[], -4.0, 4.0).is_err());
        assert!(fit_norm_stats(&[WeekGrid::empty(0, 0)], 4.0, 4.0).is_err());
    }

    #[test]
    fn apply_zscores_clips_and_zeros_missing() {
        let train = grid_with(2, &[0.0, 2.0]);
        let s = fit_norm_stats(&[train], -4.0, 4.0).unwrap();
        let mut g = WeekGrid::empty(9, 1);
        g.set(0, 2, 1.0);
        g.set(1, 2, 1.0 + 10.0);
        g.values[WeekGrid::idx(2, 2)] = 123.0; // garbage in an unobserved cell
        let z = apply_norm(&g, &s);
        assert_eq!(z.value(0, 2), 0.0);
        assert_eq!(z.value(1, 2), 4.0);
        assert_eq!(z.value(2, 2), 0.0);
        assert!(!z.observed(2, 2));
    }

    #[test]
    fn test_split_is_not_centered_by_train_stats() {
        let s = fit_norm_stats(&[grid_with(1, &[0.0, 1.0, 2.0])], -4.0, 4.0).unwrap();
        let z = apply_norm(&grid_with(1, &[3.0, 3.5]), &s);
        let m: f64 = z.variable_values(1).sum::<f64>() / 2.0;
        assert!(m.abs() > 0.5);
    }
}
