//! Ridge regression with standardized features, an unpenalized intercept and
//! grouped k-fold selection of the penalty.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Nine penalties log-spaced from 1e-4 to 1e4.
pub fn default_penalties() -> Vec<f64> {
    (-4..=4).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    /// Coefficients on the original feature scale.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub penalty: f64,
}

impl RidgeModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter().map(|r| self.predict_row(r)).collect()
    }
}

/// Standardized design with its thin SVD; reused across penalties.
struct Decomposed {
    mean: Vec<f64>,
    scale: Vec<f64>,
    y_mean: f64,
    u: DMatrix<f64>,
    s: DVector<f64>,
    v_t: DMatrix<f64>,
    uty: DVector<f64>,
}

fn check_shape(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::contract(format!(
            "ridge: {} rows but {} targets",
            x.len(),
            y.len()
        )));
    }
    let p = x[0].len();
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::contract("ridge: ragged feature rows"));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::contract("ridge: non-finite input"));
    }
    Ok(p)
}

fn decompose(x: &[Vec<f64>], y: &[f64]) -> Result<Decomposed> {
    let p = check_shape(x, y)?;
    let n = x.len();
    let nf = n as f64;
    let mut mean = vec![0.0; p];
    for r in x {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / nf;
        }
    }
    let mut scale = vec![0.0; p];
    for r in x {
        for j in 0..p {
            scale[j] += (r[j] - mean[j]).powi(2) / nf;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let y_mean = y.iter().sum::<f64>() / nf;
    let xs = DMatrix::from_fn(n, p, |i, j| (x[i][j] - mean[j]) / scale[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let svd = xs.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::numeric("ridge", "SVD failed"))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::numeric("ridge", "SVD failed"))?;
    let uty = u.transpose() * &yc;
    Ok(Decomposed {
        mean,
        scale,
        y_mean,
        u,
        s: svd.singular_values,
        v_t,
        uty,
    })
}

impl Decomposed {
    fn solve(&self, penalty: f64) -> RidgeModel {
        let smax = self.s.iter().cloned().fold(0.0, f64::max);
        let tol = smax * 1e-12 * (self.u.nrows().max(self.v_t.ncols()) as f64);
        let mut rank_deficient = false;
        let coef = DVector::from_iterator(
            self.s.len(),
            self.s.iter().zip(self.uty.iter()).map(|(&s, &b)| {
                if penalty == 0.0 {
                    if s <= tol {
                        rank_deficient = true;
                        0.0
                    } else {
                        b / s
                    }
                } else {
                    s * b / (s * s + penalty)
                }
            }),
        );
        if rank_deficient {
            warn!("ridge: singular system at penalty 0, using the minimum-norm solution");
        }
        let w_std = self.v_t.transpose() * coef;
        let weights: Vec<f64> = w_std.iter().zip(&self.scale).map(|(w, s)| w / s).collect();
        let intercept = self.y_mean
            - weights
                .iter()
                .zip(&self.mean)
                .map(|(w, m)| w * m)
                .sum::<f64>();
        RidgeModel {
            weights,
            intercept,
            penalty,
        }
    }
}

/// Closed-form ridge fit at one penalty. Targets are centered and features
/// standardized, so the intercept is never penalized.
pub fn ridge_fit(x: &[Vec<f64>], y: &[f64], penalty: f64) -> Result<RidgeModel> {
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(Error::config(
            "probe.penalties",
            "penalties must be finite and non-negative",
        ));
    }
    Ok(decompose(x, y)?.solve(penalty))
}

/// Fold of every row: unique groups are shuffled and dealt round-robin.
pub fn group_folds(groups: &[u64], folds: usize, seed: u64) -> Result<Vec<usize>> {
    let mut unique: Vec<u64> = groups.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if folds < 2 || unique.len() < folds {
        return Err(Error::config(
            "probe.folds",
            format!(
                "{folds} folds need at least that many groups, got {}",
                unique.len()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let fold_of: BTreeMap<u64, usize> = unique
        .iter()
        .enumerate()
        .map(|(i, &g)| (g, i % folds))
        .collect();
    Ok(groups.iter().map(|g| fold_of[g]).collect())
}

/// Mean validation MSE per penalty under grouped k-fold validation.
pub fn cv_scores(
    x: &[Vec<f64>],
    y: &[f64],
    groups: &[u64],
    penalties: &[f64],
    folds: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_shape(x, y)?;
    if groups.len() != x.len() {
        return Err(Error::contract("ridge: group ids do not match rows"));
    }
    if penalties.is_empty() || penalties.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
        return Err(Error::config(
            "probe.penalties",
            "must be a non-empty list of non-negative values",
        ));
    }
    let fold = group_folds(groups, folds, seed)?;
    let mut totals = vec![0.0; penalties.len()];
    for k in 0..folds {
        let tr: Vec<usize> = (0..x.len()).filter(|&i| fold[i] != k).collect();
        let va: Vec<usize> = (0..x.len()).filter(|&i| fold[i] == k).collect();
        let xt: Vec<Vec<f64>> = tr.iter().map(|&i| x[i].clone()).collect();
        let yt: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
        let d = decompose(&xt, &yt)?;
        for (t, &pen) in totals.iter_mut().zip(penalties) {
            let m = d.solve(pen);
            let mse = va
                .iter()
                .map(|&i| (m.predict_row(&x[i]) - y[i]).powi(2))
                .sum::<f64>()
                / va.len() as f64;
            *t += mse / folds as f64;
        }
    }
    Ok(totals)
}

/// Selects the penalty with the lowest grouped-CV error (first on ties) and
/// refits on all rows.
pub fn ridge_fit_cv(
    x: &[Vec<f64>],
    y: &[f64],
    groups: &[u64],
    penalties: &[f64],
    folds: usize,
    seed: u64,
) -> Result<RidgeModel> {
    let scores = cv_scores(x, y, groups, penalties, folds, seed)?;
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |b, (i, &s)| if s < scores[b] { i } else { b });
    ridge_fit(x, y, penalties[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_x(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..p).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect()
    }

    #[test]
    fn exact_recovery_on_determined_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = [1.5, -2.0, 0.25, 3.0];
        let x = random_x(&mut rng, 5, 4);
        let y: Vec<f64> = x
            .iter()
            .map(|r| 0.7 + r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let m = ridge_fit(&x, &y, 0.0).unwrap();
        for (a, b) in m.weights.iter().zip(&w) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((m.intercept - 0.7).abs() < 1e-8);
    }

    #[test]
    fn huge_penalty_gives_intercept_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_x(&mut rng, 40, 5);
        let y: Vec<f64> = x.iter().map(|r| r[0] * 3.0 + 1.0).collect();
        let m = ridge_fit(&x, &y, 1e12).unwrap();
        let norm: f64 = m.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(norm < 1e-6);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((m.intercept - mean).abs() < 1e-5);
    }

    #[test]
    fn cv_winner_beats_grid_endpoints_on_held_out_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = random_x(&mut rng, 140, 10);
        let y: Vec<f64> = x
            .iter()
            .map(|r| {
                r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + rng.random_range(-1.5..1.5)
            })
            .collect();
        let (xt, xh) = x.split_at(100);
        let (yt, yh) = y.split_at(100);
        let groups: Vec<u64> = (0..100).collect();
        let grid = [1e-6, 1.0, 10.0, 1e6];
        let mse = |m: &RidgeModel| {
            xh.iter()
                .zip(yh)
                .map(|(r, t)| (m.predict_row(r) - t).powi(2))
                .sum::<f64>()
                / 40.0
        };
        let best = ridge_fit_cv(xt, yt, &groups, &grid, 5, 1).unwrap();
        let lo = ridge_fit(xt, yt, grid[0]).unwrap();
        let hi = ridge_fit(xt, yt, grid[3]).unwrap();
        assert!(mse(&best) <= mse(&lo) && mse(&best) <= mse(&hi));
    }

    #[test]
    fn predictions_continuous_in_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_x(&mut rng, 30, 6);
        let y: Vec<f64> = x
            .iter()
            .map(|r| r[1] - r[2] + rng.random_range(-0.1..0.1))
            .collect();
        let a = ridge_fit(&x, &y, 1.0).unwrap().predict(&x);
        let b = ridge_fit(&x, &y, 1.0 + 1e-6).unwrap().predict(&x);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn folds_keep_groups_together() {
        let groups: Vec<u64> = (0..50).map(|i| i / 5).collect();
        let f = group_folds(&groups, 5, 3).unwrap();
        for i in 0..50 {
            assert_eq!(f[i], f[(i / 5) * 5]);
        }
        assert!(group_folds(&groups[..10], 5, 3).is_err());
    }
}
