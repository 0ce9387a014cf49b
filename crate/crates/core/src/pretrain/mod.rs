//! Contrastive pretraining: pair sampling, token-drop views, the
//! InfoNCE + KoLeo objective and the training loops.

mod mae;
mod model;
mod train;

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{duplicate_pairs, AdamWConfig, DecayGranularity, Float, Graph, LrSchedule, Matrix};
use crate::pipeline::WeekGrid;
use crate::tokenizers::TokenSequence;
use crate::{Error, Result};

pub use mae::{
    apply_cell_mask, init_mae, mae_loss, mae_loss_var, mae_pretrain, reconstruct, MaeConfig,
    MaeRecord, MaeRun, MaskMode,
};
pub use model::{
    check_compatible, embed_batch, embed_weeks, init_model, project_eval, project_train,
    split_views, update_running_stats, ModelConfig, HEAD_BN_MOMENTUM,
};
pub use train::{pretrain, Objective, PretrainConfig, PretrainRun, StepRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub koleo_weight: f64,
    pub token_drop: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            koleo_weight: 0.21,
            token_drop: 0.233,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("loss.temperature", "must be positive"));
        }
        if !(self.koleo_weight >= 0.0 && self.koleo_weight.is_finite()) {
            return Err(Error::config("loss.koleo_weight", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.token_drop) {
            return Err(Error::config("loss.token_drop", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub start_factor: f64,
    pub gamma: f64,
    pub decay: DecayGranularity,
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.001,
            weight_decay: 0.035,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 1000,
            start_factor: 0.5,
            gamma: 0.995,
            decay: DecayGranularity::Epoch,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self, steps_per_epoch: u64) -> LrSchedule {
        LrSchedule {
            start_factor: self.start_factor,
            gamma: self.gamma,
            granularity: self.decay,
            ..LrSchedule::new(self.lr, self.warmup_steps, steps_per_epoch)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule(1).validate()?;
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                "optimizer.weight_decay",
                "must be non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta1", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("optimizer.grad_clip", "must be positive"));
        }
        Ok(())
    }
}

/// Symmetric InfoNCE on cosine similarities (denominator includes the
/// positive). Zero rows are a contract error.
pub fn info_nce<T: Float>(h1: &Matrix<T>, h2: &Matrix<T>, tau: f64) -> Result<f64> {
    let mut g = Graph::no_grad();
    let a = g.constant(h1.clone());
    let b = g.constant(h2.clone());
    let l = g.info_nce(a, b, T::lit(tau))?;
    Ok(g.scalar(l).as_f64())
}

/// Symmetric KoLeo regularizer on raw embeddings. Duplicate rows within a
/// view are reported as a numeric failure.
pub fn koleo<T: Float>(h1: &Matrix<T>, h2: &Matrix<T>) -> Result<f64> {
    for (view, h) in [("h1", h1), ("h2", h2)] {
        let dups = duplicate_pairs(h);
        if !dups.is_empty() {
            let list: Vec<String> = dups.iter().map(|(i, j)| format!("({i}, {j})")).collect();
            return Err(Error::numeric(
                view,
                format!("duplicate embeddings at {}", list.join(", ")),
            ));
        }
    }
    let mut g = Graph::no_grad();
    let a = g.constant(h1.clone());
    let b = g.constant(h2.clone());
    let l = g.koleo(a, b)?;
    Ok(g.scalar(l).as_f64())
}

/// `info_nce + lambda * koleo`; the regularizer is skipped when `lambda` is 0.
pub fn total_loss<T: Float>(h1: &Matrix<T>, h2: &Matrix<T>, cfg: &LossConfig) -> Result<f64> {
    let nce = info_nce(h1, h2, cfg.temperature)?;
    if cfg.koleo_weight == 0.0 {
        return Ok(nce);
    }
    Ok(nce + cfg.koleo_weight * koleo(h1, h2)?)
}

/// Surviving token indices after dropping each of `n` tokens with
/// probability `p`; redraws until at least one survives.
pub fn drop_tokens<R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<usize> {
    if p <= 0.0 || n == 0 {
        return (0..n).collect();
    }
    loop {
        let keep: Vec<usize> = (0..n).filter(|_| !rng.random_bool(p)).collect();
        if !keep.is_empty() {
            return keep;
        }
    }
}

pub fn augment_token_drop<T: Float>(
    tokens: &TokenSequence<T>,
    p: f64,
    seed: u64,
) -> TokenSequence<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = drop_tokens(tokens.len(), p, &mut rng);
    let width = tokens.tokens.cols;
    let mut data = Vec::with_capacity(keep.len() * width);
    for &i in &keep {
        data.extend_from_slice(tokens.tokens.row(i));
    }
    TokenSequence {
        tokens: Matrix::from_vec(keep.len(), width, data),
        positions: keep.iter().map(|&i| tokens.positions[i]).collect(),
        variable_ids: tokens
            .variable_ids
            .as_ref()
            .map(|v| keep.iter().map(|&i| v[i]).collect()),
    }
}

/// Week indices grouped by subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectIndex {
    pub subjects: Vec<u64>,
    pub weeks: Vec<Vec<usize>>,
}

impl SubjectIndex {
    pub fn new(weeks: &[WeekGrid]) -> Self {
        let mut map: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, w) in weeks.iter().enumerate() {
            map.entry(w.subject_id).or_default().push(i);
        }
        let (subjects, weeks) = map.into_iter().unzip();
        SubjectIndex { subjects, weeks }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

/// `N` positive pairs from `N` distinct subjects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveBatch {
    pub subjects: Vec<u64>,
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Both views stacked: first members then second members.
    pub fn members(&self) -> Vec<usize> {
        self.first.iter().chain(&self.second).copied().collect()
    }
}

pub fn sample_pairs<R: Rng>(
    index: &SubjectIndex,
    n: usize,
    rng: &mut R,
) -> Result<ContrastiveBatch> {
    if n == 0 || n > index.len() {
        return Err(Error::config(
            "train.batch_size",
            format!("{n} pairs requested from {} subjects", index.len()),
        ));
    }
    let mut batch = ContrastiveBatch {
        subjects: Vec::with_capacity(n),
        first: Vec::with_capacity(n),
        second: Vec::with_capacity(n),
    };
    for s in sample(rng, index.len(), n) {
        let weeks = &index.weeks[s];
        if weeks.is_empty() {
            return Err(Error::contract(format!(
                "subject {} has no weeks",
                index.subjects[s]
            )));
        }
        let (a, b) = if weeks.len() >= 2 {
            let pick = sample(rng, weeks.len(), 2);
            (weeks[pick.index(0)], weeks[pick.index(1)])
        } else {
            (weeks[0], weeks[0])
        };
        batch.subjects.push(index.subjects[s]);
        batch.first.push(a);
        batch.second.push(b);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_info_nce(h1: &[Vec<f64>], h2: &[Vec<f64>], tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let n = h1.len();
        let one_way = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            let mut s = 0.0;
            for i in 0..n {
                let num = (cos(&a[i], &b[i]) / tau).exp();
                let den: f64 = (0..n).map(|j| (cos(&a[i], &b[j]) / tau).exp()).sum();
                s -= (num / den).ln();
            }
            s / n as f64
        };
        0.5 * (one_way(h1, h2) + one_way(h2, h1))
    }

    fn rand_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn info_nce_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = Matrix::from_rows(&rand_rows(&mut rng, 1, 4));
        let other = Matrix::from_rows(&rand_rows(&mut rng, 1, 4));
        assert_eq!(info_nce(&one, &other, 0.1).unwrap(), 0.0);

        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = info_nce(&e, &e, 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-9);
        assert!((l - 0.3133).abs() < 1e-4);

        for _ in 0..10 {
            let a = rand_rows(&mut rng, 5, 3);
            let b = rand_rows(&mut rng, 5, 3);
            let l = info_nce(&Matrix::from_rows(&a), &Matrix::from_rows(&b), 0.3).unwrap();
            assert!((l - brute_info_nce(&a, &b, 0.3)).abs() < 1e-12);
            assert!(l >= 0.0);
            let scaled: Vec<Vec<f64>> = a
                .iter()
                .map(|r| r.iter().map(|v| v * 5.0).collect())
                .collect();
            let ls = info_nce(&Matrix::from_rows(&scaled), &Matrix::from_rows(&b), 0.3).unwrap();
            assert!((l - ls).abs() < 1e-9);
        }
        let zero = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert!(matches!(info_nce(&zero, &e, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn koleo_examples() {
        let unit = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(koleo(&unit, &unit).unwrap(), 0.0);
        let r = 0.5f64.exp();
        let far = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, r]]);
        assert!((koleo(&far, &far).unwrap() + 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Matrix::from_rows(&rand_rows(&mut rng, 6, 3));
        let b = Matrix::from_rows(&rand_rows(&mut rng, 6, 3));
        let base = koleo(&a, &b).unwrap();
        let shift = |m: &Matrix<f64>| {
            let mut m = m.clone();
            for r in 0..m.rows {
                m.row_mut(r)
                    .iter_mut()
                    .zip([3.0, -1.0, 0.5])
                    .for_each(|(v, s)| *v += s);
            }
            m
        };
        assert!((koleo(&shift(&a), &shift(&b)).unwrap() - base).abs() < 1e-12);

        let dup = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0], vec![1.0, 2.0]]);
        match koleo(&dup, &dup) {
            Err(Error::Numeric { detail, .. }) => assert!(detail.contains("(0, 2)")),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn total_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_rows(&mut rng, 4, 3);
        let b = rand_rows(&mut rng, 4, 3);
        let (ma, mb) = (Matrix::from_rows(&a), Matrix::from_rows(&b));
        let no_reg = LossConfig {
            koleo_weight: 0.0,
            ..Default::default()
        };
        assert_eq!(
            total_loss(&ma, &mb, &no_reg).unwrap(),
            info_nce(&ma, &mb, 0.1).unwrap()
        );
        let cfg = LossConfig::default();
        let want = info_nce(&ma, &mb, 0.1).unwrap() + 0.21 * koleo(&ma, &mb).unwrap();
        let total = total_loss(&ma, &mb, &cfg).unwrap();
        assert!((total - want).abs() < 1e-12);
        let perm = [2usize, 0, 3, 1];
        let pa = Matrix::from_rows(&perm.iter().map(|&i| a[i].clone()).collect::<Vec<_>>());
        let pb = Matrix::from_rows(&perm.iter().map(|&i| b[i].clone()).collect::<Vec<_>>());
        assert!((total_loss(&pa, &pb, &cfg).unwrap() - total).abs() < 1e-12);
    }

    #[test]
    fn token_drop_properties() {
        let seq = TokenSequence::<f64> {
            tokens: Matrix::from_vec(168, 2, (0..336).map(|v| v as f64).collect()),
            positions: (0..168).collect(),
            variable_ids: None,
        };
        assert_eq!(augment_token_drop(&seq, 0.0, 5), seq);
        let d = augment_token_drop(&seq, 0.5, 5);
        assert!(d.positions.windows(2).all(|w| w[0] < w[1]));
        for (r, &p) in d.positions.iter().enumerate() {
            assert_eq!(d.tokens.row(r), seq.tokens.row(p as usize));
        }
        // Monte Carlo mean against Binomial(168, 0.5): sd of the mean is
        // sqrt(42 / draws)
        let draws = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let total: usize = (0..draws)
            .map(|_| drop_tokens(168, 0.5, &mut rng).len())
            .sum();
        let mean = total as f64 / draws as f64;
        assert!((mean - 84.0).abs() < 3.0 * (42.0f64 / draws as f64).sqrt());
        for _ in 0..200 {
            assert!(!drop_tokens(2, 0.95, &mut rng).is_empty());
        }
    }

    #[test]
    fn pair_sampling_rules() {
        let mut weeks = Vec::new();
        for s in 0..5u64 {
            for w in 0..(if s == 3 { 1 } else { 4 }) {
                weeks.push(WeekGrid::empty(s, 3000 + w));
            }
        }
        let index = SubjectIndex::new(&weeks);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let b = sample_pairs(&index, 5, &mut rng).unwrap();
            let mut subjects = b.subjects.clone();
            subjects.sort_unstable();
            assert_eq!(subjects, vec![0, 1, 2, 3, 4]);
            for i in 0..5 {
                assert_eq!(weeks[b.first[i]].subject_id, b.subjects[i]);
                assert_eq!(weeks[b.second[i]].subject_id, b.subjects[i]);
                assert_eq!(b.first[i] == b.second[i], b.subjects[i] == 3);
            }
        }
        let a = sample_pairs(&index, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_pairs(&index, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample_pairs(&index, 6, &mut rng),
            Err(Error::Config { .. })
        ));
    }
}
