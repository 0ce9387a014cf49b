use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::probe::{assert_disjoint, ProbeSet};
use super::ridge::{default_penalties, ridge_fit_cv};
use super::{extract_embeddings, keyed, metrics, subject_aggregate};
use crate::backbones::BackboneKind;
use crate::io::LabelRow;
use crate::pipeline::{PreparedData, Split};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::tokenizers::TokenizerKind;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub tokenizers: Vec<TokenizerKind>,
    pub backbones: Vec<BackboneKind>,
    pub batch_sizes: Vec<usize>,
    pub layers: Vec<usize>,
    pub weight_decays: Vec<f64>,
    pub koleo_weights: Vec<f64>,
    pub folds: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            tokenizers: TokenizerKind::ALL.to_vec(),
            backbones: BackboneKind::ALL.to_vec(),
            batch_sizes: vec![128, 192],
            layers: vec![12, 16],
            weight_decays: vec![0.01, 0.001],
            koleo_weights: vec![0.1, 0.2],
            folds: 5,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("ablation.tokenizers", self.tokenizers.is_empty()),
            ("ablation.backbones", self.backbones.is_empty()),
            ("ablation.batch_sizes", self.batch_sizes.is_empty()),
            ("ablation.layers", self.layers.is_empty()),
            ("ablation.weight_decays", self.weight_decays.is_empty()),
            ("ablation.koleo_weights", self.koleo_weights.is_empty()),
        ];
        for (key, empty) in lists {
            if empty {
                return Err(Error::config(key, "must list at least one value"));
            }
        }
        Ok(())
    }

    pub fn cells(&self, base: &PretrainConfig) -> Vec<PretrainConfig> {
        let mut out = Vec::new();
        for &tok in &self.tokenizers {
            for &bb in &self.backbones {
                for &batch in &self.batch_sizes {
                    for &layers in &self.layers {
                        for &wd in &self.weight_decays {
                            for &kw in &self.koleo_weights {
                                let mut c = base.clone();
                                c.model.tokenizer = tok;
                                c.model.backbone = bb;
                                c.model.layers = layers;
                                c.train.batch_size = batch;
                                c.optimizer.weight_decay = wd;
                                c.loss.koleo_weight = kw;
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// 1-based position by validation MAE; absent for failed cells.
    pub rank: Option<usize>,
    pub tokenizer: TokenizerKind,
    pub backbone: BackboneKind,
    pub batch_size: usize,
    pub layers: usize,
    pub weight_decay: f64,
    pub koleo_weight: f64,
    pub val_age_mae: Option<f64>,
    pub final_loss: Option<f64>,
    pub status: String,
}

fn run_cell(
    data: &PreparedData,
    labels: &[LabelRow],
    cfg: &PretrainConfig,
    folds: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let train = data.normalized_in(Split::Train);
    let val = data.normalized_in(Split::Val);
    let run = pretrain(&train, cfg, seed, None)?;
    let final_loss = run.log.last().map(|r| r.total).unwrap_or(f64::NAN);
    let ages: std::collections::BTreeMap<u64, f64> =
        labels.iter().map(|l| (l.subject_id, l.age)).collect();
    let side = |weeks: &[crate::pipeline::WeekGrid]| -> Result<ProbeSet> {
        let emb = extract_embeddings(&run.params, &cfg.model, weeks)?;
        let mut set = ProbeSet::default();
        for (s, x) in subject_aggregate(&keyed(&emb)) {
            if let Some(&age) = ages.get(&s) {
                set.push(s, x, age);
            }
        }
        Ok(set)
    };
    let tr = side(&train)?;
    let va = side(&val)?;
    assert_disjoint(&tr.groups, &va.groups)?;
    let model = ridge_fit_cv(&tr.x, &tr.y, &tr.groups, &default_penalties(), folds, seed)?;
    Ok((metrics::mae(&model.predict(&va.x), &va.y)?, final_loss))
}

/// Pretrains every cell, probes subject-level age on the validation split
/// and ranks cells by ascending MAE. Failed cells are kept, unranked, at the
/// end of the table.
pub fn run_ablation_grid(
    data: &PreparedData,
    labels: &[LabelRow],
    grid: &AblationConfig,
    base: &PretrainConfig,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    let mut rows = Vec::new();
    for cfg in grid.cells(base) {
        let start = Instant::now();
        let result = run_cell(data, labels, &cfg, grid.folds, seed);
        let seconds = start.elapsed().as_secs_f64();
        let (mae, loss, status) = match result {
            Ok((m, l)) => (Some(m), Some(l), "ok".to_string()),
            Err(e) => {
                warn!("ablation cell failed: {e}");
                (None, None, format!("failed: {e}"))
            }
        };
        info!(
            "cell {}+{} batch {} layers {}: {status} ({seconds:.1}s)",
            cfg.model.tokenizer.as_str(),
            cfg.model.backbone.as_str(),
            cfg.train.batch_size,
            cfg.model.layers
        );
        rows.push(AblationRow {
            rank: None,
            tokenizer: cfg.model.tokenizer,
            backbone: cfg.model.backbone,
            batch_size: cfg.train.batch_size,
            layers: cfg.model.layers,
            weight_decay: cfg.optimizer.weight_decay,
            koleo_weight: cfg.loss.koleo_weight,
            val_age_mae: mae,
            final_loss: loss,
            status,
        });
    }
    rows.sort_by(|a, b| match (a.val_age_mae, b.val_age_mae) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    for (i, r) in rows.iter_mut().enumerate() {
        if r.val_age_mae.is_some() {
            r.rank = Some(i + 1);
        }
    }
    Ok(rows)
}
