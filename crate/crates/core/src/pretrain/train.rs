use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{
    embed_batch, init_model, project_train, split_views, update_running_stats, ModelConfig,
};
use super::{drop_tokens, sample_pairs, LossConfig, OptimizerConfig, SubjectIndex};
use crate::io::atomic_write;
use crate::nn::optim::clip_grad_norm;
use crate::nn::{
    adamw_step, checkpoint, duplicate_pairs, value_and_grad, Dropout, OptimizerState, ParameterTree,
};
use crate::pipeline::WeekGrid;
use crate::tokenizers::token_count;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Contrastive,
    /// Masked reconstruction ablation.
    Mae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Positive pairs per step (`N`); each step encodes `2N` weeks.
    pub batch_size: usize,
    pub epochs: u64,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Contrastive,
            batch_size: 32,
            epochs: 5,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        Ok(())
    }

    /// Steps needed to visit about every training week once.
    pub fn steps_per_epoch(&self, train_weeks: usize) -> u64 {
        (train_weeks as u64)
            .div_ceil(2 * self.batch_size as u64)
            .max(1)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub infonce: f64,
    pub koleo: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub params: ParameterTree<f32>,
    pub log: Vec<StepRecord>,
    pub steps_per_epoch: u64,
    pub checkpoints: Vec<PathBuf>,
}

pub(crate) fn write_jsonl<S: Serialize>(path: &Path, records: &[S]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_BATCHES: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Contrastive pretraining on normalized training weeks. With `out` set,
/// writes `log.jsonl`, `checkpoint.wbmc` (latest) and `epoch-NNN.wbmc`; on a
/// numeric failure the latest checkpoint is left in place and the error is
/// returned.
pub fn pretrain(
    weeks: &[WeekGrid],
    cfg: &PretrainConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<PretrainRun> {
    cfg.validate()?;
    let index = SubjectIndex::new(weeks);
    let n = cfg.train.batch_size;
    if n > index.len() {
        return Err(Error::config(
            "train.batch_size",
            format!("{n} pairs requested from {} training subjects", index.len()),
        ));
    }
    let config_json = serde_json::to_string(cfg)?;
    let steps_per_epoch = cfg.train.steps_per_epoch(weeks.len());
    let schedule = cfg.optimizer.schedule(steps_per_epoch);
    let mut params: ParameterTree<f32> = init_model(&cfg.model, seed)?;
    let mut state = OptimizerState::new(cfg.optimizer.adamw(), &params);
    let mut batch_rng = rng_for(seed, STREAM_BATCHES);
    let mut aug_rng = rng_for(seed, STREAM_AUGMENT);
    let mut dropout = Dropout::train(rng_for(seed, STREAM_DROPOUT));
    let kind = cfg.model.tokenizer;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();

    let save =
        |params: &ParameterTree<f32>, epoch: u64, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
            if let Some(dir) = out {
                let bytes = checkpoint::encode(params, &config_json);
                let path = dir.join(format!("epoch-{epoch:03}.wbmc"));
                atomic_write(&path, &bytes)?;
                atomic_write(&dir.join("checkpoint.wbmc"), &bytes)?;
                checkpoints.push(path);
            }
            Ok(())
        };
    save(&params, 0, &mut checkpoints)?;

    let max_steps = cfg.train.max_steps.unwrap_or(u64::MAX);
    let mut step = 0u64;
    'epochs: for epoch in 0..cfg.train.epochs {
        for i in 0..steps_per_epoch {
            if step >= max_steps {
                if i > 0 {
                    save(&params, epoch + 1, &mut checkpoints)?;
                }
                break 'epochs;
            }
            let lr = schedule.lr_at(step, epoch);
            let batch = sample_pairs(&index, n, &mut batch_rng)?;
            let members = batch.members();
            let views: Vec<&WeekGrid> = members.iter().map(|&i| &weeks[i]).collect();
            let keep: Vec<Vec<usize>> = views
                .iter()
                .map(|w| drop_tokens(token_count(kind, w), cfg.loss.token_drop, &mut aug_rng))
                .collect();
            let loss_cfg = cfg.loss;
            let model_cfg = &cfg.model;
            let result = value_and_grad(&params, |g, b| {
                let r = embed_batch(g, b, model_cfg, &views, Some(&keep), &mut dropout)?;
                let (h, mean, var) = project_train(g, b, model_cfg, r, &mut dropout)?;
                let (h1, h2) = split_views(g, h, n)?;
                let nce = g.info_nce(h1, h2, loss_cfg.temperature as f32)?;
                let (total, ko) = if n >= 2 {
                    let dups =
                        duplicate_pairs(g.value(h1)).len() + duplicate_pairs(g.value(h2)).len();
                    let ko = g.koleo(h1, h2)?;
                    let scaled = g.scale(ko, loss_cfg.koleo_weight as f32);
                    (g.add(nce, scaled)?, Some((ko, dups)))
                } else {
                    (nce, None)
                };
                let nce_v = g.scalar(nce) as f64;
                let ko_v = ko.map(|(k, d)| (g.scalar(k) as f64, d));
                Ok((total, (nce_v, ko_v, mean, var)))
            });
            let (total, mut grads, (nce_v, ko_v, mean, var)) = match result {
                Ok(v) => v,
                Err(e) => {
                    if let Some(dir) = out {
                        write_jsonl(&dir.join("log.jsonl"), &log)?;
                    }
                    return Err(e);
                }
            };
            let (ko_value, dups) = ko_v.unwrap_or((0.0, 0));
            if dups > 0 {
                warn!("step {step}: {dups} duplicate projection rows; koleo distance floored");
            }
            if let Some(c) = cfg.optimizer.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adamw_step(&mut params, &grads, &mut state, lr)?;
            update_running_stats(&mut params, &mean, &var, 2 * n)?;
            if let Some((name, _)) = params.params().find(|(_, m)| !m.is_finite()) {
                let name = name.clone();
                if let Some(dir) = out {
                    write_jsonl(&dir.join("log.jsonl"), &log)?;
                }
                return Err(Error::numeric(
                    name,
                    format!("parameter became non-finite at step {step}"),
                ));
            }
            let rec = StepRecord {
                step,
                epoch,
                lr,
                infonce: nce_v,
                koleo: ko_value,
                total: total as f64,
            };
            if step % 10 == 0 {
                info!(
                    "step {step} epoch {epoch} lr {lr:.2e} infonce {:.4} koleo {:.4} total {:.4}",
                    rec.infonce, rec.koleo, rec.total
                );
            }
            log.push(rec);
            step += 1;
        }
        save(&params, epoch + 1, &mut checkpoints)?;
        if let Some(dir) = out {
            write_jsonl(&dir.join("log.jsonl"), &log)?;
        }
    }
    if let Some(dir) = out {
        write_jsonl(&dir.join("log.jsonl"), &log)?;
    }
    Ok(PretrainRun {
        params,
        log,
        steps_per_epoch,
        checkpoints,
    })
}
