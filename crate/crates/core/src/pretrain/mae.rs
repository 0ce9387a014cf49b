//! Masked-reconstruction ablation: dense TST inputs with cells hidden,
//! bidirectional state-space encoder and decoder, squared error on hidden
//! cells that were originally observed.

use std::path::Path;
use std::sync::Arc;

use log::info;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{init_model, ModelConfig};
use super::train::{rng_for, write_jsonl, TrainConfig};
use super::OptimizerConfig;
use crate::backbones::{self, BackboneKind, Ctx};
use crate::io::atomic_write;
use crate::nn::optim::clip_grad_norm;
use crate::nn::{
    adamw_step, checkpoint, value_and_grad, Bound, Dropout, Float, Graph, Matrix, OptimizerState,
    ParameterTree, Var,
};
use crate::pipeline::{WeekGrid, HOURS_PER_WEEK, N_VARS};
use crate::tokenizers::{self, TokenizerKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Random,
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub mask_rate: f64,
    pub mode: MaskMode,
    /// Hours per block in temporal mode.
    pub block_hours: usize,
    pub decoder_layers: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            mask_rate: 0.3,
            mode: MaskMode::Random,
            block_hours: 6,
            decoder_layers: 2,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::config("mae.mask_rate", "must lie in [0, 1)"));
        }
        if self.block_hours == 0 {
            return Err(Error::config("mae.block_hours", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub mse: f64,
    pub masked_cells: usize,
}

#[derive(Debug, Clone)]
pub struct MaeRun {
    pub params: ParameterTree<f32>,
    pub log: Vec<MaeRecord>,
}

/// Hides observed cells of `grid`; returns the masked copy and the hidden
/// cell flags (`168 x 27`, row-major).
pub fn apply_cell_mask<R: Rng>(
    grid: &WeekGrid,
    cfg: &MaeConfig,
    rng: &mut R,
) -> (WeekGrid, Vec<bool>) {
    let mut hidden = vec![false; HOURS_PER_WEEK * N_VARS];
    if cfg.mask_rate > 0.0 {
        match cfg.mode {
            MaskMode::Random => {
                for (c, h) in hidden.iter_mut().enumerate() {
                    *h = grid.mask[c] && rng.random_bool(cfg.mask_rate);
                }
            }
            MaskMode::Temporal => {
                for start in (0..HOURS_PER_WEEK).step_by(cfg.block_hours) {
                    if !rng.random_bool(cfg.mask_rate) {
                        continue;
                    }
                    for hour in start..(start + cfg.block_hours).min(HOURS_PER_WEEK) {
                        for v in 0..N_VARS {
                            let c = WeekGrid::idx(hour, v);
                            hidden[c] = grid.mask[c];
                        }
                    }
                }
            }
        }
    }
    let mut masked = grid.clone();
    for (c, &h) in hidden.iter().enumerate() {
        if h {
            masked.mask[c] = false;
            masked.values[c] = 0.0;
        }
    }
    (masked, hidden)
}

/// Mean squared error over hidden cells; 0 when nothing is hidden.
pub fn mae_loss<T: Float>(pred: &Matrix<T>, targets: &[&WeekGrid], hidden: &[Vec<bool>]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (w, (grid, hid)) in targets.iter().zip(hidden).enumerate() {
        for (c, &h) in hid.iter().enumerate() {
            if h && grid.mask[c] {
                let d = pred.data[w * HOURS_PER_WEEK * N_VARS + c].as_f64() - grid.values[c];
                s += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn check_config(model: &ModelConfig) -> Result<()> {
    if model.tokenizer != TokenizerKind::Tst || model.backbone != BackboneKind::BiMamba2 {
        return Err(Error::config(
            "model",
            "masked reconstruction needs the tst tokenizer and the bimamba2 backbone",
        ));
    }
    Ok(())
}

pub fn init_mae<T: Float>(
    model: &ModelConfig,
    mae: &MaeConfig,
    seed: u64,
) -> Result<ParameterTree<T>> {
    check_config(model)?;
    mae.validate()?;
    let mut p = init_model(model, seed)?;
    let dec = decoder_config(model, mae);
    backbones::init_params_at(&mut p, &dec, "dec")?;
    p.glorot("dec.out_w", model.dim, N_VARS)?;
    p.zeros("dec.out_b", 1, N_VARS)?;
    Ok(p)
}

fn decoder_config(model: &ModelConfig, mae: &MaeConfig) -> backbones::BackboneConfig {
    backbones::BackboneConfig {
        layers: mae.decoder_layers,
        ..model.backbone_config()
    }
}

/// Reconstruction of every cell, `(weeks*168) x 27`.
pub fn reconstruct<T: Float>(
    g: &mut Graph<T>,
    b: &Bound,
    model: &ModelConfig,
    mae: &MaeConfig,
    masked: &[&WeekGrid],
    dropout: &mut Dropout,
) -> Result<Var> {
    let batch = tokenizers::tokenize_batch(g, b, &model.tokenizer_config(), masked, None)?;
    let enc_cfg = model.backbone_config();
    let mut ctx = Ctx::new(&enc_cfg, dropout);
    let enc = backbones::encode(g, b, &mut ctx, &batch)?;
    let dec_cfg = decoder_config(model, mae);
    let mut ctx = Ctx::new(&dec_cfg, dropout).with_prefix("dec");
    let dec_batch = tokenizers::TokenBatch {
        tokens: enc,
        ..batch
    };
    let dec = backbones::encode(g, b, &mut ctx, &dec_batch)?;
    g.linear(dec, b.get("dec.out_w")?, Some(b.get("dec.out_b")?))
}

/// Graph form of [`mae_loss`].
pub fn mae_loss_var<T: Float>(
    g: &mut Graph<T>,
    pred: Var,
    targets: &[&WeekGrid],
    hidden: &[Vec<bool>],
) -> Result<Var> {
    let rows = targets.len() * HOURS_PER_WEEK;
    if g.shape(pred) != (rows, N_VARS) {
        return Err(Error::contract(
            "reconstruction shape does not match targets",
        ));
    }
    let mut target = Matrix::zeros(rows, N_VARS);
    let mut weight = Matrix::zeros(rows, N_VARS);
    let mut n = 0usize;
    for (w, (grid, hid)) in targets.iter().zip(hidden).enumerate() {
        for (c, &h) in hid.iter().enumerate() {
            if h && grid.mask[c] {
                target.data[w * HOURS_PER_WEEK * N_VARS + c] = T::lit(grid.values[c]);
                weight.data[w * HOURS_PER_WEEK * N_VARS + c] = T::one();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Ok(g.constant(Matrix::scalar(T::zero())));
    }
    let inv = T::lit(1.0 / n as f64);
    weight.data.iter_mut().for_each(|v| *v *= inv);
    let t = g.constant(target);
    let d = g.sub(pred, t)?;
    let sq = g.square(d);
    let wsq = g.mul_const(sq, Arc::new(weight))?;
    Ok(g.sum(wsq))
}

/// Masked-reconstruction pretraining; `train.batch_size` weeks per step.
pub fn mae_pretrain(
    weeks: &[WeekGrid],
    model: &ModelConfig,
    mae: &MaeConfig,
    optimizer: &OptimizerConfig,
    train: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<MaeRun> {
    train.validate()?;
    optimizer.validate()?;
    let mut params: ParameterTree<f32> = init_mae(model, mae, seed)?;
    if weeks.is_empty() {
        return Err(Error::contract("no training weeks"));
    }
    let bs = train.batch_size.min(weeks.len());
    let steps_per_epoch = (weeks.len() as u64).div_ceil(bs as u64);
    let schedule = optimizer.schedule(steps_per_epoch);
    let mut state = OptimizerState::new(optimizer.adamw(), &params);
    let mut batch_rng = rng_for(seed, 1);
    let mut mask_rng = rng_for(seed, 2);
    let mut dropout = Dropout::train(rng_for(seed, 3));
    let config_json =
        serde_json::json!({ "model": model, "mae": mae, "optimizer": optimizer, "train": train })
            .to_string();
    let max_steps = train.max_steps.unwrap_or(u64::MAX);
    let mut log = Vec::new();
    let mut step = 0u64;
    'epochs: for epoch in 0..train.epochs {
        for _ in 0..steps_per_epoch {
            if step >= max_steps {
                break 'epochs;
            }
            let lr = schedule.lr_at(step, epoch);
            let picked: Vec<&WeekGrid> = sample(&mut batch_rng, weeks.len(), bs)
                .iter()
                .map(|i| &weeks[i])
                .collect();
            let (masked, hidden): (Vec<WeekGrid>, Vec<Vec<bool>>) = picked
                .iter()
                .map(|w| apply_cell_mask(w, mae, &mut mask_rng))
                .unzip();
            let masked_refs: Vec<&WeekGrid> = masked.iter().collect();
            let cells = hidden
                .iter()
                .zip(&picked)
                .map(|(h, w)| h.iter().zip(&w.mask).filter(|(&a, &b)| a && b).count())
                .sum();
            let (mse, mut grads, ()) = value_and_grad(&params, |g, b| {
                let pred = reconstruct(g, b, model, mae, &masked_refs, &mut dropout)?;
                Ok((mae_loss_var(g, pred, &picked, &hidden)?, ()))
            })?;
            if let Some(c) = optimizer.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adamw_step(&mut params, &grads, &mut state, lr)?;
            if step % 10 == 0 {
                info!("mae step {step} epoch {epoch} lr {lr:.2e} mse {mse:.4}");
            }
            log.push(MaeRecord {
                step,
                epoch,
                lr,
                mse: mse as f64,
                masked_cells: cells,
            });
            step += 1;
        }
        if let Some(dir) = out {
            atomic_write(
                &dir.join("mae.wbmc"),
                &checkpoint::encode(&params, &config_json),
            )?;
            write_jsonl(&dir.join("mae_log.jsonl"), &log)?;
        }
    }
    if let Some(dir) = out {
        atomic_write(
            &dir.join("mae.wbmc"),
            &checkpoint::encode(&params, &config_json),
        )?;
        write_jsonl(&dir.join("mae_log.jsonl"), &log)?;
    }
    Ok(MaeRun { params, log })
}
