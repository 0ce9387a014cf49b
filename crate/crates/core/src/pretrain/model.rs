//! Tokenizer, backbone and projection head composed into one parameter tree.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbones::{self, BackboneConfig, BackboneKind, Ctx, MambaConfig, NormKind};
use crate::nn::{Bound, Dropout, Float, Graph, Matrix, ParameterTree, Var};
use crate::pipeline::WeekGrid;
use crate::tokenizers::{self, TokenizerConfig, TokenizerKind};
use crate::{Error, Result};

pub const HEAD_BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tokenizer: TokenizerKind,
    pub backbone: BackboneKind,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: Option<usize>,
    pub dropout: f64,
    pub norm: NormKind,
    pub tst_hidden: Option<usize>,
    pub mtan_time_dim: usize,
    pub mtan_heads: usize,
    /// Additive hour table on tuple tokens; on for learned positions when
    /// absent.
    pub tuple_time: Option<bool>,
    pub head_dropout: f64,
    pub mamba: MambaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tokenizer: TokenizerKind::Tst,
            backbone: BackboneKind::BiMamba2,
            dim: 64,
            layers: 4,
            heads: 8,
            ff_dim: None,
            dropout: 0.0,
            norm: NormKind::LayerNorm,
            tst_hidden: None,
            mtan_time_dim: 16,
            mtan_heads: 1,
            tuple_time: None,
            head_dropout: 0.3,
            mamba: MambaConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig {
            kind: self.tokenizer,
            tst_hidden: self.tst_hidden,
            mtan_time_dim: self.mtan_time_dim,
            mtan_heads: self.mtan_heads,
            add_time: self.tokenizer == TokenizerKind::Tuple
                && self
                    .tuple_time
                    .unwrap_or(self.backbone == BackboneKind::LearnedPos),
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            kind: self.backbone,
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
            norm: self.norm,
            mamba: self.mamba.clone(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer_config().validate()?;
        self.backbone_config().validate()?;
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::config("model.head_dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Fresh parameters (`tok.*`, `bb.*`, `head.*`) for `cfg`.
pub fn init_model<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<ParameterTree<T>> {
    cfg.validate()?;
    let mut p = ParameterTree::new(seed);
    let d = cfg.dim;
    tokenizers::init_params(&mut p, &cfg.tokenizer_config(), d)?;
    backbones::init_params(&mut p, &cfg.backbone_config())?;
    p.glorot("head.w1", d, 4 * d)?;
    p.zeros("head.b1", 1, 4 * d)?;
    p.ones("head.bn.g", 1, 4 * d)?;
    p.zeros("head.bn.b", 1, 4 * d)?;
    p.insert_buffer("head.bn.mean", Matrix::zeros(1, 4 * d))?;
    p.insert_buffer("head.bn.var", Matrix::filled(1, 4 * d, T::one()))?;
    p.glorot("head.w2", 4 * d, d)?;
    p.zeros("head.b2", 1, d)?;
    Ok(p)
}

/// Checks that `params` has exactly the tensors `cfg` would create.
pub fn check_compatible<T: Float>(cfg: &ModelConfig, params: &ParameterTree<T>) -> Result<()> {
    let expected = init_model::<T>(cfg, 0)?.manifest();
    let got = params.manifest();
    if expected != got {
        let missing: Vec<String> = expected
            .iter()
            .filter(|e| !got.contains(e))
            .chain(got.iter().filter(|g| !expected.contains(g)))
            .map(|(n, (r, c), _)| format!("{n} ({r}x{c})"))
            .take(5)
            .collect();
        return Err(Error::contract(format!(
            "checkpoint does not match model configuration: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

/// Pooled backbone outputs `r` for a batch of normalized weeks.
pub fn embed_batch<T: Float>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    weeks: &[&WeekGrid],
    keep: Option<&[Vec<usize>]>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let batch = tokenizers::tokenize_batch(g, b, &cfg.tokenizer_config(), weeks, keep)?;
    if let Some(i) = (0..batch.segs.count()).find(|&i| batch.segs.len_of(i) == 0) {
        let w = weeks[i];
        return Err(Error::contract(format!(
            "week ({}, {}) produced no tokens",
            w.subject_id, w.week_index
        )));
    }
    let bcfg = cfg.backbone_config();
    let mut ctx = Ctx::new(&bcfg, dropout);
    let out = backbones::encode(g, b, &mut ctx, &batch)?;
    backbones::pool(g, out, &batch.segs)
}

/// Training-mode projection head; also returns the batch statistics of the
/// normalized layer for the running-average update.
pub fn project_train<T: Float>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    r: Var,
    dropout: &mut Dropout,
) -> Result<(Var, Vec<T>, Vec<T>)> {
    let h = g.linear(r, b.get("head.w1")?, Some(b.get("head.b1")?))?;
    let (h, mean, var) =
        g.batch_norm(h, b.get("head.bn.g")?, b.get("head.bn.b")?, T::lit(BN_EPS))?;
    let h = g.swish(h);
    let h = dropout.apply(g, h, cfg.head_dropout)?;
    let out = g.linear(h, b.get("head.w2")?, Some(b.get("head.b2")?))?;
    Ok((out, mean, var))
}

/// Projection head with frozen running statistics and no dropout.
pub fn project_eval<T: Float>(
    g: &mut Graph<T>,
    b: &Bound,
    params: &ParameterTree<T>,
    r: Var,
) -> Result<Var> {
    let h = g.linear(r, b.get("head.w1")?, Some(b.get("head.b1")?))?;
    let mean = params.get("head.bn.mean")?;
    let var = params.get("head.bn.var")?;
    let shift = g.constant(Matrix::from_vec(
        1,
        mean.cols,
        mean.data.iter().map(|&m| -m).collect(),
    ));
    let inv = g.constant(Matrix::from_vec(
        1,
        var.cols,
        var.data
            .iter()
            .map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt())
            .collect(),
    ));
    let h = g.add_row(h, shift)?;
    let h = g.mul_row(h, inv)?;
    let h = g.mul_row(h, b.get("head.bn.g")?)?;
    let h = g.add_row(h, b.get("head.bn.b")?)?;
    let h = g.swish(h);
    g.linear(h, b.get("head.w2")?, Some(b.get("head.b2")?))
}

/// Exponential running-average update of the head's batch-norm buffers;
/// the variance uses the unbiased batch estimate.
pub fn update_running_stats<T: Float>(
    params: &mut ParameterTree<T>,
    mean: &[T],
    var: &[T],
    rows: usize,
) -> Result<()> {
    let m = T::lit(HEAD_BN_MOMENTUM);
    let unbias = T::lit(rows as f64 / (rows as f64 - 1.0).max(1.0));
    let rm = params.get_mut("head.bn.mean")?;
    for (r, &b) in rm.data.iter_mut().zip(mean) {
        *r = (T::one() - m) * *r + m * b;
    }
    let rv = params.get_mut("head.bn.var")?;
    for (r, &b) in rv.data.iter_mut().zip(var) {
        *r = (T::one() - m) * *r + m * b * unbias;
    }
    Ok(())
}

/// Row selection helper: first and second half of a stacked `2N x D` batch.
pub fn split_views<T: Float>(g: &mut Graph<T>, h: Var, n: usize) -> Result<(Var, Var)> {
    let a = g.gather_rows(h, Arc::new((0..n).collect()))?;
    let c = g.gather_rows(h, Arc::new((n..2 * n).collect()))?;
    Ok((a, c))
}

/// Deterministic week embeddings (no dropout, no augmentation).
pub fn embed_weeks<T: Float>(
    params: &ParameterTree<T>,
    cfg: &ModelConfig,
    weeks: &[&WeekGrid],
) -> Result<Matrix<T>> {
    let mut g = Graph::no_grad();
    let b = params.bind(&mut g);
    let mut d = Dropout::eval();
    let r = embed_batch(&mut g, &b, cfg, weeks, None, &mut d)?;
    Ok(g.value(r).clone())
}
