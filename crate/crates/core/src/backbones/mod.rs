//! Sequence encoders: pre-norm transformers with learned or rotary
//! positions, and a bidirectional selective state-space stack.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::nn::{Bound, Dropout, Float, Graph, Matrix, ParameterTree, Segments, Var};
use crate::pipeline::HOURS_PER_WEEK;
use crate::tokenizers::{TokenBatch, TokenSequence};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    LearnedPos,
    Rotary,
    #[serde(rename = "bimamba2")]
    BiMamba2,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [
        BackboneKind::LearnedPos,
        BackboneKind::Rotary,
        BackboneKind::BiMamba2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::LearnedPos => "learned_pos",
            BackboneKind::Rotary => "rotary",
            BackboneKind::BiMamba2 => "bimamba2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MambaConfig {
    pub state: usize,
    pub head_dim: usize,
    pub expand: usize,
    pub conv: usize,
    pub chunk: usize,
}

impl Default for MambaConfig {
    fn default() -> Self {
        MambaConfig {
            state: 16,
            head_dim: 32,
            expand: 2,
            conv: 4,
            chunk: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Total layers; the bidirectional stack splits them evenly between
    /// directions.
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Gated-MLP width; `4 * dim` when absent.
    pub ff_dim: Option<usize>,
    pub dropout: f64,
    pub norm: NormKind,
    pub rope_base: f64,
    pub mamba: MambaConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::BiMamba2,
            layers: 4,
            dim: 64,
            heads: 8,
            ff_dim: None,
            dropout: 0.0,
            norm: NormKind::LayerNorm,
            rope_base: 10_000.0,
            mamba: MambaConfig::default(),
        }
    }
}

const NORM_EPS: f64 = 1e-5;

impl BackboneConfig {
    pub fn ff(&self) -> usize {
        self.ff_dim.unwrap_or(4 * self.dim)
    }

    fn inner(&self) -> usize {
        self.mamba.expand * self.dim
    }

    fn mamba_heads(&self) -> usize {
        self.inner() / self.mamba.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("model.dim", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        match self.kind {
            BackboneKind::LearnedPos | BackboneKind::Rotary => {
                if self.heads == 0 || self.dim % self.heads != 0 {
                    return Err(Error::config(
                        "model.heads",
                        format!("must divide dim {}", self.dim),
                    ));
                }
                if self.kind == BackboneKind::Rotary && (self.dim / self.heads) % 2 != 0 {
                    return Err(Error::config(
                        "model.heads",
                        "rotary head width must be even",
                    ));
                }
                if self.ff() == 0 {
                    return Err(Error::config("model.ff_dim", "must be positive"));
                }
            }
            BackboneKind::BiMamba2 => {
                let m = &self.mamba;
                if self.layers % 2 != 0 {
                    return Err(Error::config(
                        "model.layers",
                        "must be even for the bidirectional stack",
                    ));
                }
                if m.state == 0 || m.conv == 0 || m.chunk == 0 || m.expand == 0 {
                    return Err(Error::config(
                        "model.mamba",
                        "state, conv, chunk and expand must be positive",
                    ));
                }
                if m.head_dim == 0 || self.inner() % m.head_dim != 0 {
                    return Err(Error::config(
                        "model.mamba.head_dim",
                        format!("must divide expand * dim = {}", self.inner()),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn inv_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

fn init_norm<T: Float>(
    p: &mut ParameterTree<T>,
    kind: NormKind,
    prefix: &str,
    dim: usize,
) -> Result<()> {
    p.ones(&format!("{prefix}.g"), 1, dim)?;
    if kind == NormKind::LayerNorm {
        p.zeros(&format!("{prefix}.b"), 1, dim)?;
    }
    Ok(())
}

fn norm<T: Float>(
    g: &mut Graph<T>,
    b: &Bound,
    kind: NormKind,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gain = b.get(&format!("{prefix}.g"))?;
    match kind {
        NormKind::LayerNorm => {
            let bias = b.get(&format!("{prefix}.b"))?;
            g.layer_norm(x, gain, bias, T::lit(NORM_EPS))
        }
        NormKind::RmsNorm => g.rms_norm(x, gain, T::lit(NORM_EPS)),
    }
}

pub fn init_params<T: Float>(p: &mut ParameterTree<T>, cfg: &BackboneConfig) -> Result<()> {
    init_params_at(p, cfg, "bb")
}

pub fn init_params_at<T: Float>(
    p: &mut ParameterTree<T>,
    cfg: &BackboneConfig,
    ns: &str,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    match cfg.kind {
        BackboneKind::LearnedPos | BackboneKind::Rotary => {
            if cfg.kind == BackboneKind::LearnedPos {
                p.normal(&format!("{ns}.pos"), HOURS_PER_WEEK, d, 0.1)?;
            }
            for l in 0..cfg.layers {
                let pre = format!("{ns}.l{l}");
                init_norm(p, cfg.norm, &format!("{pre}.n1"), d)?;
                for w in ["wq", "wk", "wv", "wo"] {
                    p.glorot(&format!("{pre}.{w}"), d, d)?;
                }
                init_norm(p, cfg.norm, &format!("{pre}.n2"), d)?;
                p.glorot(&format!("{pre}.w1"), d, cfg.ff())?;
                p.glorot(&format!("{pre}.w3"), d, cfg.ff())?;
                p.glorot(&format!("{pre}.w2"), cfg.ff(), d)?;
            }
        }
        BackboneKind::BiMamba2 => {
            for dir in ["f", "b"] {
                for l in 0..cfg.layers / 2 {
                    init_mamba_layer(p, cfg, &format!("{ns}.{dir}{l}"))?;
                }
            }
            p.glorot(&format!("{ns}.mix.w1"), 2 * d, 4 * d)?;
            p.zeros(&format!("{ns}.mix.b1"), 1, 4 * d)?;
            p.glorot(&format!("{ns}.mix.w2"), 4 * d, d)?;
            p.zeros(&format!("{ns}.mix.b2"), 1, d)?;
        }
    }
    Ok(())
}

fn init_mamba_layer<T: Float>(
    p: &mut ParameterTree<T>,
    cfg: &BackboneConfig,
    pre: &str,
) -> Result<()> {
    let (d, di, n, hm) = (cfg.dim, cfg.inner(), cfg.mamba.state, cfg.mamba_heads());
    let conv_ch = di + 2 * n;
    init_norm(p, cfg.norm, &format!("{pre}.norm"), d)?;
    p.glorot(&format!("{pre}.in_w"), d, di + conv_ch + hm)?;
    let bound = 1.0 / (cfg.mamba.conv as f64).sqrt();
    let w = p.draw_uniform(
        &format!("{pre}.conv_w"),
        cfg.mamba.conv,
        conv_ch,
        -bound,
        bound,
    );
    p.insert(format!("{pre}.conv_w"), w.cast())?;
    p.zeros(&format!("{pre}.conv_b"), 1, conv_ch)?;
    let a = p.draw_uniform(&format!("{pre}.a"), 1, hm, 1.0, 16.0);
    p.insert(
        format!("{pre}.a"),
        Matrix::from_vec(
            1,
            hm,
            a.data.iter().map(|&v| T::lit(inv_softplus(v))).collect(),
        ),
    )?;
    let u = p.draw_uniform(&format!("{pre}.dt_bias"), 1, hm, 0.0, 1.0);
    let (lo, hi) = (1e-3f64.ln(), 0.1f64.ln());
    let dt_bias = u
        .data
        .iter()
        .map(|&v| T::lit(inv_softplus((lo + v * (hi - lo)).exp())))
        .collect();
    p.insert(format!("{pre}.dt_bias"), Matrix::from_vec(1, hm, dt_bias))?;
    p.ones(&format!("{pre}.d_skip"), 1, di)?;
    p.ones(&format!("{pre}.out_norm.g"), 1, di)?;
    p.glorot(&format!("{pre}.out_w"), di, d)
}

/// Encoder state shared by one forward pass.
pub struct Ctx<'a> {
    pub cfg: &'a BackboneConfig,
    pub dropout: &'a mut Dropout,
    /// Parameter namespace, `bb` unless overridden.
    pub prefix: &'a str,
}

impl<'a> Ctx<'a> {
    pub fn new(cfg: &'a BackboneConfig, dropout: &'a mut Dropout) -> Self {
        Ctx {
            cfg,
            dropout,
            prefix: "bb",
        }
    }

    pub fn with_prefix(mut self, prefix: &'a str) -> Self {
        self.prefix = prefix;
        self
    }
}

fn attention_block<T: Float>(
    g: &mut Graph<T>,
    b: &Bound,
    ctx: &mut Ctx,
    l: usize,
    x: Var,
    segs: &Arc<Segments>,
    positions: Option<&Arc<Vec<f64>>>,
) -> Result<Var> {
    let cfg = ctx.cfg;
    let pre = format!("{}.l{l}", ctx.prefix);
    let h = norm(g, b, cfg.norm, &format!("{pre}.n1"), x)?;
    let mut q = g.matmul(h, b.get(&format!("{pre}.wq"))?)?;
    let mut k = g.matmul(h, b.get(&format!("{pre}.wk"))?)?;
    let v = g.matmul(h, b.get(&format!("{pre}.wv"))?)?;
    if let Some(pos) = positions {
        let hd = cfg.dim / cfg.heads;
        q = g.rope(q, pos.clone(), hd, cfg.rope_base)?;
        k = g.rope(k, pos.clone(), hd, cfg.rope_base)?;
    }
    let a = g.attention(q, k, v, cfg.heads, false, segs.clone())?;
    let a = g.matmul(a, b.get(&format!("{pre}.wo"))?)?;
    let a = ctx.dropout.apply(g, a, cfg.dropout)?;
    let x = g.add(x, a)?;

    let h = norm(g, b, cfg.norm, &format!("{pre}.n2"), x)?;
    let gate = g.matmul(h, b.get(&format!("{pre}.w1"))?)?;
    let gate = g.swish(gate);
    let up = g.matmul(h, b.get(&format!("{pre}.w3"))?)?;
    let m = g.mul(gate, up)?;
    let m = g.matmul(m, b.get(&format!("{pre}.w2"))?)?;
    let m = ctx.dropout.apply(g, m, cfg.dropout)?;
    g.add(x, m)
}

fn mamba_layer<T: Float>(
    g: &mut Graph<T>,
    b: &Bound,
    ctx: &mut Ctx,
    pre: &str,
    x: Var,
    segs: &Arc<Segments>,
) -> Result<Var> {
    let cfg = ctx.cfg;
    let (di, n, hm) = (cfg.inner(), cfg.mamba.state, cfg.mamba_heads());
    let conv_ch = di + 2 * n;
    let h = norm(g, b, cfg.norm, &format!("{pre}.norm"), x)?;
    let proj = g.matmul(h, b.get(&format!("{pre}.in_w"))?)?;
    let z = g.slice_cols(proj, 0, di)?;
    let xbc = g.slice_cols(proj, di, conv_ch)?;
    let dt_raw = g.slice_cols(proj, di + conv_ch, hm)?;
    let xbc = g.causal_conv(
        xbc,
        b.get(&format!("{pre}.conv_w"))?,
        b.get(&format!("{pre}.conv_b"))?,
        segs.clone(),
    )?;
    let xbc = g.swish(xbc);
    let xs = g.slice_cols(xbc, 0, di)?;
    let bs = g.slice_cols(xbc, di, n)?;
    let cs = g.slice_cols(xbc, di + n, n)?;
    let dt = g.add_row(dt_raw, b.get(&format!("{pre}.dt_bias"))?)?;
    let dt = g.softplus(dt);
    let a = g.softplus(b.get(&format!("{pre}.a"))?);
    let y = g.ssd_scan(
        xs,
        dt,
        a,
        bs,
        cs,
        cfg.mamba.head_dim,
        cfg.mamba.chunk,
        segs.clone(),
    )?;
    let skip = g.mul_row(xs, b.get(&format!("{pre}.d_skip"))?)?;
    let y = g.add(y, skip)?;
    let gate = g.swish(z);
    let y = g.mul(y, gate)?;
    let y = g.rms_norm(y, b.get(&format!("{pre}.out_norm.g"))?, T::lit(NORM_EPS))?;
    let y = g.matmul(y, b.get(&format!("{pre}.out_w"))?)?;
    let y = ctx.dropout.apply(g, y, cfg.dropout)?;
    g.add(x, y)
}

/// Runs one direction's stack (`'f'` or `'b'`) in the given token order.
pub fn run_stack<T: Float>(
    g: &mut Graph<T>,
    b: &Bound,
    ctx: &mut Ctx,
    dir: char,
    x: Var,
    segs: &Arc<Segments>,
) -> Result<Var> {
    let mut h = x;
    for l in 0..ctx.cfg.layers / 2 {
        h = mamba_layer(g, b, ctx, &format!("{}.{dir}{l}", ctx.prefix), h, segs)?;
    }
    Ok(h)
}

/// Forward-stack output next to the re-reversed backward-stack output,
/// before the mixing projection.
pub fn bimamba_concat<T: Float>(
    g: &mut Graph<T>,
    b: &Bound,
    ctx: &mut Ctx,
    x: Var,
    segs: &Arc<Segments>,
) -> Result<Var> {
    let fwd = run_stack(g, b, ctx, 'f', x, segs)?;
    let xr = g.reverse_segments(x, segs)?;
    let bwd = run_stack(g, b, ctx, 'b', xr, segs)?;
    let bwd = g.reverse_segments(bwd, segs)?;
    g.concat_cols(&[fwd, bwd])
}

fn check_positions(hours: &[usize]) -> Result<()> {
    if let Some(h) = hours.iter().find(|&&h| h >= HOURS_PER_WEEK) {
        return Err(Error::contract(format!(
            "position {h} outside 0..{HOURS_PER_WEEK}"
        )));
    }
    Ok(())
}

/// Per-token outputs for a packed token batch.
pub fn encode<T: Float>(
    g: &mut Graph<T>,
    b: &Bound,
    ctx: &mut Ctx,
    batch: &TokenBatch,
) -> Result<Var> {
    let cfg = ctx.cfg;
    let segs = &batch.segs;
    let (rows, width) = g.shape(batch.tokens);
    if width != cfg.dim || rows != segs.total() || batch.hours.len() != rows {
        return Err(Error::contract(
            "token batch does not match backbone width or segments",
        ));
    }
    match cfg.kind {
        BackboneKind::LearnedPos => {
            check_positions(&batch.hours)?;
            let mut x = batch.tokens;
            if !batch.time_embedded {
                let pos =
                    g.gather_rows(b.get(&format!("{}.pos", ctx.prefix))?, batch.hours.clone())?;
                x = g.add(x, pos)?;
            }
            for l in 0..cfg.layers {
                x = attention_block(g, b, ctx, l, x, segs, None)?;
            }
            Ok(x)
        }
        BackboneKind::Rotary => {
            check_positions(&batch.hours)?;
            let pos = Arc::new(batch.hours.iter().map(|&h| h as f64).collect::<Vec<_>>());
            let mut x = batch.tokens;
            for l in 0..cfg.layers {
                x = attention_block(g, b, ctx, l, x, segs, Some(&pos))?;
            }
            Ok(x)
        }
        BackboneKind::BiMamba2 => {
            let cat = bimamba_concat(g, b, ctx, batch.tokens, segs)?;
            let h = g.linear(
                cat,
                b.get(&format!("{}.mix.w1", ctx.prefix))?,
                Some(b.get(&format!("{}.mix.b1", ctx.prefix))?),
            )?;
            let h = g.swish(h);
            g.linear(
                h,
                b.get(&format!("{}.mix.w2", ctx.prefix))?,
                Some(b.get(&format!("{}.mix.b2", ctx.prefix))?),
            )
        }
    }
}

/// Mean over each segment; fails on empty segments.
pub fn pool<T: Float>(g: &mut Graph<T>, out: Var, segs: &Arc<Segments>) -> Result<Var> {
    g.mean_segments(out, segs.clone())
}

/// Encodes one token sequence without dropout.
pub fn encode_sequence<T: Float>(
    tokens: &TokenSequence<T>,
    params: &ParameterTree<T>,
    cfg: &BackboneConfig,
) -> Result<Matrix<T>> {
    let mut g = Graph::no_grad();
    let b = params.bind(&mut g);
    let batch = TokenBatch {
        tokens: g.constant(tokens.tokens.clone()),
        segs: Arc::new(Segments::single(tokens.len())),
        hours: Arc::new(tokens.positions.iter().map(|&p| p as usize).collect()),
        variable_ids: None,
        time_embedded: false,
    };
    if tokens.is_empty() {
        return Err(Error::contract("cannot encode an empty token sequence"));
    }
    let mut dropout = Dropout::eval();
    let mut ctx = Ctx::new(cfg, &mut dropout);
    let out = encode(&mut g, &b, &mut ctx, &batch)?;
    Ok(g.value(out).clone())
}

/// Arithmetic mean of the rows of `outputs`.
pub fn pool_mean<T: Float>(outputs: &Matrix<T>) -> Result<Vec<T>> {
    if outputs.rows == 0 {
        return Err(Error::contract("cannot pool an empty sequence"));
    }
    let mut acc = vec![T::zero(); outputs.cols];
    for r in 0..outputs.rows {
        for (a, &v) in acc.iter_mut().zip(outputs.row(r)) {
            *a += v;
        }
    }
    let n = T::lit(outputs.rows as f64);
    Ok(acc.into_iter().map(|a| a / n).collect())
}
