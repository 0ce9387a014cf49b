//! Week-to-token maps: per-hour patches (TST), masked time-attention
//! interpolation (mTAN) and one token per observation (tuple).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::nn::{Bound, Float, Graph, Matrix, ParameterTree, Segments, Var};
use crate::pipeline::{
    to_dense_features, to_tuple_stream, WeekGrid, DENSE_WIDTH, HOURS_PER_WEEK, N_VARS,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    Tst,
    Mtan,
    Tuple,
}

impl TokenizerKind {
    pub const ALL: [TokenizerKind; 3] = [
        TokenizerKind::Tst,
        TokenizerKind::Mtan,
        TokenizerKind::Tuple,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerKind::Tst => "tst",
            TokenizerKind::Mtan => "mtan",
            TokenizerKind::Tuple => "tuple",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub kind: TokenizerKind,
    /// Hidden width of the TST patch perceptron; `2 * dim` when absent.
    pub tst_hidden: Option<usize>,
    pub mtan_time_dim: usize,
    pub mtan_heads: usize,
    /// Add the learned hour table to tuple tokens.
    pub add_time: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            kind: TokenizerKind::Tst,
            tst_hidden: None,
            mtan_time_dim: 16,
            mtan_heads: 1,
            add_time: false,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mtan_time_dim == 0 {
            return Err(Error::config("model.mtan_time_dim", "must be positive"));
        }
        if self.mtan_heads == 0 {
            return Err(Error::config("model.mtan_heads", "must be positive"));
        }
        if self.tst_hidden == Some(0) {
            return Err(Error::config("model.tst_hidden", "must be positive"));
        }
        Ok(())
    }
}

/// Tokens of one week.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T: Float = f32> {
    pub tokens: Matrix<T>,
    /// Hour of week per token.
    pub positions: Vec<u16>,
    /// Variable per token (tuple tokens only).
    pub variable_ids: Option<Vec<u16>>,
}

impl<T: Float> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Tokens of a batch of weeks packed row-wise on a tape.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Var,
    pub segs: Arc<Segments>,
    pub hours: Arc<Vec<usize>>,
    pub variable_ids: Option<Arc<Vec<u16>>>,
    /// Whether an additive hour embedding is already included.
    pub time_embedded: bool,
}

/// Tokens a week produces before augmentation.
pub fn token_count(kind: TokenizerKind, grid: &WeekGrid) -> usize {
    match kind {
        TokenizerKind::Tst | TokenizerKind::Mtan => HOURS_PER_WEEK,
        TokenizerKind::Tuple => grid.observed_count(),
    }
}

pub fn init_params<T: Float>(
    p: &mut ParameterTree<T>,
    cfg: &TokenizerConfig,
    dim: usize,
) -> Result<()> {
    cfg.validate()?;
    match cfg.kind {
        TokenizerKind::Tst => {
            let hidden = cfg.tst_hidden.unwrap_or(2 * dim);
            p.glorot("tok.w1", DENSE_WIDTH, hidden)?;
            p.zeros("tok.b1", 1, hidden)?;
            p.glorot("tok.w2", hidden, dim)?;
            p.zeros("tok.b2", 1, dim)?;
        }
        TokenizerKind::Mtan => {
            let dt = cfg.mtan_time_dim;
            p.normal("tok.time", HOURS_PER_WEEK, dt, 1.0)?;
            for h in 0..cfg.mtan_heads {
                p.glorot(&format!("tok.h{h}.wq"), dt, dt)?;
                p.glorot(&format!("tok.h{h}.wk"), dt, dt)?;
            }
            p.glorot("tok.proj_w", N_VARS * cfg.mtan_heads, dim)?;
            p.zeros("tok.proj_b", 1, dim)?;
        }
        TokenizerKind::Tuple => {
            p.normal("tok.var", N_VARS, dim, 0.5)?;
            p.glorot("tok.x_w1", 1, dim)?;
            p.zeros("tok.x_b1", 1, dim)?;
            p.glorot("tok.x_w2", dim, dim)?;
            p.zeros("tok.x_b2", 1, dim)?;
            if cfg.add_time {
                p.normal("tok.time", HOURS_PER_WEEK, dim, 0.1)?;
            }
        }
    }
    Ok(())
}

/// Patch perceptron over packed `rows x 54` dense rows.
pub fn tst_forward<T: Float>(g: &mut Graph<T>, b: &Bound, dense: Matrix<T>) -> Result<Var> {
    if dense.cols != DENSE_WIDTH {
        return Err(Error::contract(format!(
            "TST input must have {DENSE_WIDTH} columns, got {}",
            dense.cols
        )));
    }
    let x = g.constant(dense);
    let h = g.linear(x, b.get("tok.w1")?, Some(b.get("tok.b1")?))?;
    let h = g.swish(h);
    g.linear(h, b.get("tok.w2")?, Some(b.get("tok.b2")?))
}

/// Attention scores `(T Wq)(T Wk)^T / d_T` of one mTAN head.
pub fn mtan_scores<T: Float>(g: &mut Graph<T>, b: &Bound, head: usize) -> Result<Var> {
    let time = b.get("tok.time")?;
    let dt = g.shape(time).1;
    let q = g.matmul(time, b.get(&format!("tok.h{head}.wq"))?)?;
    let k = g.matmul(time, b.get(&format!("tok.h{head}.wk"))?)?;
    let s = g.matmul_nt(q, k)?;
    Ok(g.scale(s, T::one() / T::lit(dt as f64)))
}

/// Interpolated channels for stacked `(weeks*168) x 27` values and masks,
/// projected to the model width.
pub fn mtan_forward<T: Float>(
    g: &mut Graph<T>,
    b: &Bound,
    heads: usize,
    values: Arc<Matrix<f64>>,
    mask: Arc<Matrix<f64>>,
) -> Result<Var> {
    let mut channels = Vec::with_capacity(heads);
    for h in 0..heads {
        let s = mtan_scores(g, b, h)?;
        channels.push(g.masked_interp(s, values.clone(), mask.clone())?);
    }
    let x = if channels.len() == 1 {
        channels[0]
    } else {
        g.concat_cols(&channels)?
    };
    g.linear(x, b.get("tok.proj_w")?, Some(b.get("tok.proj_b")?))
}

/// `phi_v(v) + phi_x(x) (+ phi_t(t))` for packed observations.
pub fn tuple_forward<T: Float>(
    g: &mut Graph<T>,
    b: &Bound,
    hours: &[usize],
    vars: &[u16],
    values: &[f64],
    add_time: bool,
) -> Result<Var> {
    if vars.iter().any(|&v| v as usize >= N_VARS) {
        return Err(Error::contract("tuple variable id out of range"));
    }
    let x = g.constant(Matrix::from_vec(
        values.len(),
        1,
        values.iter().map(|&v| T::lit(v)).collect(),
    ));
    let h = g.linear(x, b.get("tok.x_w1")?, Some(b.get("tok.x_b1")?))?;
    let h = g.swish(h);
    let phi_x = g.linear(h, b.get("tok.x_w2")?, Some(b.get("tok.x_b2")?))?;
    let phi_v = g.gather_rows(
        b.get("tok.var")?,
        Arc::new(vars.iter().map(|&v| v as usize).collect()),
    )?;
    let mut tok = g.add(phi_v, phi_x)?;
    if add_time {
        let phi_t = g.gather_rows(b.get("tok.time")?, Arc::new(hours.to_vec()))?;
        tok = g.add(tok, phi_t)?;
    }
    Ok(tok)
}

/// Tokenizes a batch of normalized weeks. `keep[i]`, when given, lists the
/// surviving token indices of week `i` in ascending order.
pub fn tokenize_batch<T: Float>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &TokenizerConfig,
    weeks: &[&WeekGrid],
    keep: Option<&[Vec<usize>]>,
) -> Result<TokenBatch> {
    if let Some(k) = keep {
        if k.len() != weeks.len() {
            return Err(Error::contract("token selection does not match batch size"));
        }
    }
    let default_keep = |i: usize, n: usize| -> Vec<usize> {
        match keep {
            Some(k) => k[i].clone(),
            None => (0..n).collect(),
        }
    };
    let mut lengths = Vec::with_capacity(weeks.len());
    let mut hours = Vec::new();
    match cfg.kind {
        TokenizerKind::Tst => {
            let mut data = Vec::new();
            for (i, w) in weeks.iter().enumerate() {
                let dense = to_dense_features(w);
                let idx = default_keep(i, HOURS_PER_WEEK);
                for &h in &idx {
                    data.extend(dense.row(h).iter().map(|&v| T::lit(v)));
                }
                hours.extend(idx.iter().copied());
                lengths.push(idx.len());
            }
            let rows = hours.len();
            let tokens = tst_forward(g, b, Matrix::from_vec(rows, DENSE_WIDTH, data))?;
            Ok(TokenBatch {
                tokens,
                segs: Arc::new(Segments::from_lengths(&lengths)),
                hours: Arc::new(hours),
                variable_ids: None,
                time_embedded: false,
            })
        }
        TokenizerKind::Mtan => {
            let n = weeks.len() * HOURS_PER_WEEK;
            let mut values = Matrix::zeros(n, N_VARS);
            let mut mask = Matrix::zeros(n, N_VARS);
            for (i, w) in weeks.iter().enumerate() {
                for c in 0..HOURS_PER_WEEK * N_VARS {
                    if w.mask[c] {
                        values.data[i * HOURS_PER_WEEK * N_VARS + c] = w.values[c];
                        mask.data[i * HOURS_PER_WEEK * N_VARS + c] = 1.0;
                    }
                }
            }
            let full = mtan_forward(g, b, cfg.mtan_heads, Arc::new(values), Arc::new(mask))?;
            let mut rows = Vec::new();
            for i in 0..weeks.len() {
                let idx = default_keep(i, HOURS_PER_WEEK);
                rows.extend(idx.iter().map(|&h| i * HOURS_PER_WEEK + h));
                hours.extend(idx.iter().copied());
                lengths.push(idx.len());
            }
            let tokens = if keep.is_some() {
                g.gather_rows(full, Arc::new(rows))?
            } else {
                full
            };
            Ok(TokenBatch {
                tokens,
                segs: Arc::new(Segments::from_lengths(&lengths)),
                hours: Arc::new(hours),
                variable_ids: None,
                time_embedded: false,
            })
        }
        TokenizerKind::Tuple => {
            let mut vars = Vec::new();
            let mut vals = Vec::new();
            for (i, w) in weeks.iter().enumerate() {
                let stream = to_tuple_stream(w);
                let idx = default_keep(i, stream.len());
                for &j in &idx {
                    let t = stream
                        .get(j)
                        .ok_or_else(|| Error::contract("token index beyond tuple stream"))?;
                    hours.push(t.hour as usize);
                    vars.push(t.variable_id);
                    vals.push(t.value);
                }
                lengths.push(idx.len());
            }
            let tokens = tuple_forward(g, b, &hours, &vars, &vals, cfg.add_time)?;
            Ok(TokenBatch {
                tokens,
                segs: Arc::new(Segments::from_lengths(&lengths)),
                hours: Arc::new(hours),
                variable_ids: Some(Arc::new(vars)),
                time_embedded: cfg.add_time,
            })
        }
    }
}

fn to_sequence<T: Float>(g: &Graph<T>, batch: &TokenBatch) -> TokenSequence<T> {
    TokenSequence {
        tokens: g.value(batch.tokens).clone(),
        positions: batch.hours.iter().map(|&h| h as u16).collect(),
        variable_ids: batch.variable_ids.as_ref().map(|v| v.to_vec()),
    }
}

/// One week through the TST tokenizer; `dense` is the `168 x 54` matrix.
pub fn tokenize_tst<T: Float>(
    dense: &Matrix<f64>,
    params: &ParameterTree<T>,
) -> Result<TokenSequence<T>> {
    let mut g = Graph::no_grad();
    let b = params.bind(&mut g);
    if dense.rows != HOURS_PER_WEEK {
        return Err(Error::contract(format!(
            "TST input must have {HOURS_PER_WEEK} rows"
        )));
    }
    let tokens = tst_forward(&mut g, &b, dense.cast())?;
    Ok(TokenSequence {
        tokens: g.value(tokens).clone(),
        positions: (0..HOURS_PER_WEEK as u16).collect(),
        variable_ids: None,
    })
}

pub fn tokenize_mtan<T: Float>(
    grid: &WeekGrid,
    params: &ParameterTree<T>,
    heads: usize,
) -> Result<TokenSequence<T>> {
    let mut g = Graph::no_grad();
    let b = params.bind(&mut g);
    let cfg = TokenizerConfig {
        kind: TokenizerKind::Mtan,
        mtan_heads: heads,
        ..Default::default()
    };
    let batch = tokenize_batch(&mut g, &b, &cfg, &[grid], None)?;
    Ok(to_sequence(&g, &batch))
}

pub fn tokenize_tuple<T: Float>(
    grid: &WeekGrid,
    params: &ParameterTree<T>,
    add_time: bool,
) -> Result<TokenSequence<T>> {
    let mut g = Graph::no_grad();
    let b = params.bind(&mut g);
    let cfg = TokenizerConfig {
        kind: TokenizerKind::Tuple,
        add_time,
        ..Default::default()
    };
    let batch = tokenize_batch(&mut g, &b, &cfg, &[grid], None)?;
    Ok(to_sequence(&g, &batch))
}

/// Attention weights of one mTAN head for one variable: row `q` holds the
/// softmax over hours where the variable is observed (all zero when it is
/// never observed).
pub fn mtan_attention<T: Float>(
    params: &ParameterTree<T>,
    head: usize,
    mask_column: &[bool],
) -> Result<Matrix<f64>> {
    let mut g = Graph::no_grad();
    let b = params.bind(&mut g);
    let s = mtan_scores(&mut g, &b, head)?;
    let s = g.value(s);
    let n = s.cols;
    let mut out = Matrix::zeros(s.rows, n);
    if !mask_column.iter().any(|&m| m) {
        return Ok(out);
    }
    for q in 0..s.rows {
        let mx = (0..n)
            .filter(|&k| mask_column[k])
            .map(|k| s.at(q, k).as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in (0..n).filter(|&k| mask_column[k]) {
            let e = (s.at(q, k).as_f64() - mx).exp();
            out.set(q, k, e);
            z += e;
        }
        out.row_mut(q).iter_mut().for_each(|v| *v /= z);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(kind: TokenizerKind, dim: usize, add_time: bool) -> ParameterTree<f64> {
        let mut p = ParameterTree::new(11);
        let cfg = TokenizerConfig {
            kind,
            add_time,
            ..Default::default()
        };
        init_params(&mut p, &cfg, dim).unwrap();
        p
    }

    fn random_grid(seed: u64, rate: f64) -> WeekGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = WeekGrid::empty(1, 3000);
        for h in 0..HOURS_PER_WEEK {
            for v in 0..N_VARS {
                if rng.random::<f64>() < rate {
                    w.set(h, v, rng.random_range(-2.0..2.0));
                }
            }
        }
        w
    }

    #[test]
    fn tst_length_and_row_locality() {
        let p = params(TokenizerKind::Tst, 8, false);
        let a = random_grid(1, 0.3);
        let mut b = a.clone();
        b.set(7, 4, 1.75);
        let ta = tokenize_tst(&to_dense_features(&a), &p).unwrap();
        let tb = tokenize_tst(&to_dense_features(&b), &p).unwrap();
        assert_eq!(ta.len(), 168);
        assert_eq!(ta.positions, (0..168).collect::<Vec<u16>>());
        for t in 0..168 {
            let same = ta.tokens.row(t) == tb.tokens.row(t);
            assert_eq!(same, t != 7, "hour {t}");
        }
        let empty = tokenize_tst(&to_dense_features(&WeekGrid::empty(1, 1)), &p).unwrap();
        assert_eq!(empty.len(), 168);
        assert!(empty.tokens.is_finite());
    }

    #[test]
    fn tst_zero_input_gives_bias_path_only() {
        let p = params(TokenizerKind::Tst, 8, false);
        let t = tokenize_tst(&Matrix::zeros(168, 54), &p).unwrap();
        // zero biases and swish(0) = 0
        assert!(t.tokens.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tst_rejects_wrong_width() {
        let p = params(TokenizerKind::Tst, 8, false);
        assert!(matches!(
            tokenize_tst(&Matrix::zeros(168, 53), &p),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn masked_interp_matches_dense_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 10;
            let c = 3;
            let scores = Matrix::from_vec(
                n,
                n,
                (0..n * n).map(|_| rng.random_range(-3.0..3.0)).collect(),
            );
            let values = Matrix::from_vec(
                n,
                c,
                (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect(),
            );
            let mask = Matrix::from_vec(
                n,
                c,
                (0..n * c)
                    .map(|_| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 })
                    .collect(),
            );
            let mut g = Graph::<f64>::no_grad();
            let s = g.constant(scores.clone());
            let out = g
                .masked_interp(s, Arc::new(values.clone()), Arc::new(mask.clone()))
                .unwrap();
            let out = g.value(out);
            for ch in 0..c {
                for q in 0..n {
                    let logits: Vec<f64> = (0..n)
                        .map(|k| {
                            if mask.at(k, ch) > 0.0 {
                                scores.at(q, k)
                            } else {
                                f64::NEG_INFINITY
                            }
                        })
                        .collect();
                    let expected = if logits.iter().all(|l| l.is_infinite()) {
                        0.0
                    } else {
                        let z: f64 = logits.iter().map(|l| l.exp()).sum();
                        (0..n).map(|k| logits[k].exp() / z * values.at(k, ch)).sum()
                    };
                    assert!((out.at(q, ch) - expected).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn mtan_single_observation_and_unobserved_channel() {
        let p = params(TokenizerKind::Mtan, 8, false);
        let mut w = WeekGrid::empty(1, 3000);
        w.set(40, 2, 1.3);
        let mut g = Graph::<f64>::no_grad();
        let b = p.bind(&mut g);
        let s = mtan_scores(&mut g, &b, 0).unwrap();
        let mut values = Matrix::zeros(168, N_VARS);
        let mut mask = Matrix::zeros(168, N_VARS);
        values.set(40, 2, 1.3);
        mask.set(40, 2, 1.0);
        let ch = g
            .masked_interp(s, Arc::new(values), Arc::new(mask))
            .unwrap();
        let ch = g.value(ch);
        for q in 0..168 {
            assert!((ch.at(q, 2) - 1.3).abs() < 1e-12);
            assert_eq!(ch.at(q, 5), 0.0);
        }
        let t = tokenize_mtan(&w, &p, 1).unwrap();
        assert_eq!(t.len(), 168);
        assert!(t.tokens.is_finite());
    }

    #[test]
    fn mtan_attention_rows_sum_to_one() {
        let p = params(TokenizerKind::Mtan, 8, false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask: Vec<bool> = (0..168).map(|_| rng.random::<f64>() < 0.1).collect();
        let a = mtan_attention(&p, 0, &mask).unwrap();
        for q in 0..168 {
            let row = a.row(q);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for k in 0..168 {
                if !mask[k] {
                    assert_eq!(row[k], 0.0);
                }
            }
        }
        let none = mtan_attention(&p, 0, &[false; 168]).unwrap();
        assert!(none.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tuple_counts_and_time_exclusion() {
        let p = params(TokenizerKind::Tuple, 8, true);
        let w = random_grid(3, 0.05);
        let t = tokenize_tuple(&w, &p, false).unwrap();
        assert_eq!(t.len(), w.observed_count());
        assert_eq!(t.variable_ids.as_ref().unwrap().len(), t.len());

        let mut w = WeekGrid::empty(1, 3000);
        w.set(3, 6, 0.5);
        w.set(90, 6, 0.5);
        let t = tokenize_tuple(&w, &p, false).unwrap();
        assert_eq!(t.tokens.row(0), t.tokens.row(1));
        assert_eq!(t.positions, vec![3, 90]);
        let t = tokenize_tuple(&w, &p, true).unwrap();
        assert_ne!(t.tokens.row(0), t.tokens.row(1));

        let empty = tokenize_tuple(&WeekGrid::empty(1, 1), &p, false).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn tuple_zero_value_token_is_variable_embedding() {
        let p = params(TokenizerKind::Tuple, 8, true);
        let mut w = WeekGrid::empty(1, 3000);
        w.set(12, 9, 0.0);
        let t = tokenize_tuple(&w, &p, false).unwrap();
        assert_eq!(t.tokens.row(0), p.get("tok.var").unwrap().row(9));
        let t = tokenize_tuple(&w, &p, true).unwrap();
        let var = p.get("tok.var").unwrap().row(9);
        let time = p.get("tok.time").unwrap().row(12);
        for j in 0..8 {
            assert!((t.tokens.at(0, j) - var[j] - time[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn token_drop_selects_rows() {
        for kind in TokenizerKind::ALL {
            let p = params(kind, 8, false);
            let cfg = TokenizerConfig {
                kind,
                ..Default::default()
            };
            let w = random_grid(4, 0.1);
            let n = token_count(kind, &w);
            let keep: Vec<usize> = (0..n).filter(|i| i % 3 == 0).collect();
            let mut g = Graph::<f64>::no_grad();
            let b = p.bind(&mut g);
            let full = tokenize_batch(&mut g, &b, &cfg, &[&w], None).unwrap();
            let part = tokenize_batch(&mut g, &b, &cfg, &[&w], Some(&[keep.clone()])).unwrap();
            assert_eq!(part.segs.total(), keep.len());
            for (r, &i) in keep.iter().enumerate() {
                let a = g.value(full.tokens).row(i).to_vec();
                let c = g.value(part.tokens).row(r).to_vec();
                for (x, y) in a.iter().zip(&c) {
                    assert!((x - y).abs() < 1e-12, "{kind:?}");
                }
                assert_eq!(full.hours[i], part.hours[r]);
            }
        }
    }
}
