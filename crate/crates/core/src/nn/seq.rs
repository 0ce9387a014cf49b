//! Sequence-aware operations on packed segments.

use std::sync::Arc;

use super::float::Float;
use super::graph::{Graph, Op, Segments, Var};
use super::matrix::{dot, Matrix};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Depthwise causal convolution

struct CausalConvOp {
    x: Var,
    w: Var,
    b: Var,
    segs: Arc<Segments>,
}

impl<T: Float> Op<T> for CausalConvOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.w, self.b]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let x = g.value(self.x);
        let w = g.value(self.w);
        let (width, cols) = w.shape();
        let mut dx = Matrix::zeros(x.rows, cols);
        let mut dw = Matrix::zeros(width, cols);
        let mut db = Matrix::zeros(1, cols);
        for range in self.segs.iter() {
            for t in range.clone() {
                let d = dout.row(t);
                for (a, &v) in db.data.iter_mut().zip(d) {
                    *a += v;
                }
                for j in 0..width {
                    let lag = width - 1 - j;
                    if t < range.start + lag {
                        continue;
                    }
                    let src = t - lag;
                    for c in 0..cols {
                        dw.data[j * cols + c] += d[c] * x.data[src * cols + c];
                        dx.data[src * cols + c] += d[c] * w.data[j * cols + c];
                    }
                }
            }
        }
        vec![
            needs[0].then_some(dx),
            needs[1].then_some(dw),
            needs[2].then_some(db),
        ]
    }
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention

struct AttentionOp<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
    segs: Arc<Segments>,
    lse: Vec<T>,
}

fn head_block<T: Float>(
    m: &Matrix<T>,
    rows: std::ops::Range<usize>,
    h: usize,
    dh: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * dh);
    for r in rows {
        out.extend_from_slice(&m.row(r)[h * dh..(h + 1) * dh]);
    }
    out
}

fn scores<T: Float>(q: &[T], k: &[T], l: usize, dh: usize, scale: T, causal: bool) -> Vec<T> {
    let mut s = vec![T::neg_infinity(); l * l];
    for i in 0..l {
        let lim = if causal { i + 1 } else { l };
        for j in 0..lim {
            s[i * l + j] = dot(&q[i * dh..(i + 1) * dh], &k[j * dh..(j + 1) * dh]) * scale;
        }
    }
    s
}

impl<T: Float> Op<T> for AttentionOp<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.q, self.k, self.v]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        out: &Matrix<T>,
        dout: &Matrix<T>,
        needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let (q, k, v) = (g.value(self.q), g.value(self.k), g.value(self.v));
        let (rows, d) = q.shape();
        let dh = d / self.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dq = Matrix::zeros(rows, d);
        let mut dk = Matrix::zeros(rows, d);
        let mut dv = Matrix::zeros(rows, d);
        for range in self.segs.iter() {
            let l = range.len();
            if l == 0 {
                continue;
            }
            for h in 0..self.heads {
                let qh = head_block(q, range.clone(), h, dh);
                let kh = head_block(k, range.clone(), h, dh);
                let vh = head_block(v, range.clone(), h, dh);
                let oh = head_block(out, range.clone(), h, dh);
                let doh = head_block(dout, range.clone(), h, dh);
                let mut p = scores(&qh, &kh, l, dh, scale, self.causal);
                for i in 0..l {
                    let lse = self.lse[(range.start + i) * self.heads + h];
                    for j in 0..l {
                        p[i * l + j] = (p[i * l + j] - lse).exp();
                    }
                }
                let mut dqh = vec![T::zero(); l * dh];
                let mut dkh = vec![T::zero(); l * dh];
                let mut dvh = vec![T::zero(); l * dh];
                for i in 0..l {
                    let do_i = &doh[i * dh..(i + 1) * dh];
                    let delta = dot(do_i, &oh[i * dh..(i + 1) * dh]);
                    for j in 0..l {
                        let pij = p[i * l + j];
                        if pij == T::zero() {
                            continue;
                        }
                        let dp = dot(do_i, &vh[j * dh..(j + 1) * dh]);
                        let ds = pij * (dp - delta) * scale;
                        for c in 0..dh {
                            dvh[j * dh + c] += pij * do_i[c];
                            dqh[i * dh + c] += ds * kh[j * dh + c];
                            dkh[j * dh + c] += ds * qh[i * dh + c];
                        }
                    }
                }
                for (li, r) in range.clone().enumerate() {
                    dq.row_mut(r)[h * dh..(h + 1) * dh]
                        .copy_from_slice(&dqh[li * dh..(li + 1) * dh]);
                    dk.row_mut(r)[h * dh..(h + 1) * dh]
                        .copy_from_slice(&dkh[li * dh..(li + 1) * dh]);
                    dv.row_mut(r)[h * dh..(h + 1) * dh]
                        .copy_from_slice(&dvh[li * dh..(li + 1) * dh]);
                }
            }
        }
        vec![
            needs[0].then_some(dq),
            needs[1].then_some(dk),
            needs[2].then_some(dv),
        ]
    }
}

// ---------------------------------------------------------------------------
// Rotary position encoding

struct RopeOp {
    x: Var,
    positions: Arc<Vec<f64>>,
    head_dim: usize,
    base: f64,
}

fn rotate<T: Float>(
    x: &Matrix<T>,
    positions: &[f64],
    head_dim: usize,
    base: f64,
    sign: f64,
) -> Matrix<T> {
    let mut out = x.clone();
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    for r in 0..x.rows {
        let row = out.row_mut(r);
        for (i, f) in freqs.iter().enumerate() {
            let theta = sign * positions[r] * f;
            let (s, c) = (T::lit(theta.sin()), T::lit(theta.cos()));
            for h in 0..x.cols / head_dim {
                let a = h * head_dim + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * c - x1 * s;
                row[a + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

impl<T: Float> Op<T> for RopeOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(
        &self,
        _g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        _needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        vec![Some(rotate(
            dout,
            &self.positions,
            self.head_dim,
            self.base,
            -1.0,
        ))]
    }
}

// ---------------------------------------------------------------------------
// Masked attention interpolation onto a fixed set of query times

struct InterpOp {
    scores: Var,
    values: Arc<Matrix<f64>>,
    mask: Arc<Matrix<f64>>,
    cache: Vec<InterpWeek>,
}

/// Per-week denominators and the entries that needed the slow path.
struct InterpWeek {
    den: Vec<f64>,
    slow: Vec<(usize, usize)>,
}

struct InterpShared {
    e: Vec<f64>,
}

fn interp_shared<T: Float>(s: &Matrix<T>) -> InterpShared {
    let (nq, nk) = s.shape();
    let mut e = vec![0.0; nq * nk];
    for q in 0..nq {
        let row = s.row(q);
        let mx = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        for k in 0..nk {
            e[q * nk + k] = (row[k].as_f64() - mx).exp();
        }
    }
    InterpShared { e }
}

/// Exact weights for one (query, channel) pair using the channel's own
/// maximum over observed keys.
fn slow_weights<T: Float>(
    s: &Matrix<T>,
    mask: &[f64],
    channels: usize,
    q: usize,
    c: usize,
) -> Vec<f64> {
    let nk = s.cols;
    let row = s.row(q);
    let mx = (0..nk)
        .filter(|&k| mask[k * channels + c] > 0.0)
        .map(|k| row[k].as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = (0..nk)
        .map(|k| {
            if mask[k * channels + c] > 0.0 {
                (row[k].as_f64() - mx).exp()
            } else {
                0.0
            }
        })
        .collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    w
}

impl<T: Float> Op<T> for InterpOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.scores]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        out: &Matrix<T>,
        dout: &Matrix<T>,
        _needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let s = g.value(self.scores);
        let (nq, nk) = s.shape();
        let ch = self.values.cols;
        let shared = interp_shared(s);
        let mut ds = vec![0.0f64; nq * nk];
        let mut a = vec![0.0f64; nq * ch];
        let mut bm = vec![0.0f64; nq * ch];
        for (b, week) in self.cache.iter().enumerate() {
            let x = &self.values.data[b * nk * ch..(b + 1) * nk * ch];
            let m = &self.mask.data[b * nk * ch..(b + 1) * nk * ch];
            let o = &out.data[b * nq * ch..(b + 1) * nq * ch];
            let gd = &dout.data[b * nq * ch..(b + 1) * nq * ch];
            for i in 0..nq * ch {
                let den = week.den[i];
                if den > 0.0 {
                    let gp = gd[i].as_f64() / den;
                    a[i] = gp;
                    bm[i] = gp * o[i].as_f64();
                } else {
                    a[i] = 0.0;
                    bm[i] = 0.0;
                }
            }
            for &(q, c) in &week.slow {
                a[q * ch + c] = 0.0;
                bm[q * ch + c] = 0.0;
            }
            // ds[q,k] += E[q,k] * sum_c m[k,c] * (a[q,c] x[k,c] - bm[q,c])
            for q in 0..nq {
                let aq = &a[q * ch..(q + 1) * ch];
                let bq = &bm[q * ch..(q + 1) * ch];
                for k in 0..nk {
                    let mut acc = 0.0;
                    for c in 0..ch {
                        let mk = m[k * ch + c];
                        if mk > 0.0 {
                            acc += aq[c] * x[k * ch + c] - bq[c];
                        }
                    }
                    ds[q * nk + k] += shared.e[q * nk + k] * acc;
                }
            }
            for &(q, c) in &week.slow {
                let w = slow_weights(s, m, ch, q, c);
                let gqc = gd[q * ch + c].as_f64();
                let oqc = o[q * ch + c].as_f64();
                for k in 0..nk {
                    if w[k] > 0.0 {
                        ds[q * nk + k] += gqc * w[k] * (x[k * ch + c] - oqc);
                    }
                }
            }
        }
        vec![Some(Matrix::from_vec(
            nq,
            nk,
            ds.into_iter().map(T::lit).collect(),
        ))]
    }
}

// ---------------------------------------------------------------------------

impl<T: Float> Graph<T> {
    /// Depthwise causal convolution within each segment. `w` is
    /// `width x channels`, `b` is `1 x channels`; positions before the start
    /// of a segment are treated as zero.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var, segs: Arc<Segments>) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let (width, wc) = self.shape(w);
        if wc != cols || self.shape(b) != (1, cols) || segs.total() != rows {
            return Err(Error::contract("causal_conv: shape mismatch"));
        }
        let xm = self.value(x);
        let wm = self.value(w);
        let bm = self.value(b);
        let mut out = Matrix::zeros(rows, cols);
        for range in segs.iter() {
            for t in range.clone() {
                let o = out.row_mut(t);
                o.copy_from_slice(&bm.data);
                for j in 0..width {
                    let lag = width - 1 - j;
                    if t < range.start + lag {
                        continue;
                    }
                    let src = xm.row(t - lag);
                    let wr = wm.row(j);
                    for c in 0..cols {
                        o[c] += wr[c] * src[c];
                    }
                }
            }
        }
        Ok(self.push(out, CausalConvOp { x, w, b, segs }))
    }

    /// Multi-head attention within each segment. `q`, `k`, `v` are packed
    /// `rows x d` with `d` divisible by `heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        segs: Arc<Segments>,
    ) -> Result<Var> {
        let (rows, d) = self.shape(q);
        if self.shape(k) != (rows, d) || self.shape(v) != (rows, d) || segs.total() != rows {
            return Err(Error::contract("attention: shape mismatch"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros(rows, d);
        let mut lse = vec![T::zero(); rows * heads];
        for range in segs.iter() {
            let l = range.len();
            if l == 0 {
                continue;
            }
            for h in 0..heads {
                let qh = head_block(qm, range.clone(), h, dh);
                let kh = head_block(km, range.clone(), h, dh);
                let vh = head_block(vm, range.clone(), h, dh);
                let mut s = scores(&qh, &kh, l, dh, scale, causal);
                for i in 0..l {
                    let row = &mut s[i * l..(i + 1) * l];
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for p in row.iter_mut() {
                        *p = (*p - mx).exp();
                        z += *p;
                    }
                    lse[(range.start + i) * heads + h] = mx + z.ln();
                    let inv = T::one() / z;
                    let o = &mut out.row_mut(range.start + i)[h * dh..(h + 1) * dh];
                    for (j, &p) in row.iter().enumerate() {
                        if p == T::zero() {
                            continue;
                        }
                        let w = p * inv;
                        for c in 0..dh {
                            o[c] += w * vh[j * dh + c];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            AttentionOp {
                q,
                k,
                v,
                heads,
                causal,
                segs,
                lse,
            },
        ))
    }

    /// Rotates consecutive column pairs of every head by angles proportional
    /// to the row's position.
    pub fn rope(
        &mut self,
        x: Var,
        positions: Arc<Vec<f64>>,
        head_dim: usize,
        base: f64,
    ) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if positions.len() != rows || head_dim % 2 != 0 || head_dim == 0 || cols % head_dim != 0 {
            return Err(Error::contract("rope: positions or head width mismatch"));
        }
        let out = rotate(self.value(x), &positions, head_dim, base, 1.0);
        Ok(self.push(
            out,
            RopeOp {
                x,
                positions,
                head_dim,
                base,
            },
        ))
    }

    /// For every week `b` and query `q`, a softmax-weighted average of the
    /// observed values of each channel, with weights `exp(scores[q, k])`
    /// restricted to keys where the channel is observed. `scores` is
    /// `queries x keys` and shared by all weeks; `values` and `mask` stack
    /// `keys x channels` blocks per week. Channels with no observation in a
    /// week produce zeros.
    pub fn masked_interp(
        &mut self,
        scores: Var,
        values: Arc<Matrix<f64>>,
        mask: Arc<Matrix<f64>>,
    ) -> Result<Var> {
        let (nq, nk) = self.shape(scores);
        let ch = values.cols;
        if mask.shape() != values.shape() || values.rows % nk != 0 {
            return Err(Error::contract("masked_interp: value/mask shape mismatch"));
        }
        let weeks = values.rows / nk;
        let s = self.value(scores);
        let shared = interp_shared(s);
        let mut out = vec![T::zero(); weeks * nq * ch];
        let mut cache = Vec::with_capacity(weeks);
        for b in 0..weeks {
            let x = &values.data[b * nk * ch..(b + 1) * nk * ch];
            let m = &mask.data[b * nk * ch..(b + 1) * nk * ch];
            let mx: Vec<f64> = x.iter().zip(m).map(|(&v, &mm)| v * mm).collect();
            let mut num = vec![0.0; nq * ch];
            let mut den = vec![0.0; nq * ch];
            for q in 0..nq {
                let eq = &shared.e[q * nk..(q + 1) * nk];
                let (nrow, drow) = (
                    &mut num[q * ch..(q + 1) * ch],
                    &mut den[q * ch..(q + 1) * ch],
                );
                for k in 0..nk {
                    let e = eq[k];
                    for c in 0..ch {
                        nrow[c] += e * mx[k * ch + c];
                        drow[c] += e * m[k * ch + c];
                    }
                }
            }
            let observed: Vec<bool> = (0..ch)
                .map(|c| (0..nk).any(|k| m[k * ch + c] > 0.0))
                .collect();
            let mut slow = Vec::new();
            let o = &mut out[b * nq * ch..(b + 1) * nq * ch];
            for q in 0..nq {
                for c in 0..ch {
                    let i = q * ch + c;
                    if !observed[c] {
                        den[i] = 0.0;
                        continue;
                    }
                    if den[i] > 1e-280 {
                        o[i] = T::lit(num[i] / den[i]);
                    } else {
                        let w = slow_weights(s, m, ch, q, c);
                        let v: f64 = (0..nk).map(|k| w[k] * x[k * ch + c]).sum();
                        o[i] = T::lit(v);
                        slow.push((q, c));
                    }
                }
            }
            cache.push(InterpWeek { den, slow });
        }
        Ok(self.push(
            Matrix::from_vec(weeks * nq, ch, out),
            InterpOp {
                scores,
                values,
                mask,
                cache,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_attention_copies_value() {
        let mut g = Graph::<f64>::new();
        let q = g.param(Matrix::from_vec(1, 2, vec![0.3, -1.0]));
        let k = g.param(Matrix::from_vec(1, 2, vec![2.0, 0.5]));
        let v = g.param(Matrix::from_vec(1, 2, vec![4.0, 5.0]));
        let o = g
            .attention(q, k, v, 1, false, Arc::new(Segments::single(1)))
            .unwrap();
        assert_eq!(g.value(o).data, vec![4.0, 5.0]);
    }

    #[test]
    fn attention_does_not_cross_segments() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Matrix::zeros(3, 2));
        let v = g.constant(Matrix::from_vec(3, 2, vec![1.0, 1.0, 3.0, 3.0, 10.0, 10.0]));
        let o = g
            .attention(q, q, v, 1, false, Arc::new(Segments::from_lengths(&[2, 1])))
            .unwrap();
        assert_eq!(g.value(o).data, vec![2.0, 2.0, 2.0, 2.0, 10.0, 10.0]);
    }

    #[test]
    fn conv_is_causal_and_resets_at_segment_start() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(Matrix::from_vec(2, 1, vec![10.0, 1.0]));
        let b = g.constant(Matrix::zeros(1, 1));
        let y = g
            .causal_conv(x, w, b, Arc::new(Segments::from_lengths(&[2, 2])))
            .unwrap();
        assert_eq!(g.value(y).data, vec![1.0, 12.0, 3.0, 34.0]);
    }

    #[test]
    fn rope_at_zero_is_identity_and_preserves_norm() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Matrix::from_vec(
            2,
            4,
            vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0],
        ));
        let y = g.rope(x, Arc::new(vec![0.0, 7.0]), 4, 10000.0).unwrap();
        let ym = g.value(y);
        assert_eq!(ym.row(0), &[1.0, 2.0, 3.0, 4.0]);
        let n: f64 = ym.row(1).iter().map(|v| v * v).sum();
        assert!((n - 30.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_averages_observed_keys_only() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Matrix::zeros(1, 3));
        let values = Arc::new(Matrix::from_vec(3, 2, vec![1.0, 9.0, 5.0, 9.0, 100.0, 9.0]));
        let mask = Arc::new(Matrix::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0]));
        let y = g.masked_interp(s, values, mask).unwrap();
        assert_eq!(g.value(y).data, vec![3.0, 0.0]);
    }
}
