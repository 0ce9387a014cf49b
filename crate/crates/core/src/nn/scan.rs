//! Selective state-space recurrence.
//!
//! For each head `h` the state `S` is `head_dim x state` and evolves as
//!
//! ```text
//! S_t = a_t S_{t-1} + dt_t x_t B_t^T,   a_t = exp(-dt_t A_h)
//! y_t = S_t C_t
//! ```
//!
//! with `B`, `C` shared across heads. [`scan_naive`] runs the recurrence
//! step by step; [`scan_chunked`] evaluates it blockwise in the quadratic
//! "dual" form inside chunks and carries states between chunks.

use std::sync::Arc;

use super::float::Float;
use super::graph::{Graph, Op, Segments, Var};
use super::matrix::{dot, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanShape {
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub state: usize,
}

impl ScanShape {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn state_len(&self) -> usize {
        self.heads * self.head_dim * self.state
    }
}

/// Inputs of one sequence, row-major: `x` is `len x (heads*head_dim)`, `dt`
/// is `len x heads`, `a` holds the positive per-head rates, `b` and `c` are
/// `len x state`.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub x: &'a [T],
    pub dt: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
}

impl<T: Float> ScanInputs<'_, T> {
    fn check(&self, s: &ScanShape) {
        assert_eq!(self.x.len(), s.len * s.width());
        assert_eq!(self.dt.len(), s.len * s.heads);
        assert_eq!(self.a.len(), s.heads);
        assert_eq!(self.b.len(), s.len * s.state);
        assert_eq!(self.c.len(), s.len * s.state);
    }
}

/// Step-by-step recurrence. Returns outputs and the final state
/// (`heads x head_dim x state`).
pub fn scan_naive<T: Float>(
    s: &ScanShape,
    inp: &ScanInputs<T>,
    init: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); s.len * s.width()];
    let fin = run_states(s, inp, init, |t, st| {
        for h in 0..s.heads {
            for p in 0..s.head_dim {
                let row = &st[(h * s.head_dim + p) * s.state..][..s.state];
                y[t * s.width() + h * s.head_dim + p] =
                    dot(row, &inp.c[t * s.state..(t + 1) * s.state]);
            }
        }
    });
    (y, fin)
}

/// Every intermediate state, `len x heads x head_dim x state`.
pub fn scan_states<T: Float>(s: &ScanShape, inp: &ScanInputs<T>, init: Option<&[T]>) -> Vec<T> {
    let mut all = Vec::with_capacity(s.len * s.state_len());
    run_states(s, inp, init, |_, st| all.extend_from_slice(st));
    all
}

fn run_states<T: Float>(
    s: &ScanShape,
    inp: &ScanInputs<T>,
    init: Option<&[T]>,
    mut visit: impl FnMut(usize, &[T]),
) -> Vec<T> {
    inp.check(s);
    let mut st = match init {
        Some(h0) => h0.to_vec(),
        None => vec![T::zero(); s.state_len()],
    };
    for t in 0..s.len {
        let bt = &inp.b[t * s.state..(t + 1) * s.state];
        for h in 0..s.heads {
            let dt = inp.dt[t * s.heads + h];
            let decay = (-dt * inp.a[h]).exp();
            for p in 0..s.head_dim {
                let u = dt * inp.x[t * s.width() + h * s.head_dim + p];
                let row = &mut st[(h * s.head_dim + p) * s.state..][..s.state];
                for (v, &bv) in row.iter_mut().zip(bt) {
                    *v = decay * *v + u * bv;
                }
            }
        }
        visit(t, &st);
    }
    st
}

/// Chunked evaluation; numerically equivalent to [`scan_naive`].
pub fn scan_chunked<T: Float>(
    s: &ScanShape,
    inp: &ScanInputs<T>,
    init: Option<&[T]>,
    chunk: usize,
) -> (Vec<T>, Vec<T>) {
    inp.check(s);
    assert!(chunk > 0, "chunk length must be positive");
    let (n, w, hd) = (s.state, s.width(), s.head_dim);
    let mut y = vec![T::zero(); s.len * w];
    let mut st = match init {
        Some(h0) => h0.to_vec(),
        None => vec![T::zero(); s.state_len()],
    };
    let mut start = 0;
    while start < s.len {
        let q = chunk.min(s.len - start);
        let mut cb = vec![T::zero(); q * q];
        for i in 0..q {
            for j in 0..=i {
                cb[i * q + j] = dot(
                    &inp.c[(start + i) * n..][..n],
                    &inp.b[(start + j) * n..][..n],
                );
            }
        }
        for h in 0..s.heads {
            let mut cum = vec![T::zero(); q];
            let mut acc = T::zero();
            for i in 0..q {
                acc -= inp.dt[(start + i) * s.heads + h] * inp.a[h];
                cum[i] = acc;
            }
            let hs = &st[h * hd * n..(h + 1) * hd * n];
            for i in 0..q {
                let t = start + i;
                let ci = &inp.c[t * n..(t + 1) * n];
                let carry = cum[i].exp();
                let yi = &mut y[t * w + h * hd..t * w + (h + 1) * hd];
                for p in 0..hd {
                    yi[p] = carry * dot(&hs[p * n..(p + 1) * n], ci);
                }
                for j in 0..=i {
                    let tj = start + j;
                    let coef = (cum[i] - cum[j]).exp() * cb[i * q + j] * inp.dt[tj * s.heads + h];
                    let xj = &inp.x[tj * w + h * hd..tj * w + (h + 1) * hd];
                    for p in 0..hd {
                        yi[p] += coef * xj[p];
                    }
                }
            }
            let last = cum[q - 1];
            let carry = last.exp();
            let hs = &mut st[h * hd * n..(h + 1) * hd * n];
            hs.iter_mut().for_each(|v| *v *= carry);
            for j in 0..q {
                let tj = start + j;
                let coef = (last - cum[j]).exp() * inp.dt[tj * s.heads + h];
                let bj = &inp.b[tj * n..(tj + 1) * n];
                for p in 0..hd {
                    let u = coef * inp.x[tj * w + h * hd + p];
                    for (v, &bv) in hs[p * n..(p + 1) * n].iter_mut().zip(bj) {
                        *v += u * bv;
                    }
                }
            }
        }
        start += q;
    }
    (y, st)
}

/// Gradients of one sequence, starting from a zero state.
pub(crate) struct ScanGrads<T> {
    pub x: Vec<T>,
    pub dt: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
}

pub(crate) fn scan_backward<T: Float>(
    s: &ScanShape,
    inp: &ScanInputs<T>,
    dy: &[T],
) -> ScanGrads<T> {
    let (n, w, hd, sl) = (s.state, s.width(), s.head_dim, s.state_len());
    let states = scan_states(s, inp, None);
    let mut g = ScanGrads {
        x: vec![T::zero(); s.len * w],
        dt: vec![T::zero(); s.len * s.heads],
        a: vec![T::zero(); s.heads],
        b: vec![T::zero(); s.len * n],
        c: vec![T::zero(); s.len * n],
    };
    // Running adjoint of the state, already multiplied through a_{t+1}.
    let mut adj = vec![T::zero(); sl];
    let zero_state = vec![T::zero(); sl];
    for t in (0..s.len).rev() {
        let st = &states[t * sl..(t + 1) * sl];
        let prev = if t == 0 {
            &zero_state[..]
        } else {
            &states[(t - 1) * sl..t * sl]
        };
        let bt = &inp.b[t * n..(t + 1) * n];
        let ct = &inp.c[t * n..(t + 1) * n];
        for h in 0..s.heads {
            let dt = inp.dt[t * s.heads + h];
            let decay = (-dt * inp.a[h]).exp();
            let mut da = T::zero();
            let mut ddt = T::zero();
            for p in 0..hd {
                let off = (h * hd + p) * n;
                let dyp = dy[t * w + h * hd + p];
                let xp = inp.x[t * w + h * hd + p];
                let mut gb = T::zero();
                for k in 0..n {
                    let gk = adj[off + k] + dyp * ct[k];
                    adj[off + k] = gk;
                    g.c[t * n + k] += st[off + k] * dyp;
                    da += gk * prev[off + k];
                    gb += gk * bt[k];
                    g.b[t * n + k] += dt * gk * xp;
                }
                ddt += gb * xp;
                g.x[t * w + h * hd + p] = dt * gb;
            }
            // a_t = exp(-dt A)
            ddt -= da * inp.a[h] * decay;
            g.a[h] -= da * dt * decay;
            g.dt[t * s.heads + h] = ddt;
            for v in &mut adj[h * hd * n..(h + 1) * hd * n] {
                *v *= decay;
            }
        }
    }
    g
}

// ---------------------------------------------------------------------------

struct ScanOp {
    x: Var,
    dt: Var,
    a: Var,
    b: Var,
    c: Var,
    head_dim: usize,
    segs: Arc<Segments>,
}

impl<T: Float> Op<T> for ScanOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.dt, self.a, self.b, self.c]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let (x, dt, a, b, c) = (
            g.value(self.x),
            g.value(self.dt),
            g.value(self.a),
            g.value(self.b),
            g.value(self.c),
        );
        let heads = dt.cols;
        let n = b.cols;
        let w = x.cols;
        let mut gx = Matrix::zeros(x.rows, w);
        let mut gdt = Matrix::zeros(dt.rows, heads);
        let mut ga = Matrix::zeros(1, heads);
        let mut gb = Matrix::zeros(b.rows, n);
        let mut gc = Matrix::zeros(c.rows, n);
        for r in self.segs.iter() {
            if r.is_empty() {
                continue;
            }
            let shape = ScanShape {
                len: r.len(),
                heads,
                head_dim: self.head_dim,
                state: n,
            };
            let inp = ScanInputs {
                x: &x.data[r.start * w..r.end * w],
                dt: &dt.data[r.start * heads..r.end * heads],
                a: &a.data,
                b: &b.data[r.start * n..r.end * n],
                c: &c.data[r.start * n..r.end * n],
            };
            let sg = scan_backward(&shape, &inp, &dout.data[r.start * w..r.end * w]);
            gx.data[r.start * w..r.end * w].copy_from_slice(&sg.x);
            gdt.data[r.start * heads..r.end * heads].copy_from_slice(&sg.dt);
            gb.data[r.start * n..r.end * n].copy_from_slice(&sg.b);
            gc.data[r.start * n..r.end * n].copy_from_slice(&sg.c);
            for (acc, v) in ga.data.iter_mut().zip(sg.a) {
                *acc += v;
            }
        }
        vec![
            needs[0].then_some(gx),
            needs[1].then_some(gdt),
            needs[2].then_some(ga),
            needs[3].then_some(gb),
            needs[4].then_some(gc),
        ]
    }
}

impl<T: Float> Graph<T> {
    /// Runs the recurrence independently over every segment from a zero
    /// state. `x`: `rows x heads*head_dim`, `dt`: `rows x heads` (positive),
    /// `a`: `1 x heads` (positive), `b`, `c`: `rows x state`.
    #[allow(clippy::too_many_arguments)]
    pub fn ssd_scan(
        &mut self,
        x: Var,
        dt: Var,
        a: Var,
        b: Var,
        c: Var,
        head_dim: usize,
        chunk: usize,
        segs: Arc<Segments>,
    ) -> Result<Var> {
        let (rows, w) = self.shape(x);
        let heads = self.shape(dt).1;
        let n = self.shape(b).1;
        if head_dim == 0
            || heads * head_dim != w
            || self.shape(dt).0 != rows
            || self.shape(a) != (1, heads)
            || self.shape(b).0 != rows
            || self.shape(c) != (rows, n)
            || segs.total() != rows
        {
            return Err(Error::contract("ssd_scan: shape mismatch"));
        }
        let (xm, dtm, am, bm, cm) = (
            self.value(x),
            self.value(dt),
            self.value(a),
            self.value(b),
            self.value(c),
        );
        let mut y = Matrix::zeros(rows, w);
        for r in segs.iter() {
            if r.is_empty() {
                continue;
            }
            let shape = ScanShape {
                len: r.len(),
                heads,
                head_dim,
                state: n,
            };
            let inp = ScanInputs {
                x: &xm.data[r.start * w..r.end * w],
                dt: &dtm.data[r.start * heads..r.end * heads],
                a: &am.data,
                b: &bm.data[r.start * n..r.end * n],
                c: &cm.data[r.start * n..r.end * n],
            };
            let (ys, _) = scan_chunked(&shape, &inp, None, chunk);
            y.data[r.start * w..r.end * w].copy_from_slice(&ys);
        }
        Ok(self.push(
            y,
            ScanOp {
                x,
                dt,
                a,
                b,
                c,
                head_dim,
                segs,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn chunked_matches_naive_with_ragged_last_chunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = ScanShape {
            len: 23,
            heads: 2,
            head_dim: 3,
            state: 4,
        };
        let x = random(&mut rng, 23 * 6, -1.0, 1.0);
        let dt = random(&mut rng, 23 * 2, 0.01, 1.0);
        let a = random(&mut rng, 2, 0.5, 4.0);
        let b = random(&mut rng, 23 * 4, -1.0, 1.0);
        let c = random(&mut rng, 23 * 4, -1.0, 1.0);
        let h0 = random(&mut rng, s.state_len(), -1.0, 1.0);
        let inp = ScanInputs {
            x: &x,
            dt: &dt,
            a: &a,
            b: &b,
            c: &c,
        };
        let (y1, f1) = scan_naive(&s, &inp, Some(&h0));
        let (y2, f2) = scan_chunked(&s, &inp, Some(&h0), 5);
        for (u, v) in y1.iter().zip(&y2).chain(f1.iter().zip(&f2)) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }

    #[test]
    fn unit_decay_without_injection_keeps_state() {
        let s = ScanShape {
            len: 10,
            heads: 1,
            head_dim: 2,
            state: 3,
        };
        let x = vec![1.0; 20];
        let dt = vec![0.7; 10];
        let (a, b) = (vec![0.0], vec![0.0; 30]);
        let c = vec![1.0; 30];
        let h0 = vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0];
        let inp = ScanInputs {
            x: &x,
            dt: &dt,
            a: &a,
            b: &b,
            c: &c,
        };
        let states = scan_states(&s, &inp, Some(&h0));
        for t in 0..10 {
            assert_eq!(&states[t * 6..(t + 1) * 6], &h0[..]);
        }
    }
}
