//! Fused contrastive and spreading objectives.

use super::float::Float;
use super::graph::{Graph, Op, Var};
use super::matrix::{dot, Matrix};
use crate::{Error, Result};

/// Smallest squared distance allowed inside the nearest-neighbour log.
pub const KOLEO_FLOOR: f64 = 1e-12;

fn row_normalize<T: Float>(h: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
    let mut u = h.clone();
    let mut norms = Vec::with_capacity(h.rows);
    for r in 0..h.rows {
        let row = u.row_mut(r);
        let n = dot(row, row).sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::contract(format!(
                "cosine similarity undefined: row {r} has norm {n}"
            )));
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((u, norms))
}

fn normalize_backward<T: Float>(u: &Matrix<T>, norms: &[T], du: &Matrix<T>) -> Matrix<T> {
    let mut dh = du.clone();
    for r in 0..u.rows {
        let ur = u.row(r);
        let proj = dot(ur, du.row(r));
        for (d, &uv) in dh.row_mut(r).iter_mut().zip(ur) {
            *d = (*d - uv * proj) / norms[r];
        }
    }
    dh
}

struct InfoNceOp<T> {
    h1: Var,
    h2: Var,
    tau: T,
}

/// Similarities `S = U W^T / tau`, their row and column softmaxes, and the
/// loss value.
struct NceParts<T> {
    u: Matrix<T>,
    w: Matrix<T>,
    n1: Vec<T>,
    n2: Vec<T>,
    p: Vec<T>,
    q: Vec<T>,
    loss: T,
}

fn nce_parts<T: Float>(h1: &Matrix<T>, h2: &Matrix<T>, tau: T) -> Result<NceParts<T>> {
    if h1.shape() != h2.shape() || h1.rows == 0 {
        return Err(Error::contract(
            "info_nce: views must be non-empty and equally shaped",
        ));
    }
    if !(tau > T::zero()) {
        return Err(Error::config(
            "loss.temperature",
            "temperature must be positive",
        ));
    }
    let n = h1.rows;
    let (u, n1) = row_normalize(h1)?;
    let (w, n2) = row_normalize(h2)?;
    let mut s = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = dot(u.row(i), w.row(j)) / tau;
        }
    }
    let mut p = vec![T::zero(); n * n];
    let mut q = vec![T::zero(); n * n];
    let mut l12 = T::zero();
    let mut l21 = T::zero();
    for i in 0..n {
        let row = &s[i * n..(i + 1) * n];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        l12 += lse - row[i];
        for j in 0..n {
            p[i * n + j] = (row[j] - lse).exp();
        }
    }
    for j in 0..n {
        let mx = (0..n).map(|i| s[i * n + j]).fold(T::neg_infinity(), T::max);
        let z: T = (0..n).map(|i| (s[i * n + j] - mx).exp()).sum();
        let lse = mx + z.ln();
        l21 += lse - s[j * n + j];
        for i in 0..n {
            q[i * n + j] = (s[i * n + j] - lse).exp();
        }
    }
    let nf = T::lit(n as f64);
    let loss = T::lit(0.5) * (l12 / nf + l21 / nf);
    Ok(NceParts {
        u,
        w,
        n1,
        n2,
        p,
        q,
        loss,
    })
}

impl<T: Float> Op<T> for InfoNceOp<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.h1, self.h2]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let parts =
            nce_parts(g.value(self.h1), g.value(self.h2), self.tau).expect("validated in forward");
        let n = parts.u.rows;
        let d = parts.u.cols;
        let coef = dout.data[0] / (T::lit(2.0 * n as f64) * self.tau);
        let mut ds = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let eye = if i == j { T::lit(2.0) } else { T::zero() };
                ds[i * n + j] = coef * (parts.p[i * n + j] + parts.q[i * n + j] - eye);
            }
        }
        let mut du = Matrix::zeros(n, d);
        let mut dw = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..n {
                let v = ds[i * n + j];
                for c in 0..d {
                    du.data[i * d + c] += v * parts.w.data[j * d + c];
                    dw.data[j * d + c] += v * parts.u.data[i * d + c];
                }
            }
        }
        vec![
            needs[0].then(|| normalize_backward(&parts.u, &parts.n1, &du)),
            needs[1].then(|| normalize_backward(&parts.w, &parts.n2, &dw)),
        ]
    }
}

/// Nearest neighbour (excluding self) and squared distance for each row.
fn nearest<T: Float>(h: &Matrix<T>) -> Vec<(usize, T)> {
    let n = h.rows;
    (0..n)
        .map(|i| {
            let mut best = (usize::MAX, T::infinity());
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d: T = h
                    .row(i)
                    .iter()
                    .zip(h.row(j))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Pairs `(i, j)` within one view whose rows coincide exactly.
pub fn duplicate_pairs<T: Float>(h: &Matrix<T>) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = nearest(h)
        .into_iter()
        .enumerate()
        .filter(|(_, (_, d))| *d == T::zero())
        .map(|(i, (j, _))| (i.min(j), i.max(j)))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

fn koleo_view<T: Float>(h: &Matrix<T>) -> (T, Vec<(usize, T)>) {
    let nn = nearest(h);
    let floor = T::lit(KOLEO_FLOOR);
    let s: T = nn.iter().map(|&(_, d)| d.max(floor).ln()).sum();
    (-s / T::lit(h.rows as f64), nn)
}

struct KoleoOp {
    h1: Var,
    h2: Var,
}

impl<T: Float> Op<T> for KoleoOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.h1, self.h2]
    }
    fn backward(
        &self,
        g: &Graph<T>,
        _out: &Matrix<T>,
        dout: &Matrix<T>,
        needs: &[bool],
    ) -> Vec<Option<Matrix<T>>> {
        let floor = T::lit(KOLEO_FLOOR);
        let mut res = Vec::new();
        for (v, need) in [self.h1, self.h2].into_iter().zip(needs) {
            if !need {
                res.push(None);
                continue;
            }
            let h = g.value(v);
            let (n, d) = h.shape();
            let (_, nn) = koleo_view(h);
            let coef = -dout.data[0] * T::lit(0.5) / T::lit(n as f64);
            let mut dh = Matrix::zeros(n, d);
            for (i, &(j, dist)) in nn.iter().enumerate() {
                if dist <= floor {
                    continue;
                }
                let k = coef * T::lit(2.0) / dist;
                for c in 0..d {
                    let diff = h.data[i * d + c] - h.data[j * d + c];
                    dh.data[i * d + c] += k * diff;
                    dh.data[j * d + c] -= k * diff;
                }
            }
            res.push(Some(dh));
        }
        res
    }
}

impl<T: Float> Graph<T> {
    /// Symmetric InfoNCE over cosine similarities of paired rows.
    pub fn info_nce(&mut self, h1: Var, h2: Var, tau: T) -> Result<Var> {
        let loss = nce_parts(self.value(h1), self.value(h2), tau)?.loss;
        Ok(self.push(Matrix::scalar(loss), InfoNceOp { h1, h2, tau }))
    }

    /// Symmetric nearest-neighbour log-distance regularizer with squared
    /// distances floored at [`KOLEO_FLOOR`].
    pub fn koleo(&mut self, h1: Var, h2: Var) -> Result<Var> {
        let (n, _) = self.shape(h1);
        if self.shape(h1) != self.shape(h2) || n < 2 {
            return Err(Error::contract(
                "koleo: views need at least two equally shaped rows",
            ));
        }
        let (a, _) = koleo_view(self.value(h1));
        let (b, _) = koleo_view(self.value(h2));
        let loss = T::lit(0.5) * (a + b);
        Ok(self.push(Matrix::scalar(loss), KoleoOp { h1, h2 }))
    }
}
