//! Finite-difference checks of every primitive on the tape.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wbm_core::nn::gradcheck::{gradcheck, GradcheckReport};
use wbm_core::nn::{Bound, Graph, Matrix, ParameterTree, Segments, Var};
use wbm_core::Result;

const TOL: f64 = 1e-4;

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix<f64> {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect())
}

fn tree(seed: u64, shapes: &[(&str, usize, usize, f64, f64)]) -> ParameterTree<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterTree::new(seed);
    for &(n, r, c, lo, hi) in shapes {
        p.insert(n, rand_matrix(&mut rng, r, c, lo, hi)).unwrap();
    }
    p
}

/// Contracts an output with a fixed random weighting so every entry matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_matrix(&mut rng, r, c, -1.0, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(
    name: &str,
    p: &ParameterTree<f64>,
    f: impl Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
) -> GradcheckReport {
    let rep = gradcheck(p, 64, 1, f).unwrap();
    assert!(rep.max_rel_err < TOL, "{name}: {rep:?}");
    rep
}

#[test]
fn elementwise_and_products() {
    let p = tree(
        1,
        &[
            ("a", 3, 4, -1.0, 1.0),
            ("b", 4, 2, -1.0, 1.0),
            ("c", 3, 4, 0.2, 2.0),
            ("r", 1, 4, -1.0, 1.0),
        ],
    );
    check("matmul", &p, |g, b| {
        let y = g.matmul(b.get("a")?, b.get("b")?)?;
        weighted_sum(g, y, 2)
    });
    check("matmul_nt", &p, |g, b| {
        let y = g.matmul_nt(b.get("a")?, b.get("c")?)?;
        weighted_sum(g, y, 3)
    });
    check("binary", &p, |g, b| {
        let (a, c) = (b.get("a")?, b.get("c")?);
        let s = g.add(a, c)?;
        let d = g.sub(s, c)?;
        let m = g.mul(d, c)?;
        let y = g.add_row(m, b.get("r")?)?;
        let y = g.mul_row(y, b.get("r")?)?;
        let y = g.scale(y, -0.7);
        weighted_sum(g, y, 4)
    });
    check("unary", &p, |g, b| {
        let a = b.get("a")?;
        let c = b.get("c")?;
        let s = g.swish(a);
        let t = g.sigmoid(a);
        let u = g.softplus(a);
        let e = g.exp(a);
        let l = g.ln(c);
        let q = g.square(a);
        let mut acc = s;
        for v in [t, u, e, l, q] {
            acc = g.add(acc, v)?;
        }
        weighted_sum(g, acc, 5)
    });
}

#[test]
fn normalizations() {
    let p = tree(
        2,
        &[
            ("x", 5, 6, -2.0, 2.0),
            ("g", 1, 6, 0.5, 1.5),
            ("b", 1, 6, -0.5, 0.5),
        ],
    );
    check("layer_norm", &p, |g, b| {
        let y = g.layer_norm(b.get("x")?, b.get("g")?, b.get("b")?, 1e-5)?;
        weighted_sum(g, y, 6)
    });
    check("rms_norm", &p, |g, b| {
        let y = g.rms_norm(b.get("x")?, b.get("g")?, 1e-5)?;
        weighted_sum(g, y, 7)
    });
    check("batch_norm", &p, |g, b| {
        let (y, _, _) = g.batch_norm(b.get("x")?, b.get("g")?, b.get("b")?, 1e-5)?;
        weighted_sum(g, y, 8)
    });
}

#[test]
fn structural_ops() {
    let p = tree(3, &[("x", 7, 4, -1.0, 1.0), ("y", 7, 2, -1.0, 1.0)]);
    let segs = Arc::new(Segments::from_lengths(&[3, 4]));
    check("slice_concat", &p, |g, b| {
        let s = g.slice_cols(b.get("x")?, 1, 2)?;
        let c = g.concat_cols(&[s, b.get("y")?, s])?;
        let r = g.concat_rows(&[c, c])?;
        weighted_sum(g, r, 9)
    });
    check("gather_reverse_pool", &p, |g, b| {
        let x = b.get("x")?;
        let gth = g.gather_rows(x, Arc::new(vec![0, 0, 6, 3]))?;
        let rev = g.reverse_segments(x, &segs)?;
        let pooled = g.mean_segments(rev, segs.clone())?;
        let a = weighted_sum(g, gth, 10)?;
        let c = weighted_sum(g, pooled, 11)?;
        g.add(a, c)
    });
}

#[test]
fn sequence_ops() {
    let p = tree(
        4,
        &[
            ("q", 9, 4, -1.0, 1.0),
            ("k", 9, 4, -1.0, 1.0),
            ("v", 9, 4, -1.0, 1.0),
            ("w", 4, 4, -1.0, 1.0),
            ("b", 1, 4, -1.0, 1.0),
        ],
    );
    let segs = Arc::new(Segments::from_lengths(&[5, 1, 3]));
    for causal in [false, true] {
        let segs = segs.clone();
        check("attention", &p, move |g, b| {
            let y = g.attention(
                b.get("q")?,
                b.get("k")?,
                b.get("v")?,
                2,
                causal,
                segs.clone(),
            )?;
            weighted_sum(g, y, 12)
        });
    }
    let positions = Arc::new(vec![0.0, 5.0, 17.0, 30.0, 167.0, 3.0, 3.0, 90.0, 100.0]);
    check("rope", &p, |g, b| {
        let y = g.rope(b.get("q")?, positions.clone(), 2, 10000.0)?;
        weighted_sum(g, y, 13)
    });
    check("conv", &p, |g, b| {
        let y = g.causal_conv(b.get("q")?, b.get("w")?, b.get("b")?, segs.clone())?;
        weighted_sum(g, y, 14)
    });
}

#[test]
fn masked_interpolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = tree(5, &[("s", 6, 6, -2.0, 2.0)]);
    let values = Arc::new(rand_matrix(&mut rng, 12, 3, -1.0, 1.0));
    let mut mask = Matrix::zeros(12, 3);
    for i in 0..mask.data.len() {
        mask.data[i] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    }
    mask.data[0..3].copy_from_slice(&[0.0, 0.0, 0.0]);
    let (mask, values) = (Arc::new(mask), values);
    check("interp", &p, |g, b| {
        let y = g.masked_interp(b.get("s")?, values.clone(), mask.clone())?;
        weighted_sum(g, y, 15)
    });
}

#[test]
fn state_space_scan() {
    let p = tree(
        6,
        &[
            ("x", 11, 4, -1.0, 1.0),
            ("dt", 11, 2, 0.05, 1.0),
            ("a", 1, 2, 0.3, 3.0),
            ("bm", 11, 3, -1.0, 1.0),
            ("cm", 11, 3, -1.0, 1.0),
        ],
    );
    let segs = Arc::new(Segments::from_lengths(&[7, 4]));
    check("scan", &p, |g, b| {
        let y = g.ssd_scan(
            b.get("x")?,
            b.get("dt")?,
            b.get("a")?,
            b.get("bm")?,
            b.get("cm")?,
            2,
            3,
            segs.clone(),
        )?;
        weighted_sum(g, y, 16)
    });
}

#[test]
fn contrastive_losses() {
    let p = tree(7, &[("h1", 5, 4, -1.0, 1.0), ("h2", 5, 4, -1.0, 1.0)]);
    check("info_nce", &p, |g, b| {
        g.info_nce(b.get("h1")?, b.get("h2")?, 0.5)
    });
    check("koleo", &p, |g, b| g.koleo(b.get("h1")?, b.get("h2")?));
}
