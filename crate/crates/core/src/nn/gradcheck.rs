//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{value_and_grad, Bound, ParameterTree};
use crate::Result;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so entries whose true
/// derivative is zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of `f` against central differences on at
/// most `per_tensor` randomly chosen entries of every trainable tensor.
pub fn gradcheck(
    params: &ParameterTree<f64>,
    per_tensor: usize,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
) -> Result<GradcheckReport> {
    let (_, grads, ()) = value_and_grad(params, |g, b| Ok((f(g, b)?, ())))?;
    let eval = |p: &ParameterTree<f64>| -> Result<f64> {
        let mut g = Graph::no_grad();
        let b = p.bind(&mut g);
        let v = f(&mut g, &b)?;
        Ok(g.scalar(v))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.params().map(|(k, _)| k.clone()).collect();
    for name in names {
        let len = params.get(&name)?.len();
        let idx: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            sample(&mut rng, len, per_tensor).into_vec()
        };
        for i in idx {
            let orig = params.get(&name)?.data[i];
            probe.get_mut(&name)?.data[i] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.data[i] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.data[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads
                .get(&name)
                .expect("every parameter has a gradient")
                .data[i];
            let e = rel_err(analytic, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst =
                    format!("{name}[{i}]: analytic {analytic:.6e} numeric {numeric:.6e}");
            }
        }
    }
    Ok(report)
}
