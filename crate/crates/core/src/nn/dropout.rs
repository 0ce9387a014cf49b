use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::float::Float;
use super::graph::{Graph, Var};
use super::matrix::Matrix;
use crate::Result;

/// Source of dropout masks; inactive in evaluation mode.
#[derive(Debug, Clone)]
pub struct Dropout {
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Dropout { rng: None }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Dropout { rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn apply<T: Float>(&mut self, g: &mut Graph<T>, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let (r, c) = g.shape(x);
        let keep = T::lit(1.0 / (1.0 - rate));
        let data = (0..r * c)
            .map(|_| {
                if rng.random_bool(rate) {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        g.mul_const(x, Arc::new(Matrix::from_vec(r, c, data)))
    }
}
