use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Mlp, Tensor};
use crate::error::Result;

/// Gate deciding whether a sample is handled by an expert, `π(c) ∈ (0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selector {
    pub body: Mlp,
}

impl Selector {
    pub fn new<R: Rng + ?Sized>(n_concepts: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let body = if hidden == 0 {
            Mlp::new(&[n_concepts, 1], Activation::Identity, Activation::Sigmoid, rng)?
        } else {
            Mlp::new(&[n_concepts, hidden, 1], Activation::Relu, Activation::Sigmoid, rng)?
        };
        Ok(Selector { body })
    }

    /// Selection probabilities as a `[n, 1]` column.
    pub fn forward(&self, c: &Tensor) -> Result<Tensor> {
        self.body.forward(c)
    }

    pub fn probabilities(&self, c: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(c)?.into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn outputs_are_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = Selector::new(4, 8, &mut rng).unwrap();
        let c = Tensor::matrix(3, 4, vec![0.0, 1.0, 0.5, 0.2, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        for p in s.probabilities(&c).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
        assert!(s.forward(&Tensor::zeros(2, 3)).is_err());
    }
}
