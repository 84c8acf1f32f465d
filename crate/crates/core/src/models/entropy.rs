//! Entropy-layer expert: per-class softmax attention over concepts feeding a
//! small per-class trunk.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax, Activation, BoundMlp, Mlp, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyExpert {
    /// Relevance scores, `[n_classes, n_concepts]`.
    pub gamma: Tensor,
    pub temperature: f64,
    pub lambda_lens: f64,
    /// One `n_concepts → hidden → 1` network per class.
    pub trunks: Vec<Mlp>,
}

/// Attention weights of one expert.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    /// Softmax attention, rows sum to one.
    pub alpha: Tensor,
    /// `alpha` divided by its row maximum.
    pub scaled: Tensor,
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("entropy-layer temperature must be positive, got {t}")));
    }
    Ok(())
}

impl EntropyExpert {
    pub fn new<R: Rng + ?Sized>(
        n_concepts: usize,
        n_classes: usize,
        hidden: usize,
        temperature: f64,
        lambda_lens: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_temperature(temperature)?;
        if n_concepts == 0 || n_classes < 2 || hidden == 0 {
            return Err(Error::invalid(format!(
                "expert needs concepts, at least two classes and a hidden width (got {n_concepts}, {n_classes}, {hidden})"
            )));
        }
        let gamma = Tensor::matrix(
            n_classes,
            n_concepts,
            (0..n_classes * n_concepts).map(|_| rng.random_range(-0.1..0.1)).collect(),
        )?;
        let trunks = (0..n_classes)
            .map(|_| Mlp::new(&[n_concepts, hidden, 1], Activation::Relu, Activation::Identity, rng))
            .collect::<Result<_>>()?;
        Ok(EntropyExpert { gamma, temperature, lambda_lens, trunks })
    }

    pub fn n_concepts(&self) -> usize {
        self.gamma.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.gamma.rows()
    }

    pub fn attention(&self) -> Result<Attention> {
        attention(&self.gamma, self.temperature)
    }

    /// Class logits `[n, n_classes]` for concept vectors `c: [n, n_concepts]`.
    pub fn forward(&self, c: &Tensor) -> Result<Tensor> {
        let (n, m) = c.dims2()?;
        if m != self.n_concepts() {
            return Err(Error::shape(
                "entropy_forward",
                format!("concept vectors have {m} entries, expert expects {}", self.n_concepts()),
            ));
        }
        let att = self.attention()?;
        let k = self.n_classes();
        let mut logits = Tensor::zeros(n, k);
        for (y, trunk) in self.trunks.iter().enumerate() {
            let a = att.scaled.row(y);
            let mut modulated = c.clone();
            for i in 0..n {
                for j in 0..m {
                    let v = modulated.get(i, j) * a[j];
                    modulated.set(i, j, v);
                }
            }
            let out = trunk.forward(&modulated)?;
            for i in 0..n {
                logits.set(i, y, out.get(i, 0));
            }
        }
        Ok(logits)
    }

    /// `Σ_y H(alpha_y)`, the quantity the sparsity term penalizes.
    pub fn entropy(&self) -> Result<f64> {
        let att = self.attention()?;
        let mut h = 0.0;
        for y in 0..self.n_classes() {
            for &a in att.alpha.row(y) {
                if a > 0.0 {
                    h -= a * a.ln();
                }
            }
        }
        Ok(h)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundExpert {
        BoundExpert {
            gamma: tape.param(self.gamma.clone()),
            trunks: self.trunks.iter().map(|t| t.bind(tape)).collect(),
            temperature: self.temperature,
            n_concepts: self.n_concepts(),
        }
    }

    /// Parameters in binding order: `gamma`, then each trunk.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.gamma];
        for t in &mut self.trunks {
            out.extend(t.params_mut());
        }
        out
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = vec![format!("{prefix}.gamma")];
        for (y, t) in self.trunks.iter().enumerate() {
            out.extend(t.param_names(&format!("{prefix}.trunk{y}")));
        }
        out
    }
}

/// Softmax attention of `gamma / temperature` per row and its max-rescaled form.
pub fn attention(gamma: &Tensor, temperature: f64) -> Result<Attention> {
    check_temperature(temperature)?;
    let (k, m) = gamma.dims2()?;
    let mut alpha = Vec::with_capacity(k * m);
    let mut scaled = Vec::with_capacity(k * m);
    for y in 0..k {
        let row: Vec<f64> = gamma.row(y).iter().map(|g| g / temperature).collect();
        let a = softmax(&row);
        let max = a.iter().copied().fold(0.0, f64::max);
        scaled.extend(a.iter().map(|v| v / max));
        alpha.extend(a);
    }
    Ok(Attention { alpha: Tensor::matrix(k, m, alpha)?, scaled: Tensor::matrix(k, m, scaled)? })
}

/// An [`EntropyExpert`] whose parameters live on a tape.
pub struct BoundExpert {
    gamma: Var,
    trunks: Vec<BoundMlp>,
    temperature: f64,
    n_concepts: usize,
}

impl BoundExpert {
    /// Returns `(logits, entropy)` where `entropy` is `Σ_y H(alpha_y)`.
    pub fn forward(&self, tape: &mut Tape, c: Var) -> Result<(Var, Var)> {
        let m = tape.value(c).cols();
        if m != self.n_concepts {
            return Err(Error::shape(
                "entropy_forward",
                format!("concept vectors have {m} entries, expert expects {}", self.n_concepts),
            ));
        }
        let scaled_gamma = tape.scale(self.gamma, 1.0 / self.temperature);
        let mut logits = Vec::with_capacity(self.trunks.len());
        let mut entropies = Vec::with_capacity(self.trunks.len());
        for (y, trunk) in self.trunks.iter().enumerate() {
            let g = tape.row(scaled_gamma, y)?;
            let alpha = tape.softmax_rows(g)?;
            let log_alpha = tape.log_softmax_rows(g)?;
            let plogp = tape.mul(alpha, log_alpha)?;
            entropies.push(tape.sum(plogp));
            let max = tape.max_rows(alpha)?;
            let a_tilde = tape.div_col(alpha, max)?;
            let modulated = tape.mul_row(c, a_tilde)?;
            logits.push(trunk.forward(tape, modulated)?);
        }
        let logits = tape.concat_cols(&logits)?;
        let neg_h = tape.concat_cols(&entropies)?;
        let neg_h = tape.sum(neg_h);
        Ok((logits, tape.scale(neg_h, -1.0)))
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.gamma];
        for t in &self.trunks {
            out.extend(t.vars());
        }
        out
    }
}
