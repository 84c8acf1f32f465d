//! Concept projector: one logistic probe per concept on blackbox features.

use serde::{Deserialize, Serialize};

use crate::diffcore::{bce_with_logits, sigmoid, OptimState, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    /// Minimum validation accuracy for a concept to be used downstream.
    pub gate: f64,
    /// Full-batch optimizer steps.
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig { gate: 0.7, steps: 300, lr: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    /// Probe weights, one column per concept: `[repr_dim, n_concepts]`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub val_accuracy: Vec<f64>,
    pub gate: f64,
    pub included: Vec<bool>,
}

impl Projector {
    /// Builds a projector and derives the mask from `val_accuracy` and `gate`.
    pub fn from_parts(weight: Tensor, bias: Tensor, val_accuracy: Vec<f64>, gate: f64) -> Result<Self> {
        let (_, k) = weight.dims2()?;
        if bias.shape() != [1, k] || val_accuracy.len() != k {
            return Err(Error::shape(
                "Projector::from_parts",
                format!("{k} probes, bias {:?}, {} scores", bias.shape(), val_accuracy.len()),
            ));
        }
        let included = gate_mask(&val_accuracy, gate);
        Ok(Projector { weight, bias, val_accuracy, gate, included })
    }

    pub fn repr_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn n_concepts(&self) -> usize {
        self.weight.cols()
    }

    /// Dataset concept indices of the included concepts, in order.
    pub fn included_indices(&self) -> Vec<usize> {
        self.included.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    /// Probabilities for every concept, `[n, n_concepts]`.
    pub fn probabilities(&self, phi_x: &Tensor) -> Result<Tensor> {
        let (_, d) = phi_x.dims2()?;
        if d != self.repr_dim() {
            return Err(Error::shape(
                "project",
                format!("features have {d} columns, projector expects {}", self.repr_dim()),
            ));
        }
        let mut z = phi_x.matmul(&self.weight)?;
        let k = z.cols();
        let b = self.bias.data();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v = sigmoid(*v + b[i % k]);
        }
        Ok(z)
    }

    /// Probabilities for the included concepts only, in index order.
    pub fn project(&self, phi_x: &Tensor) -> Result<Tensor> {
        Ok(self.probabilities(phi_x)?.select_cols(&self.included_indices()))
    }

    /// Accuracy of each probe on `(phi_x, concepts)` with a 0.5 cut.
    pub fn accuracy(&self, phi_x: &Tensor, concepts: &Tensor) -> Result<Vec<f64>> {
        let p = self.probabilities(phi_x)?;
        probe_accuracy(&p, concepts)
    }
}

pub fn gate_mask(scores: &[f64], gate: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= gate).collect()
}

fn probe_accuracy(p: &Tensor, concepts: &Tensor) -> Result<Vec<f64>> {
    if p.shape() != concepts.shape() {
        return Err(Error::shape("probe_accuracy", format!("{:?} vs {:?}", p.shape(), concepts.shape())));
    }
    let (n, k) = p.dims2()?;
    if n == 0 {
        return Err(Error::invalid("probe accuracy on an empty set"));
    }
    Ok((0..k)
        .map(|j| {
            let hits = (0..n).filter(|&i| (p.get(i, j) >= 0.5) == (concepts.get(i, j) >= 0.5)).count();
            hits as f64 / n as f64
        })
        .collect())
}

/// Trains independent logistic probes from features to binary concepts and
/// scores them on the validation pair.
pub fn fit_probes(
    train_x: &Tensor,
    train_c: &Tensor,
    val_x: &Tensor,
    val_c: &Tensor,
    cfg: &ProjectorConfig,
) -> Result<Projector> {
    let (n, d) = train_x.dims2()?;
    let (cn, k) = train_c.dims2()?;
    if cn != n {
        return Err(Error::shape("train_projector", format!("{n} feature rows vs {cn} concept rows")));
    }
    if n == 0 || val_x.rows() == 0 {
        return Err(Error::invalid("projector needs non-empty train and validation splits"));
    }
    let mut weight = Tensor::zeros(d, k);
    let mut bias = Tensor::zeros(1, k);
    let mut opt = OptimState::adam(cfg.lr)?;
    let names = vec!["projector.weight".to_string(), "projector.bias".to_string()];
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.constant(train_x.clone());
        let w = tape.param(weight.clone());
        let b = tape.param(bias.clone());
        let z = tape.matmul(x, w)?;
        let z = tape.add_row(z, b)?;
        let per = bce_with_logits(&mut tape, z, train_c)?;
        // Summing over concepts keeps each probe's gradient independent of the others.
        let total = tape.sum(per);
        let loss = tape.scale(total, 1.0 / n as f64);
        let grads = tape.backward(loss).map_err(|e| Error::NonFinite(format!("projector step {step}: {e}")))?;
        let grads = grads.collect(&[w, b], &tape);
        opt.step(&mut [&mut weight, &mut bias], &grads, &names)?;
    }
    let probe = Projector::from_parts(weight, bias, vec![0.0; k], cfg.gate)?;
    let scores = probe.accuracy(val_x, val_c)?;
    let proj = Projector::from_parts(probe.weight, probe.bias, scores, cfg.gate)?;
    if proj.included.iter().all(|b| !b) {
        return Err(Error::Degenerate(format!(
            "no concept reaches the validation gate {} (best {:.3}); lower the gate or inspect the feature extractor",
            cfg.gate,
            proj.val_accuracy.iter().copied().fold(0.0, f64::max)
        )));
    }
    Ok(proj)
}
