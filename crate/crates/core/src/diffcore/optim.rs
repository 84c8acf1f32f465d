use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimizer state for one group of parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimState {
    kind: OptimKind,
    lr: f64,
    weight_decay: f64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    steps: u64,
}

impl OptimState {
    pub fn new(kind: OptimKind, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        Ok(OptimState { kind, lr, weight_decay, first_moment: Vec::new(), second_moment: Vec::new(), steps: 0 })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimKind::Sgd, lr, 0.0)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimKind::Adam, lr, 0.0)
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `names` label the parameters in error messages and
    /// may be shorter than `params` (missing names fall back to the index).
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "OptimState::step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "OptimState::step",
                    format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("param{i}"));
                return Err(Error::NonFiniteGradient { name, index });
            }
        }

        if self.kind == OptimKind::Adam && self.first_moment.len() != params.len() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.second_moment = self.first_moment.clone();
        }
        self.steps += 1;

        match self.kind {
            OptimKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * (gv + self.weight_decay * *w);
                    }
                }
            }
            OptimKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for ((p, g), (m, v)) in
                    params.iter_mut().zip(grads).zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
                {
                    let md = m.data_mut();
                    let vd = v.data_mut();
                    for (k, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gv = gv + self.weight_decay * *w;
                        md[k] = BETA1 * md[k] + (1.0 - BETA1) * gv;
                        vd[k] = BETA2 * vd[k] + (1.0 - BETA2) * gv * gv;
                        let mhat = md[k] / c1;
                        let vhat = vd[k] / c2;
                        *w -= self.lr * mhat / (vhat.sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_step() {
        let mut opt = OptimState::sgd(0.1).unwrap();
        let mut p = Tensor::scalar(1.0);
        opt.step(&mut [&mut p], &[Tensor::scalar(1.0)], &[]).unwrap();
        assert!((p.item().unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        for kind in [OptimKind::Sgd, OptimKind::Adam] {
            let mut opt = OptimState::new(kind, 0.01, 0.0).unwrap();
            let mut p = Tensor::matrix(1, 3, vec![0.5, -2.0, 3.0]).unwrap();
            let before = p.clone();
            for _ in 0..5 {
                opt.step(&mut [&mut p], &[Tensor::zeros(1, 3)], &[]).unwrap();
            }
            assert!(p.max_abs_diff(&before) <= 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn sgd_on_quadratic_decays_geometrically() {
        // d/dp p^2 = 2p, so p <- 0.8 p
        let mut opt = OptimState::sgd(0.1).unwrap();
        let mut p = Tensor::scalar(1.0);
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * p.item().unwrap());
            opt.step(&mut [&mut p], &[g], &[]).unwrap();
        }
        let v = p.item().unwrap();
        assert!(v.abs() < 1e-9);
        assert!((v - 0.8f64.powi(100)).abs() < 1e-20);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut opt = OptimState::adam(0.01).unwrap();
        let mut a = Tensor::zeros(1, 2);
        let mut b = Tensor::zeros(1, 2);
        let grads = [Tensor::zeros(1, 2), Tensor::matrix(1, 2, vec![0.0, f64::NAN]).unwrap()];
        let err = opt.step(&mut [&mut a, &mut b], &grads, &["head.w".into(), "head.b".into()]).unwrap_err();
        match err {
            Error::NonFiniteGradient { name, index } => {
                assert_eq!(name, "head.b");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn rejects_bad_learning_rate() {
        assert!(OptimState::sgd(0.0).is_err());
        assert!(OptimState::adam(-1.0).is_err());
    }
}
