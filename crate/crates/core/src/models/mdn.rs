//! Metadata normalization: regress a layer's activations on observed metadata
//! and subtract the metadata-explained part.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::linalg;

/// Ridge added to the metadata Gram matrix when it is singular.
pub const MDN_RIDGE: f64 = 1e-6;

/// Cholesky pivots below this fraction of the largest diagonal entry count as
/// rank deficiency that the ridge does not repair.
const MIN_PIVOT: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MdnMode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdnState {
    /// Index of the layer whose pre-activation is normalized.
    pub layer_index: usize,
    pub n_meta: usize,
    /// Extra regressors fitted alongside the metadata but never subtracted.
    #[serde(default)]
    pub n_covariates: usize,
    pub width: usize,
    /// Most recent batch coefficients, `[1 + n_meta + n_covariates, width]`
    /// (row 0 = intercept, then metadata rows, then covariate rows).
    pub beta: Option<Tensor>,
    /// Exponential average of `beta`, used at inference. Fine-tuning ends by
    /// replacing it with the estimate over the whole training split.
    pub running_beta: Option<Tensor>,
    pub momentum: f64,
}

impl MdnState {
    pub fn new(layer_index: usize, n_meta: usize, width: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::invalid(format!("MDN momentum must lie in (0, 1), got {momentum}")));
        }
        if n_meta == 0 {
            return Err(Error::invalid("MDN needs at least one metadata column"));
        }
        Ok(MdnState { layer_index, n_meta, n_covariates: 0, width, beta: None, running_beta: None, momentum })
    }

    /// Also regresses on `n_covariates` extra columns during training, so the
    /// metadata coefficients only capture what the covariates do not explain.
    pub fn with_covariates(mut self, n_covariates: usize) -> Self {
        self.n_covariates = n_covariates;
        self
    }

    fn check(&self, z: &Tensor, meta: &Tensor) -> Result<usize> {
        let (n, w) = z.dims2()?;
        let (mn, mk) = meta.dims2()?;
        if w != self.width || mk != self.n_meta || mn != n {
            return Err(Error::shape(
                "mdn_normalize",
                format!(
                    "activations [{n}, {w}], metadata [{mn}, {mk}], state expects width {} and {} metadata columns",
                    self.width, self.n_meta
                ),
            ));
        }
        Ok(n)
    }
}

fn design(meta: &Tensor, covariates: Option<&Tensor>) -> Tensor {
    let (n, k) = (meta.rows(), meta.cols());
    let c = covariates.map_or(0, Tensor::cols);
    let mut data = Vec::with_capacity(n * (1 + k + c));
    for i in 0..n {
        data.push(1.0);
        data.extend_from_slice(meta.row(i));
        if let Some(cov) = covariates {
            data.extend_from_slice(cov.row(i));
        }
    }
    Tensor::matrix(n, 1 + k + c, data).expect("sized by construction")
}

/// `z - meta · beta[1..]`; the intercept row of `beta` is never subtracted.
fn subtract_meta(z: &Tensor, meta: &Tensor, beta: &Tensor) -> Tensor {
    let mut out = z.clone();
    let k = meta.cols();
    let w = z.cols();
    for i in 0..z.rows() {
        let m = meta.row(i);
        for j in 0..w {
            let mut s = 0.0;
            for (p, mv) in m.iter().enumerate().take(k) {
                s += mv * beta.get(p + 1, j);
            }
            let v = out.get(i, j) - s;
            out.set(i, j, v);
        }
    }
    out
}

/// Removes the linear effect of `meta` from `z`.
///
/// Train mode fits `beta = (XᵀX)⁻¹ Xᵀ z` with `X = [1, meta]` on this batch
/// (adding [`MDN_RIDGE`] only when `XᵀX` is singular) and folds it into the
/// running estimate; infer mode only uses the running estimate.
pub fn mdn_normalize(z: &Tensor, meta: &Tensor, state: &mut MdnState, mode: MdnMode) -> Result<Tensor> {
    mdn_normalize_with(z, meta, None, state, mode)
}

/// [`mdn_normalize`] with extra training-time regressors (for example the
/// label) whose share of `z` is kept. Inference ignores `covariates`.
pub fn mdn_normalize_with(
    z: &Tensor,
    meta: &Tensor,
    covariates: Option<&Tensor>,
    state: &mut MdnState,
    mode: MdnMode,
) -> Result<Tensor> {
    let n = state.check(z, meta)?;
    match mode {
        MdnMode::Train => {
            let n_cov = covariates.map_or(0, Tensor::cols);
            if n_cov != state.n_covariates || covariates.is_some_and(|c| c.rows() != n) {
                return Err(Error::shape(
                    "mdn_normalize",
                    format!("state expects {} covariate columns for {n} rows", state.n_covariates),
                ));
            }
            let p = state.n_meta + n_cov;
            if n < p + 2 {
                return Err(Error::invalid(format!(
                    "MDN train mode needs a batch of at least {} rows, got {n}",
                    p + 2
                )));
            }
            let x = design(meta, covariates);
            let beta = match linalg::least_squares(&x, z, 0.0, MIN_PIVOT) {
                Err(Error::RankDeficient(_)) => linalg::least_squares(&x, z, MDN_RIDGE, MIN_PIVOT),
                other => other,
            }
            .map_err(|e| match e {
                Error::RankDeficient(m) => Error::RankDeficient(format!("metadata design matrix: {m}")),
                other => other,
            })?;
            if !beta.all_finite() {
                return Err(Error::NonFinite("MDN regression coefficients".into()));
            }
            let out = subtract_meta(z, meta, &beta);
            state.running_beta = Some(match state.running_beta.take() {
                None => beta.clone(),
                Some(running) => {
                    let m = state.momentum;
                    running.zip_map(&beta, |r, b| m * r + (1.0 - m) * b)?
                }
            });
            state.beta = Some(beta);
            Ok(out)
        }
        MdnMode::Infer => mdn_infer(z, meta, state),
    }
}

/// Inference-mode normalization; never touches the state.
pub fn mdn_infer(z: &Tensor, meta: &Tensor, state: &MdnState) -> Result<Tensor> {
    state.check(z, meta)?;
    let Some(running) = &state.running_beta else {
        return Err(Error::invalid("MDN inference before any training batch"));
    };
    Ok(subtract_meta(z, meta, running))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_metadata_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = random(20, 4, &mut rng);
        let meta = Tensor::zeros(20, 1);
        let mut st = MdnState::new(0, 1, 4, 0.9).unwrap();
        let out = mdn_normalize(&z, &meta, &mut st, MdnMode::Train).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn exact_linear_dependence_is_removed() {
        let meta: Vec<f64> = (0..30).map(|i| i as f64 - 14.5).collect();
        let z = Tensor::matrix(30, 1, meta.iter().map(|m| 3.0 * m).collect()).unwrap();
        let meta = Tensor::matrix(30, 1, meta).unwrap();
        let mut st = MdnState::new(0, 1, 1, 0.9).unwrap();
        let out = mdn_normalize(&z, &meta, &mut st, MdnMode::Train).unwrap();
        let mean = out.sum() / 30.0;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 30.0;
        assert!(var < 1e-10, "{var}");
    }

    #[test]
    fn running_beta_starts_at_first_batch_then_averages() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = MdnState::new(0, 2, 3, 0.9).unwrap();
        let (z1, m1) = (random(16, 3, &mut rng), random(16, 2, &mut rng));
        mdn_normalize(&z1, &m1, &mut st, MdnMode::Train).unwrap();
        let b1 = st.beta.clone().unwrap();
        assert_eq!(st.running_beta.as_ref().unwrap(), &b1);
        let (z2, m2) = (random(16, 3, &mut rng), random(16, 2, &mut rng));
        mdn_normalize(&z2, &m2, &mut st, MdnMode::Train).unwrap();
        let b2 = st.beta.clone().unwrap();
        let expected = b1.zip_map(&b2, |a, b| 0.9 * a + 0.1 * b).unwrap();
        assert!(st.running_beta.as_ref().unwrap().max_abs_diff(&expected) < 1e-15);

        // inference uses the running estimate, not the last batch
        let frozen = st.clone();
        let out = mdn_normalize(&z2, &m2, &mut st, MdnMode::Infer).unwrap();
        assert_eq!(st, frozen);
        assert_eq!(out, subtract_meta(&z2, &m2, st.running_beta.as_ref().unwrap()));
        assert_ne!(out, subtract_meta(&z2, &m2, &b2));
    }

    #[test]
    fn infer_before_train_and_small_batches_are_rejected() {
        let mut st = MdnState::new(0, 2, 3, 0.9).unwrap();
        assert!(mdn_normalize(&Tensor::zeros(8, 3), &Tensor::zeros(8, 2), &mut st, MdnMode::Infer).is_err());
        assert!(mdn_normalize(&Tensor::zeros(3, 3), &Tensor::zeros(3, 2), &mut st, MdnMode::Train).is_err());
        assert!(mdn_normalize(&Tensor::zeros(8, 4), &Tensor::zeros(8, 2), &mut st, MdnMode::Train).is_err());
    }

    #[test]
    fn non_finite_metadata_is_rejected() {
        let mut st = MdnState::new(0, 1, 1, 0.9).unwrap();
        let mut meta = Tensor::zeros(6, 1);
        meta.set(2, 0, f64::INFINITY);
        let err = mdn_normalize(&Tensor::filled(6, 1, 1.0), &meta, &mut st, MdnMode::Train).unwrap_err();
        assert!(err.is_numerical(), "{err:?}");
    }
}
