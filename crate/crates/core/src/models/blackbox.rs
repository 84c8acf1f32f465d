//! The blackbox classifier `f = h ∘ Φ` and its training loops.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::mdn::{mdn_infer, mdn_normalize_with, MdnMode, MdnState};
use crate::datagen::{Dataset, Split};
use crate::diffcore::{apply_step, cross_entropy, Activation, Dense, Mlp, OptimKind, OptimState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlackboxConfig {
    /// Widths of Φ's hidden layers; the last one is the representation size.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimKind,
    pub weight_decay: f64,
    /// Epochs of fine-tuning once an MDN layer is inserted (at `lr / 10`).
    pub finetune_epochs: usize,
    pub mdn_momentum: f64,
    /// Regress on the label as well while fine-tuning, subtracting only the
    /// metadata share.
    pub mdn_label_covariate: bool,
}

impl Default for BlackboxConfig {
    fn default() -> Self {
        BlackboxConfig {
            hidden: vec![64, 32],
            epochs: 30,
            lr: 1e-3,
            batch_size: 64,
            optimizer: OptimKind::Adam,
            weight_decay: 0.0,
            finetune_epochs: 20,
            mdn_momentum: 0.9,
            mdn_label_covariate: true,
        }
    }
}

impl BlackboxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.len() < 2 || self.hidden.contains(&0) {
            return Err(Error::invalid(format!(
                "the feature extractor needs at least two non-empty hidden layers, got {:?}",
                self.hidden
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.mdn_momentum > 0.0 && self.mdn_momentum < 1.0) {
            return Err(Error::invalid(format!("mdn_momentum must lie in (0, 1), got {}", self.mdn_momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blackbox {
    /// Feature extractor Φ; its last layer's output is the representation.
    pub phi: Mlp,
    /// Classifier head h.
    pub head: Mlp,
    /// Normalization applied to the pre-activation of Φ's first layer.
    pub mdn: Option<MdnState>,
    /// Dataset concept columns fed to the MDN layer as metadata.
    pub meta_concepts: Vec<usize>,
    pub history: Vec<EpochRecord>,
    pub finetune_history: Vec<EpochRecord>,
}

impl Blackbox {
    pub fn init(feature_dim: usize, n_classes: usize, cfg: &BlackboxConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, "init");
        let mut dims = vec![feature_dim];
        dims.extend(&cfg.hidden);
        let phi = Mlp::new(&dims, Activation::Relu, Activation::Relu, &mut rng)?;
        let repr = *cfg.hidden.last().expect("validated");
        let head = Mlp::new(&[repr, n_classes], Activation::Identity, Activation::Identity, &mut rng)?;
        Ok(Blackbox {
            phi,
            head,
            mdn: None,
            meta_concepts: Vec::new(),
            history: Vec::new(),
            finetune_history: Vec::new(),
        })
    }

    pub fn repr_dim(&self) -> usize {
        self.phi.output_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.head.output_dim()
    }

    /// Φ(x). `meta` is required exactly when an MDN layer is present.
    pub fn represent(&self, x: &Tensor, meta: Option<&Tensor>) -> Result<Tensor> {
        let Some(state) = &self.mdn else {
            return self.phi.forward(x);
        };
        let meta =
            meta.ok_or_else(|| Error::invalid("this blackbox normalizes on metadata; pass the metadata columns"))?;
        let layers = self.phi.layers();
        if x.cols() != self.phi.input_dim() {
            return Err(Error::shape(
                "Blackbox::represent",
                format!("input has {} columns, network expects {}", x.cols(), self.phi.input_dim()),
            ));
        }
        let (affine, act) = split_activation(&layers[0]);
        let h = mdn_infer(&affine.forward(x)?, meta, state)?;
        let mut h = h.map(|v| act.apply(v));
        for layer in &layers[1..] {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn metadata(&self, ds: &Dataset, rows: &[usize]) -> Option<Tensor> {
        self.mdn.as_ref().map(|_| ds.concept_matrix(rows, &self.meta_concepts))
    }

    /// Φ for dataset rows, supplying metadata from the dataset when needed.
    pub fn represent_rows(&self, ds: &Dataset, rows: &[usize]) -> Result<Tensor> {
        let meta = self.metadata(ds, rows);
        self.represent(&ds.features(rows), meta.as_ref())
    }

    pub fn logits_rows(&self, ds: &Dataset, rows: &[usize]) -> Result<Tensor> {
        self.head.forward(&self.represent_rows(ds, rows)?)
    }

    pub fn predict_rows(&self, ds: &Dataset, rows: &[usize]) -> Result<Vec<usize>> {
        Ok(self.logits_rows(ds, rows)?.argmax_rows())
    }

    pub fn accuracy_rows(&self, ds: &Dataset, rows: &[usize]) -> Result<f64> {
        if rows.is_empty() {
            return Err(Error::invalid("accuracy on an empty set of rows"));
        }
        let pred = self.predict_rows(ds, rows)?;
        Ok(accuracy(&pred, &ds.labels_of(rows)))
    }

    /// Hash of Φ's parameters and normalization state.
    pub fn phi_hash(&self) -> Result<String> {
        crate::hashing::json_hash(&(&self.phi, &self.mdn, &self.meta_concepts))
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / pred.len() as f64
}

/// Indicator columns for classes `1..n_classes`.
fn label_covariates(labels: &[usize], n_classes: usize) -> Tensor {
    let k = n_classes.saturating_sub(1);
    let mut t = Tensor::zeros(labels.len(), k);
    for (i, &y) in labels.iter().enumerate() {
        if y > 0 {
            t.set(i, y - 1, 1.0);
        }
    }
    t
}

/// The affine part of `layer` and the activation applied after it.
fn split_activation(layer: &Dense) -> (Dense, Activation) {
    (Dense { activation: Activation::Identity, ..layer.clone() }, layer.activation)
}

fn batches(rows: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    rows.chunks(size)
}

fn check_splits(ds: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let train = ds.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("dataset has no training rows"));
    }
    Ok((train, ds.indices(Split::Val)))
}

/// Trains `f^0` with cross-entropy on the training split.
pub fn train_blackbox(ds: &Dataset, cfg: &BlackboxConfig, seed: u64) -> Result<Blackbox> {
    let (train, val) = check_splits(ds)?;
    let mut bb = Blackbox::init(ds.feature_dim(), ds.n_classes, cfg, seed)?;
    let mut shuffle = substream(seed, "shuffle");
    let mut opt = OptimState::new(cfg.optimizer, cfg.lr, cfg.weight_decay)?;
    let mut names = bb.phi.param_names("phi");
    names.extend(bb.head.param_names("head"));
    let mut order = train.clone();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for (b, rows) in batches(&order, cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let phi = bb.phi.bind(&mut tape);
            let head = bb.head.bind(&mut tape);
            let x = tape.constant(ds.features(rows));
            let h = phi.forward(&mut tape, x)?;
            let logits = head.forward(&mut tape, h)?;
            let loss = cross_entropy(&mut tape, logits, &ds.labels_of(rows))?;
            let mut vars = phi.vars();
            vars.extend(head.vars());
            let mut params = bb.phi.params_mut();
            params.extend(bb.head.params_mut());
            let value =
                apply_step(&tape, loss, &vars, &mut params, &names, &mut opt).map_err(|e| diagnose(e, epoch, b))?;
            total += value * rows.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            train_accuracy: bb.accuracy_rows(ds, &train)?,
            val_accuracy: if val.is_empty() { None } else { Some(bb.accuracy_rows(ds, &val)?) },
        };
        bb.history.push(record);
    }
    Ok(bb)
}

fn diagnose(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {batch}: {m}")),
        Error::NonFiniteGradient { name, index } => {
            Error::NonFiniteGradient { name: format!("{name} (epoch {epoch}, batch {batch})"), index }
        }
        other => other,
    }
}

/// Inserts an MDN layer after Φ's first layer and fine-tunes the layers after
/// it together with the head, at a tenth of the blackbox learning rate.
///
/// Φ's first layer is left bit-identical. The running coefficients start from
/// a fit on the whole training split, so zero epochs still yield a usable model.
pub fn fine_tune_with_mdn(
    bb: &Blackbox,
    ds: &Dataset,
    meta_concepts: &[usize],
    cfg: &BlackboxConfig,
    seed: u64,
) -> Result<Blackbox> {
    cfg.validate()?;
    if bb.mdn.is_some() {
        return Err(Error::invalid("blackbox already carries an MDN layer"));
    }
    if meta_concepts.is_empty() {
        return Err(Error::invalid("MDN fine-tuning needs at least one metadata concept"));
    }
    if let Some(bad) = meta_concepts.iter().find(|&&c| c >= ds.n_concepts) {
        return Err(Error::invalid(format!("metadata concept {bad} out of range ({} concepts)", ds.n_concepts)));
    }
    let (train, val) = check_splits(ds)?;
    let n_meta = meta_concepts.len();
    let (first, act) = split_activation(&bb.phi.layers()[0]);
    let mut post = Mlp::from_layers(bb.phi.layers()[1..].to_vec())?;
    let mut head = bb.head.clone();
    let n_cov = if cfg.mdn_label_covariate { ds.n_classes - 1 } else { 0 };
    let mut state = MdnState::new(0, n_meta, first.out_dim(), cfg.mdn_momentum)?.with_covariates(n_cov);
    let covariates =
        |rows: &[usize]| cfg.mdn_label_covariate.then(|| label_covariates(&ds.labels_of(rows), ds.n_classes));

    let z_train = first.forward(&ds.features(&train))?;
    let meta_train = ds.concept_matrix(&train, meta_concepts);
    mdn_normalize_with(&z_train, &meta_train, covariates(&train).as_ref(), &mut state, MdnMode::Train)?;

    let mut shuffle = substream(seed, "finetune");
    let mut opt = OptimState::new(cfg.optimizer, cfg.lr / 10.0, cfg.weight_decay)?;
    let mut names = post.param_names("phi_post");
    names.extend(head.param_names("head"));
    let mut order = train.clone();
    let mut out = bb.clone();
    out.meta_concepts = meta_concepts.to_vec();

    for epoch in 0..cfg.finetune_epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut seen = 0usize;
        for (b, rows) in batches(&order, cfg.batch_size).enumerate() {
            if rows.len() < n_meta + n_cov + 2 {
                continue;
            }
            let z = first.forward(&ds.features(rows))?;
            let meta = ds.concept_matrix(rows, meta_concepts);
            let z = mdn_normalize_with(&z, &meta, covariates(rows).as_ref(), &mut state, MdnMode::Train)
                .map_err(|e| diagnose(e, epoch, b))?;
            let z = z.map(|v| act.apply(v));
            let mut tape = Tape::new();
            let p = post.bind(&mut tape);
            let h = head.bind(&mut tape);
            let zv = tape.constant(z);
            let r = p.forward(&mut tape, zv)?;
            let logits = h.forward(&mut tape, r)?;
            let loss = cross_entropy(&mut tape, logits, &ds.labels_of(rows))?;
            let mut vars = p.vars();
            vars.extend(h.vars());
            let mut params = post.params_mut();
            params.extend(head.params_mut());
            total += apply_step(&tape, loss, &vars, &mut params, &names, &mut opt)
                .map_err(|e| diagnose(e, epoch, b))?
                * rows.len() as f64;
            seen += rows.len();
        }
        let mut layers = vec![bb.phi.layers()[0].clone()];
        layers.extend(post.layers().iter().cloned());
        out.phi = Mlp::from_layers(layers)?;
        out.head = head.clone();
        out.mdn = Some(state.clone());
        let record = EpochRecord {
            epoch,
            train_loss: total / seen.max(1) as f64,
            train_accuracy: out.accuracy_rows(ds, &train)?,
            val_accuracy: if val.is_empty() { None } else { Some(out.accuracy_rows(ds, &val)?) },
        };
        out.finetune_history.push(record);
    }
    // Inference uses the full-split estimate.
    state.running_beta = None;
    mdn_normalize_with(&z_train, &meta_train, covariates(&train).as_ref(), &mut state, MdnMode::Train)?;
    let mut layers = vec![bb.phi.layers()[0].clone()];
    layers.extend(post.layers().iter().cloned());
    out.phi = Mlp::from_layers(layers)?;
    out.head = head;
    out.mdn = Some(state);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, LabelRule, ShortcutSpec};

    fn small_spec() -> ShortcutSpec {
        ShortcutSpec {
            n_samples: 600,
            n_core_concepts: 3,
            n_spurious_concepts: 1,
            feature_dim: 8,
            label_rule: LabelRule::Concept { index: 0 },
            noise_std: 0.0,
            core_scale: 1.5,
            spurious_scale: 0.2,
            train_correlation: 0.5,
            ..ShortcutSpec::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = generate(&small_spec()).unwrap().dataset;
        let cfg = BlackboxConfig { epochs: 0, ..BlackboxConfig::default() };
        let bb = train_blackbox(&ds, &cfg, 3).unwrap();
        assert_eq!(bb, Blackbox::init(8, 2, &cfg, 3).unwrap());
    }

    #[test]
    fn separable_data_is_learned() {
        let ds = generate(&small_spec()).unwrap().dataset;
        let cfg = BlackboxConfig { epochs: 40, ..BlackboxConfig::default() };
        let bb = train_blackbox(&ds, &cfg, 1).unwrap();
        assert_eq!(bb.history.len(), 40);
        let val = bb.history.last().unwrap().val_accuracy.unwrap();
        assert!(val >= 0.99, "{val}");
    }

    #[test]
    fn training_is_deterministic() {
        let ds = generate(&small_spec()).unwrap().dataset;
        let cfg = BlackboxConfig { epochs: 2, ..BlackboxConfig::default() };
        assert_eq!(train_blackbox(&ds, &cfg, 5).unwrap(), train_blackbox(&ds, &cfg, 5).unwrap());
    }

    #[test]
    fn zero_metadata_and_zero_epochs_keep_predictions() {
        let mut ds = generate(&small_spec()).unwrap().dataset;
        let cfg = BlackboxConfig { epochs: 3, finetune_epochs: 0, ..BlackboxConfig::default() };
        let bb = train_blackbox(&ds, &cfg, 2).unwrap();
        // blank out one concept column to act as a dummy metadata signal
        let k = ds.n_concepts;
        for i in 0..ds.len() {
            ds.concepts[i * k + 1] = 0;
        }
        let tuned = fine_tune_with_mdn(&bb, &ds, &[1], &cfg, 2).unwrap();
        let rows: Vec<usize> = (0..ds.len()).collect();
        let before = bb.logits_rows(&ds, &rows).unwrap();
        let after = tuned.logits_rows(&ds, &rows).unwrap();
        assert!(before.max_abs_diff(&after) < 1e-6);
        assert_eq!(tuned.phi.layers()[0], bb.phi.layers()[0]);
    }

    #[test]
    fn fine_tune_keeps_first_layer_and_needs_metadata() {
        let ds = generate(&small_spec()).unwrap().dataset;
        let cfg = BlackboxConfig { epochs: 2, finetune_epochs: 2, ..BlackboxConfig::default() };
        let bb = train_blackbox(&ds, &cfg, 2).unwrap();
        assert!(fine_tune_with_mdn(&bb, &ds, &[], &cfg, 2).is_err());
        let tuned = fine_tune_with_mdn(&bb, &ds, &[3], &cfg, 2).unwrap();
        assert_eq!(tuned.phi.layers()[0], bb.phi.layers()[0]);
        assert_ne!(tuned.phi.layers()[1], bb.phi.layers()[1]);
        assert_eq!(tuned.finetune_history.len(), 2);
        assert!(tuned.represent(&ds.features(&[0, 1]), None).is_err());
        assert!(fine_tune_with_mdn(&tuned, &ds, &[3], &cfg, 2).is_err());
    }
}
