//! The learnable pieces: blackbox, concept projector, selectors, entropy
//! experts and the metadata normalization layer.

pub mod blackbox;
pub mod entropy;
pub mod mdn;
pub mod projector;
pub mod selector;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use blackbox::{accuracy, fine_tune_with_mdn, train_blackbox, Blackbox, BlackboxConfig, EpochRecord};
pub use entropy::{attention, Attention, BoundExpert, EntropyExpert};
pub use mdn::{mdn_infer, mdn_normalize, mdn_normalize_with, MdnMode, MdnState, MDN_RIDGE};
pub use projector::{fit_probes, gate_mask, Projector, ProjectorConfig};
pub use selector::Selector;

use crate::datagen::{Dataset, Split};
use crate::error::Result;

/// Trains the concept projector on Φ of the training split and gates it on
/// the validation split.
pub fn train_projector(bb: &Blackbox, ds: &Dataset, cfg: &ProjectorConfig) -> Result<Projector> {
    let train = ds.indices(Split::Train);
    let val = ds.indices(Split::Val);
    let all: Vec<usize> = (0..ds.n_concepts).collect();
    fit_probes(
        &bb.represent_rows(ds, &train)?,
        &ds.concept_matrix(&train, &all),
        &bb.represent_rows(ds, &val)?,
        &ds.concept_matrix(&val, &all),
        cfg,
    )
}

/// Writes a component as pretty JSON.
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}
