use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use moie_core::carve::CarveConfig;
use moie_core::datagen::ShortcutSpec;
use moie_core::models::BlackboxConfig;
use moie_core::shortcut::ShortcutConfig;
use serde::{Deserialize, Serialize};

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generate a synthetic shortcut dataset into the run directory.
    Spec(ShortcutSpec),
    /// Use an existing CSV; its JSON sidecar must sit next to it.
    Path(PathBuf),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Spec(ShortcutSpec::default())
    }
}

/// Everything a run needs. Written verbatim into the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub blackbox: BlackboxConfig,
    pub carve: CarveConfig,
    pub shortcut: ShortcutConfig,
    pub out: PathBuf,
    /// Root seed. Overrides the dataset and carve seeds.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSource::default(),
            blackbox: BlackboxConfig::default(),
            carve: CarveConfig::default(),
            shortcut: ShortcutConfig::default(),
            out: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Copy with `seed` as the root seed, pushed into every seeded component.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.carve.seed = seed;
        if let DatasetSource::Spec(spec) = &mut cfg.dataset {
            spec.seed = seed;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Spec(spec) = &self.dataset {
            spec.validate()?;
        }
        self.blackbox.validate()?;
        self.carve.validate()?;
        self.shortcut.validate()?;
        Ok(())
    }
}

/// Inclusive seed range written `A..B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedRange {
    pub first: u64,
    pub last: u64,
}

impl SeedRange {
    pub fn seeds(self) -> Vec<u64> {
        (self.first..=self.last).collect()
    }
}

impl FromStr for SeedRange {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let Some((a, b)) = s.split_once("..") else {
            bail!("expected a seed range like 0..4, got `{s}`");
        };
        let first: u64 = a.trim().parse().with_context(|| format!("bad range start `{a}`"))?;
        let last: u64 = b.trim().parse().with_context(|| format!("bad range end `{b}`"))?;
        if first > last {
            bail!("seed range {first}..{last} is empty");
        }
        Ok(SeedRange { first, last })
    }
}

impl fmt::Display for SeedRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.first, self.last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!("0..4".parse::<SeedRange>().unwrap().seeds(), vec![0, 1, 2, 3, 4]);
        assert_eq!("7..7".parse::<SeedRange>().unwrap().seeds(), vec![7]);
        assert!("4..0".parse::<SeedRange>().is_err());
        assert!("3".parse::<SeedRange>().is_err());
        assert!("a..2".parse::<SeedRange>().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"carve": {"tua": [0.5]}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"dataset": {"spec": {"n_sample": 10}}}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 3, "carve": {"k": 2}}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.carve.k, 2);
    }

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig::default().with_seed(5);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn root_seed_reaches_components() {
        let cfg = RunConfig::default().with_seed(9);
        assert_eq!(cfg.carve.seed, 9);
        let DatasetSource::Spec(spec) = &cfg.dataset else { panic!("default source is a spec") };
        assert_eq!(spec.seed, 9);
    }
}
