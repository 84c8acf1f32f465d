//! Synthetic concept-annotated datasets with a planted spurious concept.
//!
//! Labels are a boolean function of the *core* concepts. The first spurious
//! concept agrees with the label with a per-split probability (high in train,
//! 0.5 in val/test), so a learner that leans on it does well in training and
//! badly on the groups where it disagrees with the label. Features are a
//! seeded linear mixture of all concepts plus Gaussian noise.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Boolean function of the core concepts that defines the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LabelRule {
    /// Class 1 iff strictly more than half of the core concepts are on.
    Majority,
    /// Class 1 iff an odd number of core concepts are on.
    Parity,
    /// Class 1 iff at least `k` core concepts are on.
    AtLeast { k: usize },
    /// Class 1 iff core concept `index` is on.
    Concept { index: usize },
    /// Explicit truth table indexed by the core concepts read as a
    /// little-endian bit pattern.
    Table { outputs: Vec<u8> },
}

impl LabelRule {
    pub fn eval(&self, core: &[u8]) -> usize {
        let on = core.iter().filter(|&&c| c == 1).count();
        match self {
            LabelRule::Majority => usize::from(2 * on > core.len()),
            LabelRule::Parity => on % 2,
            LabelRule::AtLeast { k } => usize::from(on >= *k),
            LabelRule::Concept { index } => usize::from(core.get(*index) == Some(&1)),
            LabelRule::Table { outputs } => {
                let idx = core.iter().enumerate().fold(0usize, |acc, (i, &c)| acc | ((c as usize) << i));
                usize::from(outputs.get(idx).copied().unwrap_or(0) == 1)
            }
        }
    }

    /// Rejects rules that are constant over the whole hypercube.
    pub fn validate(&self, n_core: usize) -> Result<()> {
        if n_core == 0 || n_core > 24 {
            return Err(Error::invalid(format!("label rules need 1..=24 core concepts, got {n_core}")));
        }
        match self {
            LabelRule::Concept { index } if *index >= n_core => {
                return Err(Error::invalid(format!("label rule reads core concept {index} but only {n_core} exist")));
            }
            LabelRule::Table { outputs } if outputs.len() != 1 << n_core => {
                return Err(Error::invalid(format!(
                    "truth table has {} entries, expected {}",
                    outputs.len(),
                    1usize << n_core
                )));
            }
            _ => {}
        }
        let mut seen = [false; 2];
        let mut bits = vec![0u8; n_core];
        for pattern in 0..(1usize << n_core) {
            for (i, b) in bits.iter_mut().enumerate() {
                *b = ((pattern >> i) & 1) as u8;
            }
            seen[self.eval(&bits)] = true;
            if seen[0] && seen[1] {
                return Ok(());
            }
        }
        Err(Error::Degenerate(format!(
            "label rule {self:?} is constant over all {} core-concept patterns",
            1usize << n_core
        )))
    }
}

/// Parameters of the synthetic shortcut dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShortcutSpec {
    pub n_samples: usize,
    pub n_core_concepts: usize,
    pub n_spurious_concepts: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    /// P(spurious concept == label) in the train split, drawn independently per
    /// spurious concept.
    pub train_correlation: f64,
    /// Same probability in the val and test splits.
    pub test_correlation: f64,
    pub label_rule: LabelRule,
    pub noise_std: f64,
    pub split_fractions: [f64; 3],
    /// Norm scale of the mixing columns for core concepts.
    pub core_scale: f64,
    /// Norm scale of the mixing columns for spurious concepts.
    pub spurious_scale: f64,
    pub seed: u64,
}

impl Default for ShortcutSpec {
    fn default() -> Self {
        ShortcutSpec {
            n_samples: 12_000,
            n_core_concepts: 8,
            n_spurious_concepts: 2,
            n_classes: 2,
            feature_dim: 32,
            train_correlation: 0.95,
            test_correlation: 0.5,
            label_rule: LabelRule::Majority,
            noise_std: 0.05,
            split_fractions: [0.7, 0.1, 0.2],
            core_scale: 0.5,
            spurious_scale: 4.0,
            seed: 0,
        }
    }
}

impl ShortcutSpec {
    pub fn n_concepts(&self) -> usize {
        self.n_core_concepts + self.n_spurious_concepts
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes != 2 {
            return Err(Error::invalid("the shortcut generator only produces 2 classes"));
        }
        if self.feature_dim < self.n_concepts() + 1 {
            return Err(Error::invalid(format!(
                "feature_dim {} must be at least n_concepts + 1 = {}",
                self.feature_dim,
                self.n_concepts() + 1
            )));
        }
        for (name, rho) in [("train_correlation", self.train_correlation), ("test_correlation", self.test_correlation)]
        {
            if !(0.5..=1.0).contains(&rho) {
                return Err(Error::invalid(format!("{name} must lie in [0.5, 1], got {rho}")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.core_scale > 0.0 && self.spurious_scale > 0.0) {
            return Err(Error::invalid("mixing scales must be positive"));
        }
        validate_fractions(self.split_fractions)?;
        self.label_rule.validate(self.n_core_concepts)
    }

    pub fn concept_names(&self) -> Vec<String> {
        (0..self.n_core_concepts)
            .map(|i| format!("core_{i}"))
            .chain((0..self.n_spurious_concepts).map(|i| format!("spurious_{i}")))
            .collect()
    }
}

fn validate_fractions(f: [f64; 3]) -> Result<()> {
    if f.iter().any(|&v| !(v > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions must be positive and sum to 1, got {f:?}")));
    }
    Ok(())
}

/// Concept-annotated classification data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Tensor,
    /// Row-major `[n, n_concepts]` binary concept annotations.
    pub concepts: Vec<u8>,
    pub n_concepts: usize,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub splits: Vec<Split>,
    pub concept_names: Vec<String>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn concept(&self, row: usize, j: usize) -> u8 {
        self.concepts[row * self.n_concepts + j]
    }

    pub fn concept_row(&self, row: usize) -> &[u8] {
        &self.concepts[row * self.n_concepts..(row + 1) * self.n_concepts]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.iter().copied().max().map_or(0, |g| g + 1)
    }

    /// Concept columns `cols` for `rows`, as `[rows, cols]` reals.
    pub fn concept_matrix(&self, rows: &[usize], cols: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            data.extend(cols.iter().map(|&c| f64::from(self.concept(r, c))));
        }
        Tensor::matrix(rows.len(), cols.len(), data).expect("sized by construction")
    }

    pub fn features(&self, rows: &[usize]) -> Tensor {
        self.x.select_rows(rows)
    }

    pub fn labels_of(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }

    pub fn groups_of(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.groups[r]).collect()
    }

    /// Rows `[n, group]` counts per split.
    pub fn group_table(&self) -> Vec<(Split, Vec<usize>)> {
        let ng = self.n_groups().max(2 * self.n_classes);
        Split::ALL
            .iter()
            .map(|&s| {
                let mut counts = vec![0; ng];
                for i in self.indices(s) {
                    counts[self.groups[i]] += 1;
                }
                (s, counts)
            })
            .collect()
    }

    pub fn hash(&self) -> Result<String> {
        crate::hashing::json_hash(self)
    }
}

/// Everything about a generated dataset that is not needed to train on it.
///
/// The spurious mask lives here and never in [`Dataset`], so code that only
/// receives a `Dataset` cannot peek at which concepts were planted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: Option<ShortcutSpec>,
    pub concept_names: Vec<String>,
    pub spurious_mask: Vec<bool>,
    /// `[feature_dim, n_concepts + 1]`, last column is the intercept.
    pub mixing: Option<Tensor>,
    pub n_classes: usize,
}

impl Sidecar {
    pub fn spurious_indices(&self) -> Vec<usize> {
        self.spurious_mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn core_indices(&self) -> Vec<usize> {
        self.spurious_mask.iter().enumerate().filter(|(_, &m)| !m).map(|(i, _)| i).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: Dataset,
    pub sidecar: Sidecar,
}

/// Exact split sizes for `n` items: floors plus largest remainders.
fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = (r + 1e-9).floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - counts[a] as f64;
        let fb = raw[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn random_mixing(spec: &ShortcutSpec, rng: &mut impl Rng) -> Result<Tensor> {
    let d = spec.feature_dim;
    let k = spec.n_concepts();
    let col_scale = |j: usize| {
        if j < spec.n_core_concepts {
            spec.core_scale
        } else if j < k {
            spec.spurious_scale
        } else {
            1.0
        }
    };
    for _ in 0..16 {
        let mut a = Tensor::zeros(d, k + 1);
        for i in 0..d {
            for j in 0..=k {
                let z: f64 = StandardNormal.sample(rng);
                a.set(i, j, z * col_scale(j) / (d as f64).sqrt());
            }
        }
        if linalg::cholesky(&linalg::gram(&a), 1e-8).is_ok() {
            return Ok(a);
        }
    }
    Err(Error::Degenerate("could not draw a full-column-rank mixing matrix".into()))
}

/// Draws a dataset from `spec`. Deterministic in `spec.seed`.
pub fn generate(spec: &ShortcutSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = substream(spec.seed, "data");
    let n = spec.n_samples;
    let k = spec.n_concepts();
    let n_core = spec.n_core_concepts;

    let mut concepts = vec![0u8; n * k];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let row = &mut concepts[i * k..i * k + n_core];
        for c in row.iter_mut() {
            *c = u8::from(rng.random_bool(0.5));
        }
        labels.push(spec.label_rule.eval(row));
    }

    let counts = split_counts(n, spec.split_fractions);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Train; n];
    for (pos, &i) in order.iter().enumerate() {
        splits[i] = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut groups = Vec::with_capacity(n);
    for i in 0..n {
        let rho = match splits[i] {
            Split::Train => spec.train_correlation,
            Split::Val | Split::Test => spec.test_correlation,
        };
        for s in 0..spec.n_spurious_concepts {
            let v = if rng.random_bool(rho) { labels[i] } else { 1 - labels[i] };
            concepts[i * k + n_core + s] = v as u8;
        }
        groups.push(if spec.n_spurious_concepts > 0 {
            labels[i] * 2 + concepts[i * k + n_core] as usize
        } else {
            labels[i]
        });
    }

    let mixing = random_mixing(spec, &mut rng)?;
    let noise =
        Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
    let d = spec.feature_dim;
    let mut x = Tensor::zeros(n, d);
    for i in 0..n {
        for r in 0..d {
            let mut v = mixing.get(r, k);
            for j in 0..k {
                if concepts[i * k + j] == 1 {
                    v += mixing.get(r, j);
                }
            }
            if spec.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            x.set(i, r, v);
        }
    }

    let concept_names = spec.concept_names();
    let spurious_mask = (0..k).map(|j| j >= n_core).collect();
    Ok(Generated {
        dataset: Dataset {
            x,
            concepts,
            n_concepts: k,
            labels,
            groups,
            splits,
            concept_names: concept_names.clone(),
            n_classes: spec.n_classes,
        },
        sidecar: Sidecar {
            spec: Some(spec.clone()),
            concept_names,
            spurious_mask,
            mixing: Some(mixing),
            n_classes: spec.n_classes,
        },
    })
}

/// Reassigns splits, stratified by group id.
///
/// Each group is shuffled and cut at its exact proportional sizes (floors plus
/// largest remainders), so no split count is off by more than one.
pub fn split_dataset(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Dataset> {
    validate_fractions(fractions)?;
    let mut rng = substream(seed, "split");
    let mut out = ds.clone();
    for g in 0..ds.n_groups() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.groups[i] == g).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(Error::invalid(format!(
                "group {g} has {} members; stratified splitting needs at least 3",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let counts = split_counts(members.len(), fractions);
        for (pos, &i) in members.iter().enumerate() {
            out.splits[i] = if pos < counts[0] {
                Split::Train
            } else if pos < counts[0] + counts[1] {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

/// Path of the JSON sidecar that accompanies `csv_path`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `x0..x{d-1},c0..c{k-1},y,g,split` rows.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = ds.feature_dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.extend((0..ds.n_concepts).map(|j| format!("c{j}")));
    header.extend(["y", "g", "split"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    let mut line = String::new();
    for i in 0..ds.len() {
        line.clear();
        for v in ds.x.row(i) {
            line.push_str(&format!("{v},"));
        }
        for &c in ds.concept_row(i) {
            line.push_str(&format!("{c},"));
        }
        line.push_str(&format!("{},{},{}", ds.labels[i], ds.groups[i], ds.splits[i]));
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_sidecar(sidecar: &Sidecar, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn load_sidecar(path: &Path) -> Result<Sidecar> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn parse_header(fields: &csv::StringRecord) -> Result<(usize, usize)> {
    let cols: Vec<&str> = fields.iter().collect();
    let d = cols.iter().take_while(|c| c.starts_with('x')).count();
    for (i, c) in cols[..d].iter().enumerate() {
        if *c != format!("x{i}") {
            return Err(Error::Csv { line: 1, message: format!("expected feature column `x{i}`, found `{c}`") });
        }
    }
    let rest = &cols[d..];
    let k = rest.iter().take_while(|c| c.starts_with('c')).count();
    for (j, c) in rest[..k].iter().enumerate() {
        if *c != format!("c{j}") {
            return Err(Error::Csv {
                line: 1,
                message: format!("missing concept column `c{j}` (found `{c}` in its place)"),
            });
        }
    }
    let tail = &rest[k..];
    if tail != ["y", "g", "split"] {
        return Err(Error::Csv {
            line: 1,
            message: format!("expected trailing columns `y,g,split`, found `{}`", tail.join(",")),
        });
    }
    Ok((d, k))
}

/// Reads a dataset written by [`save_csv`]. Concept names and class count come
/// from the sidecar when one sits next to the file.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Csv { line: 1, message: e.to_string() })?;
    let header = rdr.headers().map_err(|e| Error::Csv { line: 1, message: e.to_string() })?.clone();
    let (d, k) = parse_header(&header)?;
    let width = d + k + 3;

    let mut xs = Vec::new();
    let mut concepts = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut splits = Vec::new();
    for (row_no, rec) in rdr.records().enumerate() {
        let line = row_no as u64 + 2;
        let rec = rec.map_err(|e| Error::Csv { line, message: e.to_string() })?;
        if rec.len() != width {
            return Err(Error::Csv { line, message: format!("expected {width} fields, found {}", rec.len()) });
        }
        let bad = |what: &str, v: &str| Error::Csv { line, message: format!("invalid {what} `{v}`") };
        for v in rec.iter().take(d) {
            xs.push(v.trim().parse::<f64>().map_err(|_| bad("feature", v))?);
        }
        for v in rec.iter().skip(d).take(k) {
            match v.trim() {
                "0" => concepts.push(0),
                "1" => concepts.push(1),
                other => return Err(bad("concept value", other)),
            }
        }
        labels.push(rec[d + k].trim().parse::<usize>().map_err(|_| bad("label", &rec[d + k]))?);
        groups.push(rec[d + k + 1].trim().parse::<usize>().map_err(|_| bad("group", &rec[d + k + 1]))?);
        splits.push(rec[d + k + 2].trim().parse::<Split>().map_err(|_| bad("split", &rec[d + k + 2]))?);
    }
    let n = labels.len();
    let sidecar = sidecar_path(path);
    let (concept_names, n_classes) = if sidecar.exists() {
        let sc = load_sidecar(&sidecar)?;
        if sc.concept_names.len() != k {
            return Err(Error::invalid(format!(
                "sidecar names {} concepts but the csv has {k}",
                sc.concept_names.len()
            )));
        }
        (sc.concept_names, sc.n_classes)
    } else {
        ((0..k).map(|j| format!("c{j}")).collect(), labels.iter().max().map_or(2, |m| m + 1).max(2))
    };
    Ok(Dataset {
        x: Tensor::matrix(n, d, xs)?,
        concepts,
        n_concepts: k,
        labels,
        groups,
        splits,
        concept_names,
        n_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ShortcutSpec {
        ShortcutSpec { n_samples: 600, ..ShortcutSpec::default() }
    }

    #[test]
    fn full_correlation_copies_label_in_train() {
        let spec = ShortcutSpec { train_correlation: 1.0, ..small_spec() };
        let g = generate(&spec).unwrap();
        let ds = &g.dataset;
        let s0 = spec.n_core_concepts;
        for i in ds.indices(Split::Train) {
            assert_eq!(ds.concept(i, s0) as usize, ds.labels[i]);
        }
    }

    #[test]
    fn half_correlation_concentrates_on_test() {
        let spec = ShortcutSpec { n_samples: 10_000, test_correlation: 0.5, ..ShortcutSpec::default() };
        let g = generate(&spec).unwrap();
        let ds = &g.dataset;
        let test = ds.indices(Split::Test);
        let agree = test.iter().filter(|&&i| ds.concept(i, spec.n_core_concepts) as usize == ds.labels[i]).count()
            as f64
            / test.len() as f64;
        assert!((0.48..=0.52).contains(&agree), "{agree}");
    }

    #[test]
    fn noiseless_features_follow_mixing_matrix() {
        let spec = ShortcutSpec { noise_std: 0.0, ..small_spec() };
        let g = generate(&spec).unwrap();
        let a = g.sidecar.mixing.as_ref().unwrap();
        let ds = &g.dataset;
        let k = ds.n_concepts;
        for i in 0..ds.len() {
            let mut c: Vec<f64> = ds.concept_row(i).iter().map(|&v| f64::from(v)).collect();
            c.push(1.0);
            let c = Tensor::matrix(k + 1, 1, c).unwrap();
            let x = a.matmul(&c).unwrap();
            for r in 0..ds.feature_dim() {
                assert!((x.get(r, 0) - ds.x.get(i, r)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec()).unwrap().dataset;
        let b = generate(&small_spec()).unwrap().dataset;
        assert_eq!(a, b);
        let c = generate(&ShortcutSpec { seed: 1, ..small_spec() }).unwrap().dataset;
        assert_ne!(a, c);
    }

    #[test]
    fn constant_label_rule_is_rejected() {
        let spec = ShortcutSpec { label_rule: LabelRule::AtLeast { k: 0 }, ..small_spec() };
        assert!(matches!(generate(&spec), Err(Error::Degenerate(_))));
        let table = LabelRule::Table { outputs: vec![1; 256] };
        assert!(matches!(table.validate(8), Err(Error::Degenerate(_))));
    }

    #[test]
    fn majority_breaks_ties_to_class_zero() {
        assert_eq!(LabelRule::Majority.eval(&[1, 1, 0, 0]), 0);
        assert_eq!(LabelRule::Majority.eval(&[1, 1, 1, 0]), 1);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate(&ShortcutSpec { train_correlation: 0.4, ..small_spec() }).is_err());
        assert!(generate(&ShortcutSpec { feature_dim: 5, ..small_spec() }).is_err());
        assert!(generate(&ShortcutSpec { split_fractions: [0.5, 0.5, 0.5], ..small_spec() }).is_err());
    }

    #[test]
    fn every_test_group_is_populated() {
        let g = generate(&ShortcutSpec { n_samples: 1000, ..ShortcutSpec::default() }).unwrap();
        let table = g.dataset.group_table();
        let test = &table.iter().find(|(s, _)| *s == Split::Test).unwrap().1;
        assert!(test.iter().all(|&c| c > 0), "{test:?}");
    }

    fn one_group(n: usize) -> Dataset {
        Dataset {
            x: Tensor::zeros(n, 1),
            concepts: vec![0; n],
            n_concepts: 1,
            labels: vec![0; n],
            groups: vec![0; n],
            splits: vec![Split::Train; n],
            concept_names: vec!["c0".into()],
            n_classes: 2,
        }
    }

    fn split_sizes(ds: &Dataset) -> [usize; 3] {
        [ds.indices(Split::Train).len(), ds.indices(Split::Val).len(), ds.indices(Split::Test).len()]
    }

    #[test]
    fn stratified_split_exact_division() {
        let ds = split_dataset(&one_group(8), [0.5, 0.25, 0.25], 3).unwrap();
        assert_eq!(split_sizes(&ds), [4, 2, 2]);
        let ds = split_dataset(&one_group(10), [0.7, 0.1, 0.2], 3).unwrap();
        assert_eq!(split_sizes(&ds), [7, 1, 2]);
    }

    #[test]
    fn stratified_split_is_deterministic() {
        let g = generate(&small_spec()).unwrap().dataset;
        let a = split_dataset(&g, [0.6, 0.2, 0.2], 11).unwrap();
        let b = split_dataset(&g, [0.6, 0.2, 0.2], 11).unwrap();
        assert_eq!(a.splits, b.splits);
    }

    #[test]
    fn tiny_group_is_rejected() {
        assert!(split_dataset(&one_group(2), [0.5, 0.25, 0.25], 0).is_err());
    }

    #[test]
    fn split_counts_stay_within_one_of_proportional() {
        for n in 3..60 {
            let c = split_counts(n, [0.7, 0.1, 0.2]);
            assert_eq!(c.iter().sum::<usize>(), n);
            for (ci, f) in c.iter().zip([0.7, 0.1, 0.2]) {
                assert!((*ci as f64 - f * n as f64).abs() < 1.0 + 1e-9);
            }
        }
    }
}
