use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use moie_core::carve::{self, CarveState, Destination, IterationReport, Mode};
use moie_core::datagen::{self, Dataset, Split};
use moie_core::folx;
use moie_core::models::{self, load_json, save_json, Blackbox};
use moie_core::shortcut::{self, GroupMetrics, ShortcutReport};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, RunConfig};
use crate::summary::{render_summary, SeedSummary};

/// File layout of one run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data.csv")
    }

    pub fn blackbox(&self) -> PathBuf {
        self.root.join("blackbox.json")
    }

    pub fn blackbox_meta(&self) -> PathBuf {
        self.root.join("blackbox.meta.json")
    }

    pub fn carve(&self) -> PathBuf {
        self.root.join("carve")
    }

    pub fn shortcut(&self) -> PathBuf {
        self.root.join("shortcut")
    }
}

/// Ties a saved blackbox to the data and settings it was trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlackboxMeta {
    dataset_hash: String,
    config_hash: String,
    seed: u64,
}

fn blackbox_meta(cfg: &RunConfig, ds: &Dataset) -> Result<BlackboxMeta> {
    Ok(BlackboxMeta {
        dataset_hash: ds.hash()?,
        config_hash: moie_core::hashing::json_hash(&cfg.blackbox)?,
        seed: cfg.seed,
    })
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    version: &'a str,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn record_config(cfg: &RunConfig, dir: &RunDir, command: &str) -> Result<()> {
    std::fs::create_dir_all(&dir.root).with_context(|| format!("creating {}", dir.root.display()))?;
    save_json(cfg, &dir.config())?;
    save_json(&RunInfo { command, version: env!("CARGO_PKG_VERSION") }, &dir.root.join("run.json"))?;
    Ok(())
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite it", path.display());
    }
    Ok(())
}

fn class_name(c: usize) -> String {
    format!("class_{c}")
}

/// Loads the configured dataset. With `create`, a missing generated dataset is
/// produced on the spot.
fn dataset(cfg: &RunConfig, dir: &RunDir, create: bool) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Path(path) => {
            if !path.exists() {
                bail!("dataset {} does not exist", path.display());
            }
            Ok(datagen::load_csv(path).with_context(|| format!("loading {}", path.display()))?)
        }
        DatasetSource::Spec(spec) => {
            let path = dir.data();
            if path.exists() {
                let sidecar = datagen::load_sidecar(&datagen::sidecar_path(&path))?;
                if sidecar.spec.as_ref() != Some(spec) {
                    bail!(
                        "{} was generated from a different dataset spec; rerun `moie generate --force`",
                        path.display()
                    );
                }
                return Ok(datagen::load_csv(&path).with_context(|| format!("loading {}", path.display()))?);
            }
            if !create {
                bail!("no dataset at {}; run `moie generate` first", path.display());
            }
            write_dataset(cfg, dir)
        }
    }
}

fn write_dataset(cfg: &RunConfig, dir: &RunDir) -> Result<Dataset> {
    let DatasetSource::Spec(spec) = &cfg.dataset else {
        bail!("the dataset comes from a file; there is nothing to generate");
    };
    let generated = datagen::generate(spec)?;
    std::fs::create_dir_all(&dir.root)?;
    datagen::save_csv(&generated.dataset, &dir.data())?;
    datagen::save_sidecar(&generated.sidecar, &datagen::sidecar_path(&dir.data()))?;
    Ok(generated.dataset)
}

/// Loads the saved blackbox, or trains one when `train` is set and none that
/// matches the current data and settings exists.
fn blackbox(cfg: &RunConfig, dir: &RunDir, ds: &Dataset, train: bool) -> Result<Blackbox> {
    let expected = blackbox_meta(cfg, ds)?;
    if dir.blackbox().exists() {
        let meta: Option<BlackboxMeta> = load_json(&dir.blackbox_meta()).ok();
        if meta.as_ref() == Some(&expected) {
            return Ok(load_json(&dir.blackbox())?);
        }
        if !train {
            bail!("{} was trained on other data or settings; rerun `moie train-bb --force`", dir.blackbox().display());
        }
    } else if !train {
        bail!("no blackbox at {}; run `moie train-bb` or pass --train-bb", dir.blackbox().display());
    }
    eprintln!("training blackbox (seed {})", cfg.seed);
    let bb = models::train_blackbox(ds, &cfg.blackbox, cfg.seed)?;
    save_json(&bb, &dir.blackbox())?;
    save_json(&expected, &dir.blackbox_meta())?;
    Ok(bb)
}

pub fn group_size_table(ds: &Dataset) -> String {
    let table = ds.group_table();
    let n_groups = table.first().map_or(0, |(_, c)| c.len());
    let mut out = String::from("| split | n |");
    for g in 0..n_groups {
        let _ = write!(out, " y={} s={} |", g / 2, g % 2);
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(n_groups));
    out.push('\n');
    for (split, counts) in &table {
        let _ = write!(out, "| {split} | {} |", counts.iter().sum::<usize>());
        for c in counts {
            let _ = write!(out, " {c} |");
        }
        out.push('\n');
    }
    out
}

pub fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = RunDir::new(&cfg.out);
    refuse_overwrite(&dir.data(), force)?;
    let ds = write_dataset(cfg, &dir)?;
    record_config(cfg, &dir, "generate")?;
    println!("wrote {} rows to {}\n", ds.len(), dir.data().display());
    print!("{}", group_size_table(&ds));
    Ok(())
}

#[derive(Serialize)]
struct BlackboxReport {
    train_accuracy: f64,
    val_accuracy: Option<f64>,
    test_accuracy: Option<f64>,
    test_groups: Option<GroupMetrics>,
}

pub fn cmd_train_bb(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = RunDir::new(&cfg.out);
    refuse_overwrite(&dir.blackbox(), force)?;
    let ds = dataset(cfg, &dir, false)?;
    if dir.blackbox().exists() {
        std::fs::remove_file(dir.blackbox())?;
    }
    let bb = blackbox(cfg, &dir, &ds, true)?;
    record_config(cfg, &dir, "train-bb")?;
    let acc = |s: Split| -> Result<Option<f64>> {
        let rows = ds.indices(s);
        if rows.is_empty() {
            return Ok(None);
        }
        Ok(Some(bb.accuracy_rows(&ds, &rows)?))
    };
    let report = BlackboxReport {
        train_accuracy: acc(Split::Train)?.unwrap_or(0.0),
        val_accuracy: acc(Split::Val)?,
        test_accuracy: acc(Split::Test)?,
        test_groups: shortcut::blackbox_groups(&bb, &ds, Split::Test).ok(),
    };
    save_json(&report, &dir.root.join("blackbox_report.json"))?;
    println!("blackbox accuracy: train {:.3}", report.train_accuracy);
    if let Some(v) = report.val_accuracy {
        println!("                   val   {v:.3}");
    }
    if let Some(t) = report.test_accuracy {
        println!("                   test  {t:.3}");
    }
    if let Some(g) = &report.test_groups {
        println!("test worst-group accuracy {:.3}", g.worst);
    }
    Ok(())
}

#[derive(Serialize)]
struct IterationLine {
    k: usize,
    tau: f64,
    coverage: f64,
    hard_coverage: f64,
    coverage_shortfall: bool,
    metrics: carve::IterationMetrics,
}

#[derive(Serialize)]
struct RuleLine {
    expert: usize,
    class: usize,
    rule: String,
    fidelity: f64,
    support: usize,
}

#[derive(Serialize)]
struct CarveReport {
    manifest: carve::Manifest,
    iterations: Vec<IterationLine>,
    evaluation: IterationReport,
    rules: Vec<RuleLine>,
}

fn rule_lines(state: &CarveState, cache: &carve::Cache, ds: &Dataset, threshold: f64) -> Result<Vec<RuleLine>> {
    let labels = state.concept_labels(ds);
    let mut out = Vec::new();
    for (k, rules) in carve::all_rules(state, cache, ds, threshold)?.iter().enumerate() {
        for r in rules {
            out.push(RuleLine {
                expert: k + 1,
                class: r.class,
                rule: folx::render(r, &labels),
                fidelity: r.fidelity,
                support: r.support,
            });
        }
    }
    Ok(out)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

pub fn render_evaluation(report: &IterationReport) -> String {
    let mut out = format!("## Evaluation ({} split, {} samples)\n\n", report.split, report.n);
    out.push_str("| destination | count | coverage | accuracy | blackbox accuracy |\n|---|---|---|---|---|\n");
    for s in report.experts.iter().chain(std::iter::once(&report.residual)) {
        let name = match s.destination {
            Destination::Expert(k) => format!("expert {k}"),
            Destination::Residual => "residual".to_string(),
        };
        let _ = writeln!(
            out,
            "| {name} | {} | {:.3} | {} | {} |",
            s.count,
            s.coverage,
            opt_pct(s.accuracy),
            opt_pct(s.blackbox_accuracy)
        );
    }
    let _ = writeln!(
        out,
        "\nMoIE coverage {:.3}, MoIE accuracy {}, MoIE+R accuracy {:.1}, blackbox accuracy {:.1}",
        report.moie_coverage,
        opt_pct(report.moie_accuracy),
        100.0 * report.moie_r_accuracy,
        100.0 * report.blackbox_accuracy
    );
    out
}

fn render_carve(report: &CarveReport) -> String {
    let mut out =
        String::from("# Carve report\n\n| k | tau | coverage | hard coverage | shortfall |\n|---|---|---|---|---|\n");
    for it in &report.iterations {
        let _ = writeln!(
            out,
            "| {} | {:.2} | {:.3} | {:.3} | {} |",
            it.k,
            it.tau,
            it.coverage,
            it.hard_coverage,
            if it.coverage_shortfall { "yes" } else { "no" }
        );
    }
    let _ = writeln!(out, "\nCumulative hard coverage {:.3}\n", report.manifest.cumulative_coverage);
    out.push_str(&render_evaluation(&report.evaluation));
    out.push_str("\n## Rules\n\n");
    for r in &report.rules {
        let _ =
            writeln!(out, "- expert {}: `{}` (fidelity {:.3}, support {})", r.expert, r.rule, r.fidelity, r.support);
    }
    out
}

pub fn cmd_carve(cfg: &RunConfig, force: bool, train_bb: bool) -> Result<()> {
    let dir = RunDir::new(&cfg.out);
    refuse_overwrite(&dir.carve().join("manifest.json"), force)?;
    let ds = dataset(cfg, &dir, train_bb)?;
    let bb = blackbox(cfg, &dir, &ds, train_bb)?;
    record_config(cfg, &dir, "carve")?;
    eprintln!("carving up to {} experts", cfg.carve.k);
    let state = carve::carve(&bb, &ds, &cfg.carve)?;
    let manifest = carve::save_state(&state, &cfg.carve, &ds, &dir.carve())?;
    let cache = state.cache(&ds)?;
    let report = CarveReport {
        manifest,
        iterations: state
            .iterations
            .iter()
            .map(|it| IterationLine {
                k: it.k,
                tau: it.tau,
                coverage: it.coverage,
                hard_coverage: it.hard_coverage,
                coverage_shortfall: it.coverage_shortfall,
                metrics: it.metrics.clone(),
            })
            .collect(),
        evaluation: carve::evaluate(&state, &cache, &ds, Split::Test)?,
        rules: rule_lines(&state, &cache, &ds, cfg.carve.attention_threshold)?,
    };
    save_json(&report, &dir.carve().join("report.json"))?;
    let md = render_carve(&report);
    write_text(&dir.carve().join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn load_carved(dir: &RunDir) -> Result<CarveState> {
    let path = dir.carve();
    if !path.join("manifest.json").exists() {
        bail!("no carve run in {}; run `moie carve` first", path.display());
    }
    let (state, _) = carve::load_state(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Explanation {
    pub sample: usize,
    pub split: Split,
    pub destination: Destination,
    pub predicted: usize,
    pub label: usize,
    /// Local rule; `None` for residual samples or when no conjunction fires.
    pub explanation: Option<String>,
}

pub fn explain(state: &CarveState, ds: &Dataset, samples: &[usize], threshold: f64) -> Result<Vec<Explanation>> {
    if let Some(bad) = samples.iter().find(|&&s| s >= ds.len()) {
        bail!("sample id {bad} is out of range; the dataset has {} rows", ds.len());
    }
    let cache = state.cache(ds)?;
    let rules = carve::all_rules(state, &cache, ds, threshold)?;
    let labels = state.concept_labels(ds);
    let preds = carve::moie_predict(state, &cache, samples, Mode::MoiePlusR)?;
    preds
        .into_iter()
        .map(|p| {
            let predicted = p.label.ok_or_else(|| anyhow!("MoIE+R left sample {} without a label", p.sample))?;
            let explanation = match p.destination {
                Destination::Expert(k) => rules[k - 1]
                    .iter()
                    .find(|r| r.class == predicted)
                    .and_then(|r| folx::local_explanation(r, folx::binarize(cache.concepts.row(p.sample))))
                    .map(|c| folx::render_conjunction(&c, &labels)),
                Destination::Residual => None,
            };
            Ok(Explanation {
                sample: p.sample,
                split: ds.splits[p.sample],
                destination: p.destination,
                predicted,
                label: ds.labels[p.sample],
                explanation,
            })
        })
        .collect()
}

pub fn render_explanations(items: &[Explanation]) -> String {
    let mut out = String::new();
    for e in items {
        let (route, why) = match e.destination {
            Destination::Expert(k) => (
                format!("expert {k}"),
                e.explanation.clone().unwrap_or_else(|| "no conjunction of the rule fires".to_string()),
            ),
            Destination::Residual => ("residual".to_string(), "unexplained (residual)".to_string()),
        };
        let _ = writeln!(
            out,
            "sample {} [{}] {route}: predicted {}, true {}: {why}",
            e.sample,
            e.split,
            class_name(e.predicted),
            class_name(e.label)
        );
    }
    out
}

pub fn cmd_explain(cfg: &RunConfig, samples: &[usize]) -> Result<()> {
    let dir = RunDir::new(&cfg.out);
    let state = load_carved(&dir)?;
    let ds = dataset(cfg, &dir, false)?;
    let items = explain(&state, &ds, samples, cfg.carve.attention_threshold)?;
    print!("{}", render_explanations(&items));
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, split: Split) -> Result<()> {
    let dir = RunDir::new(&cfg.out);
    let state = load_carved(&dir)?;
    let ds = dataset(cfg, &dir, false)?;
    let cache = state.cache(&ds)?;
    let report = carve::evaluate(&state, &cache, &ds, split)?;
    save_json(&report, &dir.carve().join(format!("evaluation_{split}.json")))?;
    let md = render_evaluation(&report);
    write_text(&dir.carve().join(format!("evaluation_{split}.md")), &md)?;
    print!("{md}");
    Ok(())
}

fn write_shortcut_report(dir: &Path, report: &ShortcutReport) -> Result<()> {
    save_json(report, &dir.join("report.json"))?;
    write_text(&dir.join("report.md"), &shortcut::render_markdown(report))
}

/// Runs detection, elimination and verification for one seed inside `dir`,
/// writing the report after every stage so a failure leaves the finished
/// stages on disk.
pub fn shortcut_run(cfg: &RunConfig, dir: &RunDir, force: bool, skip_eliminate: bool) -> Result<SeedSummary> {
    let out = dir.shortcut();
    refuse_overwrite(&out.join("report.json"), force)?;
    if force && out.exists() {
        std::fs::remove_dir_all(&out)?;
    }
    let ds = dataset(cfg, dir, true)?;
    let bb = blackbox(cfg, dir, &ds, true)?;
    record_config(cfg, dir, "shortcut")?;
    std::fs::create_dir_all(&out)?;

    eprintln!("[seed {}] carving the blackbox", cfg.seed);
    let biased = carve::carve(&bb, &ds, &cfg.carve)?;
    carve::save_state(&biased, &cfg.carve, &ds, &out.join("biased"))?;
    let cache = biased.cache(&ds)?;
    let (_, mut report) = shortcut::detect(&biased, &cache, &ds, &cfg.carve, &cfg.shortcut)?;
    write_shortcut_report(&out, &report)?;

    if skip_eliminate {
        shortcut::verify(&biased, &cache, &ds, &cfg.carve, &mut report)?;
        bail!("verification ran without elimination");
    }
    eprintln!("[seed {}] eliminating {:?}", cfg.seed, report.detected);
    let detected = report.detected.clone();
    let tuned = shortcut::eliminate(&bb, &detected, &ds, &cfg.blackbox, cfg.seed, &mut report)?;
    save_json(&tuned, &out.join("blackbox_mdn.json"))?;
    write_shortcut_report(&out, &report)?;

    eprintln!("[seed {}] carving the fine-tuned blackbox", cfg.seed);
    let robust = carve::carve(&tuned, &ds, &cfg.carve)?;
    carve::save_state(&robust, &cfg.carve, &ds, &out.join("robust"))?;
    let robust_cache = robust.cache(&ds)?;
    shortcut::verify(&robust, &robust_cache, &ds, &cfg.carve, &mut report)?;
    write_shortcut_report(&out, &report)?;
    SeedSummary::from_report(cfg.seed, &report)
}

pub fn cmd_shortcut(cfg: &RunConfig, seeds: Option<Vec<u64>>, force: bool, skip_eliminate: bool) -> Result<()> {
    let root = RunDir::new(&cfg.out);
    let rows: Vec<SeedSummary> = match seeds {
        None => vec![shortcut_run(cfg, &root, force, skip_eliminate)?],
        Some(seeds) => {
            record_config(cfg, &root, "shortcut")?;
            let results: Vec<Result<SeedSummary>> = crate::pool()?.install(|| {
                use rayon::prelude::*;
                seeds
                    .par_iter()
                    .map(|&s| {
                        let seeded = cfg.with_seed(s);
                        let dir = RunDir::new(root.root.join(format!("seed_{s}")));
                        shortcut_run(&seeded, &dir, force, skip_eliminate).with_context(|| format!("seed {s}"))
                    })
                    .collect()
            });
            let mut rows = Vec::new();
            for r in results {
                rows.push(r?);
            }
            rows
        }
    };
    std::fs::create_dir_all(&root.root)?;
    save_json(&rows, &root.root.join("summary.json"))?;
    let md = render_summary(&rows);
    write_text(&root.root.join("summary.md"), &md)?;
    print!("{md}");
    Ok(())
}
