//! Detect shortcut concepts from expert rules, remove them from the blackbox
//! with metadata normalization, and check that the re-carved experts no longer
//! use them.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::carve::{self, moie_predict, Cache, CarveConfig, CarveState, Destination, Mode};
use crate::datagen::{Dataset, Split};
use crate::error::{Error, Result};
use crate::folx::{self, FOLRule};
use crate::models::{fine_tune_with_mdn, Blackbox, BlackboxConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShortcutConfig {
    /// Concepts scoring above this enrichment are passed to elimination.
    pub enrichment_threshold: f64,
    /// Always eliminate at least this many top-ranked concepts.
    pub min_detected: usize,
    /// Split whose misclassifications drive detection.
    pub detection_split: Split,
    /// Split used for the group accuracy tables.
    pub evaluation_split: Split,
}

impl Default for ShortcutConfig {
    fn default() -> Self {
        ShortcutConfig {
            enrichment_threshold: 0.2,
            min_detected: 1,
            detection_split: Split::Val,
            evaluation_split: Split::Test,
        }
    }
}

impl ShortcutConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.enrichment_threshold.is_finite() {
            return Err(Error::invalid("enrichment_threshold must be finite"));
        }
        if self.detection_split == Split::Train {
            return Err(Error::invalid("detection on the training split sees almost no errors; use val or test"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detection,
    Elimination,
    Verification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    /// Dataset concept index.
    pub concept: usize,
    pub name: String,
    /// Misclassified samples whose governing term mentions the concept.
    pub misclassified_mentions: usize,
    pub correct_mentions: usize,
    pub misclassified_frequency: f64,
    pub correct_frequency: f64,
    pub enrichment: f64,
    /// Literal count over all expert rules.
    pub rule_mentions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: usize,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub groups: Vec<GroupAccuracy>,
    pub average: f64,
    pub worst: f64,
}

impl GroupMetrics {
    /// Average minus worst-group accuracy.
    pub fn gap(&self) -> f64 {
        self.average - self.worst
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub concept: usize,
    pub name: String,
    pub before: f64,
    pub after: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleSnapshot {
    pub expert: usize,
    pub class: usize,
    pub rule: String,
    pub fidelity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub expert: usize,
    pub class: usize,
    pub concept: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortcutReport {
    pub stages: Vec<Stage>,
    pub detection_split: Split,
    pub evaluation_split: Split,
    /// Covered samples of the detection split, and how many were misclassified.
    pub evaluated: usize,
    pub misclassified: usize,
    pub ranking: Vec<ConceptScore>,
    pub detected: Vec<usize>,
    pub blackbox_groups: GroupMetrics,
    pub moie_groups: GroupMetrics,
    pub finetuned_groups: Option<GroupMetrics>,
    pub robust_moie_groups: Option<GroupMetrics>,
    /// MoIE restricted to covered samples, before and after elimination.
    pub covered_groups: GroupMetrics,
    pub robust_covered_groups: Option<GroupMetrics>,
    pub probes: Vec<ProbeRow>,
    pub rules_before: Vec<RuleSnapshot>,
    pub rules_after: Vec<RuleSnapshot>,
    pub violations: Vec<Violation>,
    /// Which parameters elimination retrains.
    pub finetune_scope: Option<String>,
}

impl ShortcutReport {
    pub fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }
}

/// Per-group and overall accuracy. Every group id in `0..n_groups` must occur.
pub fn group_metrics(preds: &[usize], labels: &[usize], groups: &[usize], n_groups: usize) -> Result<GroupMetrics> {
    tally(preds, labels, groups, n_groups, false)
}

/// Like [`group_metrics`] but leaves out groups with no samples.
pub fn present_group_metrics(
    preds: &[usize],
    labels: &[usize],
    groups: &[usize],
    n_groups: usize,
) -> Result<GroupMetrics> {
    tally(preds, labels, groups, n_groups, true)
}

fn tally(
    preds: &[usize],
    labels: &[usize],
    groups: &[usize],
    n_groups: usize,
    skip_empty: bool,
) -> Result<GroupMetrics> {
    if preds.len() != labels.len() || preds.len() != groups.len() {
        return Err(Error::shape(
            "group_metrics",
            format!("{} predictions, {} labels, {} groups", preds.len(), labels.len(), groups.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::invalid("group metrics over zero samples"));
    }
    if let Some(g) = groups.iter().find(|&&g| g >= n_groups) {
        return Err(Error::invalid(format!("group id {g} out of range ({n_groups} groups)")));
    }
    let mut hits = vec![0usize; n_groups];
    let mut counts = vec![0usize; n_groups];
    for ((&p, &y), &g) in preds.iter().zip(labels).zip(groups) {
        counts[g] += 1;
        hits[g] += usize::from(p == y);
    }
    if !skip_empty {
        if let Some(g) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!("group {g} has no samples")));
        }
    }
    let groups: Vec<GroupAccuracy> = (0..n_groups)
        .filter(|&g| counts[g] > 0)
        .map(|g| GroupAccuracy { group: g, count: counts[g], accuracy: hits[g] as f64 / counts[g] as f64 })
        .collect();
    let worst = groups.iter().map(|g| g.accuracy).fold(f64::INFINITY, f64::min);
    let average = hits.iter().sum::<usize>() as f64 / preds.len() as f64;
    Ok(GroupMetrics { groups, average, worst })
}

fn split_groups(ds: &Dataset, split: Split, preds: &[usize]) -> Result<GroupMetrics> {
    let rows = ds.indices(split);
    group_metrics(preds, &ds.labels_of(&rows), &ds.groups_of(&rows), ds.n_groups())
}

/// Group metrics of a blackbox on `split`.
pub fn blackbox_groups(bb: &Blackbox, ds: &Dataset, split: Split) -> Result<GroupMetrics> {
    let rows = ds.indices(split);
    split_groups(ds, split, &bb.predict_rows(ds, &rows)?)
}

/// Group metrics of MoIE+R on `split`.
pub fn moie_groups(state: &CarveState, cache: &Cache, ds: &Dataset, split: Split) -> Result<GroupMetrics> {
    let rows = ds.indices(split);
    let preds: Vec<usize> = moie_predict(state, cache, &rows, Mode::MoiePlusR)?
        .into_iter()
        .map(|p| p.label.expect("MoIE+R labels every sample"))
        .collect();
    split_groups(ds, split, &preds)
}

/// Group metrics of MoIE on the samples of `split` that some expert covers.
pub fn covered_groups(state: &CarveState, cache: &Cache, ds: &Dataset, split: Split) -> Result<GroupMetrics> {
    let rows = ds.indices(split);
    let (mut preds, mut labels, mut groups) = (Vec::new(), Vec::new(), Vec::new());
    for p in moie_predict(state, cache, &rows, Mode::Moie)? {
        if let Some(label) = p.label {
            preds.push(label);
            labels.push(ds.labels[p.sample]);
            groups.push(ds.groups[p.sample]);
        }
    }
    if preds.is_empty() {
        return Err(Error::Degenerate(format!("no expert covers any sample of the {split} split")));
    }
    present_group_metrics(&preds, &labels, &groups, ds.n_groups())
}

fn snapshots(state: &CarveState, rules: &[Vec<FOLRule>], ds: &Dataset) -> Vec<RuleSnapshot> {
    let labels = state.concept_labels(ds);
    let mut out = Vec::new();
    for (k, per_class) in rules.iter().enumerate() {
        for r in per_class {
            out.push(RuleSnapshot {
                expert: k + 1,
                class: r.class,
                rule: folx::render(r, &labels),
                fidelity: r.fidelity,
            });
        }
    }
    out
}

/// Concepts (dataset indices) in the sample's local explanation: the
/// shortest conjunction of the predicted class's rule that it satisfies.
fn governing_concepts(rule: Option<&FOLRule>, bits: u64, concept_ids: &[usize]) -> BTreeSet<usize> {
    let Some(term) = rule.and_then(|r| folx::local_explanation(r, bits)) else { return BTreeSet::new() };
    (0..concept_ids.len()).filter(|&j| term.mentions(j)).map(|j| concept_ids[j]).collect()
}

/// Ranks concepts by how much more often they govern misclassified than
/// correctly classified predictions on the detection split.
///
/// Uses only the carved state and the labelled split; the generator's
/// spurious mask is never an input.
pub fn detect(
    state: &CarveState,
    cache: &Cache,
    ds: &Dataset,
    carve_cfg: &CarveConfig,
    cfg: &ShortcutConfig,
) -> Result<(Vec<ConceptScore>, ShortcutReport)> {
    cfg.validate()?;
    if state.iterations.is_empty() {
        return Err(Error::StageOrder("detection needs a carved state with at least one expert".into()));
    }
    let rules = carve::all_rules(state, cache, ds, carve_cfg.attention_threshold)?;
    let rows = ds.indices(cfg.detection_split);
    let preds = moie_predict(state, cache, &rows, Mode::Moie)?;

    let n_concepts = ds.n_concepts;
    let mut mis = vec![0usize; n_concepts];
    let mut cor = vec![0usize; n_concepts];
    let (mut n_mis, mut n_cor) = (0usize, 0usize);
    for p in &preds {
        let (Destination::Expert(k), Some(label)) = (p.destination, p.label) else { continue };
        let rule = rules[k - 1].iter().find(|r| r.class == label);
        let bits = folx::binarize(cache.concepts.row(p.sample));
        let named = governing_concepts(rule, bits, &state.concept_ids);
        let (counts, total) =
            if label == ds.labels[p.sample] { (&mut cor, &mut n_cor) } else { (&mut mis, &mut n_mis) };
        *total += 1;
        for j in named {
            counts[j] += 1;
        }
    }
    if n_mis == 0 {
        return Err(Error::Degenerate(format!(
            "no misclassified covered samples in the {} split; detection needs errors to explain, \
             evaluate on a split with a harder or shifted distribution",
            cfg.detection_split
        )));
    }

    let literal_counts: Vec<usize> = (0..n_concepts)
        .map(|j| {
            let local = state.concept_ids.iter().position(|&c| c == j);
            local.map_or(0, |l| rules.iter().flatten().flat_map(|r| &r.dnf).filter(|c| c.mentions(l)).count())
        })
        .collect();
    let freq = |count: usize, total: usize| if total == 0 { 0.0 } else { count as f64 / total as f64 };
    let mut ranking: Vec<ConceptScore> = (0..n_concepts)
        .map(|j| {
            let mf = freq(mis[j], n_mis);
            let cf = freq(cor[j], n_cor);
            ConceptScore {
                concept: j,
                name: ds.concept_names[j].clone(),
                misclassified_mentions: mis[j],
                correct_mentions: cor[j],
                misclassified_frequency: mf,
                correct_frequency: cf,
                enrichment: if literal_counts[j] == 0 { 0.0 } else { mf - cf },
                rule_mentions: literal_counts[j],
            }
        })
        .collect();
    ranking.sort_by(|a, b| {
        (b.rule_mentions > 0)
            .cmp(&(a.rule_mentions > 0))
            .then(b.enrichment.total_cmp(&a.enrichment))
            .then(a.concept.cmp(&b.concept))
    });

    let eval = cfg.evaluation_split;
    let report = ShortcutReport {
        stages: vec![Stage::Detection],
        detection_split: cfg.detection_split,
        evaluation_split: eval,
        evaluated: n_mis + n_cor,
        misclassified: n_mis,
        ranking: ranking.clone(),
        detected: select_detected(&ranking, cfg.enrichment_threshold, cfg.min_detected),
        blackbox_groups: blackbox_groups(&state.blackbox, ds, eval)?,
        moie_groups: moie_groups(state, cache, ds, eval)?,
        covered_groups: covered_groups(state, cache, ds, eval)?,
        robust_covered_groups: None,
        finetuned_groups: None,
        robust_moie_groups: None,
        probes: (0..n_concepts)
            .map(|j| ProbeRow {
                concept: j,
                name: ds.concept_names[j].clone(),
                before: state.projector.val_accuracy[j],
                after: None,
            })
            .collect(),
        rules_before: snapshots(state, &rules, ds),
        rules_after: Vec::new(),
        violations: Vec::new(),
        finetune_scope: None,
    };
    Ok((ranking, report))
}

/// Concepts scoring above `threshold`, topped up to `min_count` from the head
/// of the ranking. Returned in ranking order.
pub fn select_detected(ranking: &[ConceptScore], threshold: f64, min_count: usize) -> Vec<usize> {
    ranking
        .iter()
        .enumerate()
        .filter(|(i, s)| s.enrichment > threshold || *i < min_count)
        .map(|(_, s)| s.concept)
        .collect()
}

/// Fine-tunes the blackbox with the detected concepts' ground-truth columns
/// as MDN metadata.
pub fn eliminate(
    bb: &Blackbox,
    detected: &[usize],
    ds: &Dataset,
    cfg: &BlackboxConfig,
    seed: u64,
    report: &mut ShortcutReport,
) -> Result<Blackbox> {
    if !report.has(Stage::Detection) {
        return Err(Error::StageOrder("elimination runs after detection".into()));
    }
    if detected.is_empty() {
        return Err(Error::invalid("nothing to eliminate: the detected concept set is empty"));
    }
    let tuned = fine_tune_with_mdn(bb, ds, detected, cfg, seed)?;
    report.detected = detected.to_vec();
    report.finetuned_groups = Some(blackbox_groups(&tuned, ds, report.evaluation_split)?);
    report.finetune_scope = Some(format!(
        "MDN on the pre-activation of phi layer 0 (affine part frozen); phi layers 1.. and head retrained for {} epochs at lr {}",
        cfg.finetune_epochs,
        cfg.lr / 10.0
    ));
    report.stages.push(Stage::Elimination);
    Ok(tuned)
}

/// Records the re-carved experts' rules, their group accuracy and the probe
/// accuracies of the retrained projector, and lists any rule that still
/// mentions a detected concept.
pub fn verify(
    new_state: &CarveState,
    cache: &Cache,
    ds: &Dataset,
    carve_cfg: &CarveConfig,
    report: &mut ShortcutReport,
) -> Result<()> {
    if !report.has(Stage::Elimination) {
        return Err(Error::StageOrder("verification needs a completed elimination stage".into()));
    }
    if report.has(Stage::Verification) {
        return Err(Error::StageOrder("verification already recorded in this report".into()));
    }
    let rules = carve::all_rules(new_state, cache, ds, carve_cfg.attention_threshold)?;
    let mut violations = Vec::new();
    for (k, per_class) in rules.iter().enumerate() {
        for r in per_class {
            for &d in &report.detected {
                let Some(local) = new_state.concept_ids.iter().position(|&c| c == d) else { continue };
                if r.dnf.iter().any(|c| c.mentions(local)) {
                    violations.push(Violation { expert: k + 1, class: r.class, concept: d });
                }
            }
        }
    }
    for row in &mut report.probes {
        row.after = new_state.projector.val_accuracy.get(row.concept).copied();
    }
    report.rules_after = snapshots(new_state, &rules, ds);
    report.robust_moie_groups = Some(moie_groups(new_state, cache, ds, report.evaluation_split)?);
    report.robust_covered_groups = Some(covered_groups(new_state, cache, ds, report.evaluation_split)?);
    report.violations = violations;
    report.stages.push(Stage::Verification);
    Ok(())
}

/// Everything produced by one detect, eliminate, verify pass.
pub struct PipelineOutcome {
    pub report: ShortcutReport,
    pub biased: CarveState,
    pub finetuned: Blackbox,
    pub robust: CarveState,
}

/// Carves the given blackbox, then detects, eliminates, re-carves and verifies.
pub fn run_pipeline(
    bb: &Blackbox,
    ds: &Dataset,
    bb_cfg: &BlackboxConfig,
    carve_cfg: &CarveConfig,
    cfg: &ShortcutConfig,
    seed: u64,
) -> Result<PipelineOutcome> {
    let biased = carve::carve(bb, ds, carve_cfg)?;
    let cache = biased.cache(ds)?;
    let (_, mut report) = detect(&biased, &cache, ds, carve_cfg, cfg)?;
    let detected = report.detected.clone();
    let tuned = eliminate(bb, &detected, ds, bb_cfg, seed, &mut report)?;
    let robust = carve::carve(&tuned, ds, carve_cfg)?;
    let robust_cache = robust.cache(ds)?;
    verify(&robust, &robust_cache, ds, carve_cfg, &mut report)?;
    Ok(PipelineOutcome { report, biased, finetuned: tuned, robust })
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn group_table(out: &mut String, rows: &[(&str, &GroupMetrics)]) {
    let n = rows.iter().flat_map(|(_, m)| m.groups.iter().map(|g| g.group + 1)).max().unwrap_or(0);
    out.push_str("| model | average | worst |");
    for g in 0..n {
        let _ = write!(out, " group {g} |");
    }
    out.push_str("\n|---|---|---|");
    out.push_str(&"---|".repeat(n));
    out.push('\n');
    for (name, m) in rows {
        let _ = write!(out, "| {name} | {} | {} |", pct(m.average), pct(m.worst));
        for g in 0..n {
            let cell = m.groups.iter().find(|a| a.group == g).map_or("-".to_string(), |a| pct(a.accuracy));
            let _ = write!(out, " {cell} |");
        }
        out.push('\n');
    }
}

/// Markdown summary with the ranking, group, probe and rule tables.
pub fn render_markdown(report: &ShortcutReport) -> String {
    let mut out = String::from("# Shortcut report\n\n");
    let stages: Vec<&str> = report
        .stages
        .iter()
        .map(|s| match s {
            Stage::Detection => "detection",
            Stage::Elimination => "elimination",
            Stage::Verification => "verification",
        })
        .collect();
    let _ = writeln!(out, "Stages: {}\n", stages.join(", "));

    let _ = writeln!(
        out,
        "## Detection\n\n{} of {} covered {} samples misclassified.\n",
        report.misclassified, report.evaluated, report.detection_split
    );
    out.push_str("| rank | concept | misclassified | correct | enrichment | literals |\n|---|---|---|---|---|---|\n");
    for (i, s) in report.ranking.iter().enumerate() {
        let _ = writeln!(
            out,
            "| {} | {} | {:.3} | {:.3} | {:+.3} | {} |",
            i + 1,
            s.name,
            s.misclassified_frequency,
            s.correct_frequency,
            s.enrichment,
            s.rule_mentions
        );
    }
    let names: Vec<&str> = report
        .detected
        .iter()
        .filter_map(|&d| report.ranking.iter().find(|s| s.concept == d).map(|s| s.name.as_str()))
        .collect();
    let _ = writeln!(out, "\nDetected: {}\n", if names.is_empty() { "none".to_string() } else { names.join(", ") });

    let _ = writeln!(out, "## Group accuracy ({} split, %)\n", report.evaluation_split);
    let mut rows = vec![
        ("blackbox", &report.blackbox_groups),
        ("MoIE (covered)", &report.covered_groups),
        ("MoIE+R", &report.moie_groups),
    ];
    if let Some(m) = &report.finetuned_groups {
        rows.push(("blackbox + MDN", m));
    }
    if let Some(m) = &report.robust_covered_groups {
        rows.push(("robust MoIE (covered)", m));
    }
    if let Some(m) = &report.robust_moie_groups {
        rows.push(("robust MoIE+R", m));
    }
    group_table(&mut out, &rows);

    if let Some(scope) = &report.finetune_scope {
        let _ = writeln!(out, "\nElimination: {scope}.");
    }

    out.push_str("\n## Probe validation accuracy (%)\n\n| concept | before | after |\n|---|---|---|\n");
    for p in &report.probes {
        let after = p.after.map_or("-".to_string(), pct);
        let _ = writeln!(out, "| {} | {} | {} |", p.name, pct(p.before), after);
    }

    for (title, rules) in [("Rules before", &report.rules_before), ("Rules after", &report.rules_after)] {
        if rules.is_empty() {
            continue;
        }
        let _ = writeln!(out, "\n## {title}\n");
        for r in rules {
            let _ = writeln!(out, "- expert {}: `{}` (fidelity {:.3})", r.expert, r.rule, r.fidelity);
        }
    }
    if report.has(Stage::Verification) {
        out.push_str("\n## Verification\n\n");
        if report.violations.is_empty() {
            out.push_str("No rule mentions a detected concept.\n");
        } else {
            for v in &report.violations {
                let _ = writeln!(out, "- expert {} class {} mentions concept {}", v.expert, v.class, v.concept);
            }
        }
    }
    out
}
