//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Exits 0 even when a criterion fails so the rest of the suite still runs;
//! set `MOIE_ACCEPTANCE_STRICT=1` to turn any failure into a non-zero exit.

mod common;

use std::time::{Duration, Instant};

use moie_core::carve::{self, CarveConfig};
use moie_core::datagen::{generate, ShortcutSpec, Split};
use moie_core::models::{train_blackbox, BlackboxConfig};
use moie_core::shortcut::{run_pipeline, ShortcutConfig, ShortcutReport};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Ledger {
    failed: usize,
}

impl Ledger {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
}

/// Pipeline outputs of one seed that later criteria read.
struct SeedRun {
    report: ShortcutReport,
    json: String,
    spurious: Vec<usize>,
    residual_bb: Option<f64>,
    overall_bb: f64,
}

fn shortcut_seed(seed: u64) -> SeedRun {
    let generated = generate(&ShortcutSpec { seed, ..ShortcutSpec::default() }).unwrap();
    let ds = generated.dataset;
    let bb_cfg = BlackboxConfig::default();
    let bb = train_blackbox(&ds, &bb_cfg, seed).unwrap();
    let carve_cfg = CarveConfig { seed, ..CarveConfig::default() };
    let out = run_pipeline(&bb, &ds, &bb_cfg, &carve_cfg, &ShortcutConfig::default(), seed).unwrap();
    let cache = out.biased.cache(&ds).unwrap();
    let eval = carve::evaluate(&out.biased, &cache, &ds, Split::Test).unwrap();
    SeedRun {
        json: serde_json::to_string(&out.report).unwrap(),
        report: out.report,
        spurious: generated.sidecar.spurious_indices(),
        residual_bb: eval.residual.blackbox_accuracy,
        overall_bb: eval.blackbox_accuracy,
    }
}

fn shortcut_sweep() -> (Vec<SeedRun>, Duration) {
    let t = Instant::now();
    let runs = SEEDS.iter().map(|&s| shortcut_seed(s)).collect();
    (runs, t.elapsed())
}

fn count(flags: &[bool]) -> usize {
    flags.iter().filter(|&&f| f).count()
}

fn main() {
    let mut l = Ledger { failed: 0 };

    let t = Instant::now();
    let cases = common::gradient_suite(20);
    let elapsed = t.elapsed();
    let worst = cases.iter().map(|c| c.worst).fold(0.0, f64::max);
    let all_twenty = cases.iter().all(|c| c.configs == 20);
    let names: Vec<&str> = cases.iter().map(|c| c.name).collect();
    l.record(
        "1 gradient suite",
        worst < 1e-4 && all_twenty && elapsed.as_secs_f64() < 10.0,
        format!(
            "{} families x 20 configs [{}], worst relative error {worst:.2e} (< 1e-4), {} (< 10s)",
            cases.len(),
            names.join(", "),
            secs(elapsed)
        ),
    );

    let err = common::telescoping_error(1000, 6, 1);
    l.record("2 telescoping identity", err < 1e-12, format!("1000 tuples, K <= 6, max |sum - 1| {err:.2e} (< 1e-12)"));

    let m = common::mdn_check(200, 2);
    l.record(
        "3 MDN oracle",
        m.max_slope < 1e-8 && m.max_mean_shift < 1e-10,
        format!("max slope {:.2e} (< 1e-8), max mean shift {:.2e} (< 1e-10)", m.max_slope, m.max_mean_shift),
    );

    let f = common::fol_check(120, 12, 3);
    l.record(
        "4 FOL truth tables",
        f.mismatches == 0 && f.max_selected <= 12,
        format!(
            "{} experts, up to {} selected concepts, {} inputs checked, {} mismatches",
            f.experts, f.max_selected, f.inputs_checked, f.mismatches
        ),
    );

    {
        let ds = generate(&ShortcutSpec::default()).unwrap().dataset;
        let bb = train_blackbox(&ds, &BlackboxConfig::default(), 0).unwrap();
        let cfg = CarveConfig::default();
        let t = Instant::now();
        let state = carve::carve(&bb, &ds, &cfg).unwrap();
        let elapsed = t.elapsed();
        let zetas: Vec<f64> = state.iterations.iter().map(|it| it.coverage).collect();
        let targets_met = state.iterations.iter().all(|it| it.coverage >= it.tau - 0.05);
        l.record(
            "5 coverage protocol",
            state.cumulative_coverage >= 0.90 && targets_met && elapsed.as_secs_f64() < 300.0,
            format!(
                "cumulative hard coverage {:.3} (>= 0.90), zeta [{}] vs tau {:?} (>= tau - 0.05), carve {} (< 300s)",
                state.cumulative_coverage,
                list(&zetas),
                cfg.tau,
                secs(elapsed)
            ),
        );
    }

    {
        let mut gaps = Vec::new();
        for &seed in &SEEDS {
            let ds =
                generate(&ShortcutSpec { seed, train_correlation: 0.5, ..ShortcutSpec::default() }).unwrap().dataset;
            let bb = train_blackbox(&ds, &BlackboxConfig::default(), seed).unwrap();
            let state = carve::carve(&bb, &ds, &CarveConfig { seed, ..CarveConfig::default() }).unwrap();
            let cache = state.cache(&ds).unwrap();
            let r = carve::evaluate(&state, &cache, &ds, Split::Test).unwrap();
            gaps.push(100.0 * (r.moie_r_accuracy - r.blackbox_accuracy));
        }
        let ok = gaps.iter().all(|g| g.abs() <= 3.0);
        l.record(
            "6 performance preservation",
            ok,
            format!(
                "rho 0.5, MoIE+R minus blackbox test accuracy per seed [{}] points (|.| <= 3 on every seed)",
                list(&gaps)
            ),
        );
    }

    let (runs, elapsed) = shortcut_sweep();
    {
        let gap: Vec<f64> = runs.iter().map(|r| r.report.blackbox_groups.gap()).collect();
        let a: Vec<bool> = gap.iter().map(|&g| g >= 0.20).collect();
        l.record(
            "7a biased blackbox gap",
            count(&a) >= 4,
            format!("average - worst [{}] (>= 0.20), {}/5 seeds", list(&gap), count(&a)),
        );

        let top: Vec<&str> = runs.iter().map(|r| r.report.ranking[0].name.as_str()).collect();
        let b: Vec<bool> = runs.iter().map(|r| r.spurious.contains(&r.report.ranking[0].concept)).collect();
        l.record(
            "7b spurious concept ranked first",
            count(&b) >= 4,
            format!("top concepts {top:?}, {}/5 seeds", count(&b)),
        );

        let after: Vec<f64> = runs
            .iter()
            .map(|r| {
                let top = r.report.ranking[0].concept;
                r.report.probes.iter().find(|p| p.concept == top).and_then(|p| p.after).unwrap_or(f64::NAN)
            })
            .collect();
        let c: Vec<bool> = b.iter().zip(&after).map(|(&hit, &acc)| hit && acc < 0.70).collect();
        l.record(
            "7c eliminated concept unreadable",
            count(&c) >= 4,
            format!(
                "probe val accuracy of the top concept after elimination [{}] (< 0.70), {}/5 seeds",
                list(&after),
                count(&c)
            ),
        );

        let viol: Vec<usize> = runs.iter().map(|r| r.report.violations.len()).collect();
        let d: Vec<bool> = viol.iter().map(|&v| v == 0).collect();
        l.record(
            "7d rules free of detected concepts",
            count(&d) >= 4,
            format!("violations per seed {viol:?}, {}/5 seeds", count(&d)),
        );

        let mut spread = Vec::new();
        let mut gain = Vec::new();
        let mut e = Vec::new();
        for r in &runs {
            let robust = r.report.robust_covered_groups.as_ref().unwrap();
            spread.push(robust.gap());
            gain.push(robust.worst - r.report.blackbox_groups.worst);
            e.push(robust.gap() <= 0.05 && robust.worst - r.report.blackbox_groups.worst >= 0.15);
        }
        l.record(
            "7e robust worst group",
            count(&e) >= 4,
            format!(
                "robust MoIE average - worst [{}] (<= 0.05), worst-group gain over biased blackbox [{}] (>= 0.15), {}/5 seeds",
                list(&spread),
                list(&gain),
                count(&e)
            ),
        );

        l.record("7 runtime", elapsed.as_secs_f64() < 1200.0, format!("5 seeds in {} (< 1200s)", secs(elapsed)));
    }

    {
        let margins: Vec<f64> = runs.iter().map(|r| r.overall_bb - r.residual_bb.unwrap_or(f64::NAN)).collect();
        let ok: Vec<bool> = margins.iter().map(|&m| m >= 0.10).collect();
        l.record(
            "8 residual hardness",
            count(&ok) >= 4,
            format!(
                "overall f0 minus residual f0 test accuracy [{}] (>= 0.10), {}/5 seeds",
                list(&margins),
                count(&ok)
            ),
        );
    }

    {
        let (again, _) = shortcut_sweep();
        let same: Vec<bool> = runs.iter().zip(&again).map(|(a, b)| a.json == b.json).collect();
        l.record(
            "9 determinism",
            same.iter().all(|&s| s),
            format!("byte-identical report JSON on {}/5 seeds", count(&same)),
        );
    }

    println!("{} criteria failed", l.failed);
    if l.failed > 0 && std::env::var("MOIE_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
