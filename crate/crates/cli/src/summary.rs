use std::fmt::Write as _;

use anyhow::{anyhow, Result};
use moie_core::shortcut::{GroupMetrics, ShortcutReport};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvgWorst {
    pub average: f64,
    pub worst: f64,
}

impl From<&GroupMetrics> for AvgWorst {
    fn from(m: &GroupMetrics) -> Self {
        AvgWorst { average: m.average, worst: m.worst }
    }
}

/// One row of the shortcut summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub top_concept: String,
    pub detected: Vec<String>,
    pub blackbox: AvgWorst,
    pub blackbox_mdn: AvgWorst,
    /// Robust MoIE on covered samples.
    pub moie: AvgWorst,
    pub moie_r: AvgWorst,
    pub violations: usize,
}

impl SeedSummary {
    pub fn from_report(seed: u64, report: &ShortcutReport) -> Result<Self> {
        let missing = |what: &str| anyhow!("report for seed {seed} has no {what}");
        let name =
            |c: usize| report.ranking.iter().find(|s| s.concept == c).map_or(format!("c{c}"), |s| s.name.clone());
        Ok(SeedSummary {
            seed,
            top_concept: report.ranking.first().map(|s| s.name.clone()).unwrap_or_default(),
            detected: report.detected.iter().map(|&c| name(c)).collect(),
            blackbox: (&report.blackbox_groups).into(),
            blackbox_mdn: report.finetuned_groups.as_ref().ok_or_else(|| missing("fine-tuned blackbox"))?.into(),
            moie: report.robust_covered_groups.as_ref().ok_or_else(|| missing("robust MoIE"))?.into(),
            moie_r: report.robust_moie_groups.as_ref().ok_or_else(|| missing("robust MoIE+R"))?.into(),
            violations: report.violations.len(),
        })
    }

    fn columns(&self) -> [f64; 8] {
        [
            self.blackbox.average,
            self.blackbox.worst,
            self.blackbox_mdn.average,
            self.blackbox_mdn.worst,
            self.moie.average,
            self.moie.worst,
            self.moie_r.average,
            self.moie_r.worst,
        ]
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn render_summary(rows: &[SeedSummary]) -> String {
    let mut out = String::from(
        "# Shortcut summary (accuracy %, evaluation split)\n\n\
         | seed | top concept | detected | BB avg | BB worst | BB w MDN avg | BB w MDN worst | MoIE avg | MoIE worst | MoIE+R avg | MoIE+R worst |\n\
         |---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = write!(out, "| {} | {} | {} |", r.seed, r.top_concept, r.detected.join(", "));
        for v in r.columns() {
            let _ = write!(out, " {:.1} |", 100.0 * v);
        }
        out.push('\n');
    }
    if rows.len() > 1 {
        out.push_str("| mean ± std | | |");
        for c in 0..8 {
            let col: Vec<f64> = rows.iter().map(|r| 100.0 * r.columns()[c]).collect();
            let (m, s) = mean_std(&col);
            let _ = write!(out, " {m:.1} ± {s:.1} |");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert!((m - 5.0).abs() < 1e-12);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert!(mean_std(&[]).0.is_nan());
    }

    fn row(seed: u64, v: f64) -> SeedSummary {
        let p = AvgWorst { average: v, worst: v / 2.0 };
        SeedSummary {
            seed,
            top_concept: "spurious_0".into(),
            detected: vec!["spurious_0".into()],
            blackbox: p,
            blackbox_mdn: p,
            moie: p,
            moie_r: p,
            violations: 0,
        }
    }

    #[test]
    fn summary_has_aggregate_row_only_for_sweeps() {
        let one = render_summary(&[row(0, 0.8)]);
        assert!(!one.contains("mean ± std"));
        let many = render_summary(&[row(0, 0.8), row(1, 0.9)]);
        assert!(many.contains("| mean ± std | | | 85.0 ± 7.1 | 42.5 ± 3.5 |"));
        assert_eq!(many.lines().filter(|l| l.starts_with("| 0 |") || l.starts_with("| 1 |")).count(), 2);
    }
}
