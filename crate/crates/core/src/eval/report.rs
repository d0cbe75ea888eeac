use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalConfig, Result, RunRecord, Variant};
use crate::scene::Manifest;

/// Column layout of the per-click CSV. Row `click = 0` is the post-warm-up
/// state and has empty click columns.
pub const CSV_HEADER: &str = "scene,variant,seed,click,miou,point_index,corrected_label";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub mean_baseline_miou: f64,
    pub mean_initial_miou: f64,
    pub mean_final_miou: f64,
    /// Per target: mean NoC over the runs that reached it (`None` if none did).
    pub mean_noc: Vec<Option<f64>>,
    /// Per target: failures / runs.
    pub failure_rate: Vec<f64>,
    /// Mean mIoU after 0..=budget clicks; short runs carry their last value.
    pub mean_curve: Vec<f64>,
    pub clicked_accuracy: f64,
    pub min_clicked_accuracy: f64,
    pub mean_round_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub target_mious: Vec<f64>,
    pub click_budget: usize,
    pub variants: Vec<VariantSummary>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl VariantSummary {
    pub fn from_records(variant: Variant, records: &[&RunRecord], targets: usize, budget: usize) -> Self {
        let runs = records.len();
        let mean_noc = (0..targets)
            .map(|t| {
                let hit: Vec<f64> = records.iter().filter_map(|r| r.noc[t].map(|n| n as f64)).collect();
                (!hit.is_empty()).then(|| mean(hit))
            })
            .collect();
        let failure_rate = (0..targets)
            .map(|t| records.iter().filter(|r| r.noc[t].is_none()).count() as f64 / runs.max(1) as f64)
            .collect();
        let mean_curve = (0..=budget)
            .map(|k| mean(records.iter().map(|r| r.miou_curve[k.min(r.miou_curve.len() - 1)])))
            .collect();
        let hits: usize = records.iter().map(|r| r.clicked_hits).sum();
        let total: usize = records.iter().map(|r| r.clicked_total).sum();
        let per_run = records
            .iter()
            .filter(|r| r.clicked_total > 0)
            .map(|r| r.clicked_hits as f64 / r.clicked_total as f64)
            .fold(1.0, f64::min);
        Self {
            variant,
            runs,
            mean_baseline_miou: mean(records.iter().map(|r| r.baseline_miou)),
            mean_initial_miou: mean(records.iter().map(|r| r.initial_miou())),
            mean_final_miou: mean(records.iter().map(|r| r.final_miou())),
            mean_noc,
            failure_rate,
            mean_curve,
            clicked_accuracy: if total == 0 { 1.0 } else { hits as f64 / total as f64 },
            min_clicked_accuracy: per_run,
            mean_round_seconds: mean(records.iter().flat_map(|r| r.round_seconds.iter().copied())),
        }
    }
}

impl BenchmarkSummary {
    /// Groups by variant in the order the config lists them.
    pub fn from_records(records: &[RunRecord], cfg: &EvalConfig) -> Self {
        let mut variants = Vec::new();
        for &v in &cfg.variants {
            if variants.iter().any(|s: &VariantSummary| s.variant == v) {
                continue;
            }
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.variant == v).collect();
            if !rs.is_empty() {
                variants.push(VariantSummary::from_records(v, &rs, cfg.target_mious.len(), cfg.click_budget));
            }
        }
        Self { target_mious: cfg.target_mious.clone(), click_budget: cfg.click_budget, variants }
    }

    pub fn variant(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }

    /// Plain-text table: one row per variant, NoC and failure rate per target.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<18}", "variant");
        for t in &self.target_mious {
            let _ = write!(out, " {:>10} {:>8}", format!("NoC@{:.0}%", t * 100.0), "fail");
        }
        let _ = writeln!(out, " {:>8} {:>8} {:>8}", "base", "init", "final");
        for s in &self.variants {
            let _ = write!(out, "{:<18}", s.variant.name());
            for (noc, fail) in s.mean_noc.iter().zip(&s.failure_rate) {
                let noc = noc.map_or_else(|| "-".to_string(), |n| format!("{n:.2}"));
                let _ = write!(out, " {:>10} {:>7.1}%", noc, fail * 100.0);
            }
            let _ = writeln!(
                out,
                " {:>8.4} {:>8.4} {:>8.4}",
                s.mean_baseline_miou, s.mean_initial_miou, s.mean_final_miou
            );
        }
        out
    }

    /// Mean mIoU against clicks, one polyline per variant.
    pub fn svg(&self) -> String {
        const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];
        let (w, h, pad) = (640.0, 420.0, 50.0);
        let budget = self.click_budget.max(1) as f64;
        let lo = self
            .variants
            .iter()
            .flat_map(|s| s.mean_curve.iter().copied())
            .filter(|v| v.is_finite())
            .fold(1.0f64, f64::min);
        let lo = (lo * 10.0).floor() / 10.0;
        let x = |k: f64| pad + k / budget * (w - 2.0 * pad);
        let y = |v: f64| h - pad - (v - lo) / (1.0 - lo).max(1e-9) * (h - 2.0 * pad);
        let mut out = String::new();
        let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<path d="M{:.1} {:.1} V{:.1} H{:.1}" stroke="black" fill="none"/>"#,
            x(0.0),
            y(1.0),
            y(lo),
            x(budget)
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">clicks</text>"#, w / 2.0, h - 12.0);
        let _ = writeln!(out, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">mIoU</text>"#, h / 2.0, h / 2.0);
        let step = (budget / 6.0).ceil().max(1.0);
        let mut k = 0.0;
        while k <= budget {
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{k}</text>"#, x(k), h - pad + 16.0);
            k += step;
        }
        let mut v = lo;
        while v <= 1.0 + 1e-9 {
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, pad - 6.0, y(v) + 4.0);
            v += 0.1;
        }
        for (i, s) in self.variants.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> =
                s.mean_curve.iter().enumerate().map(|(k, &m)| format!("{:.1},{:.1}", x(k as f64), y(m))).collect();
            let _ = writeln!(out, r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, pts.join(" "));
            let ly = pad + 16.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#,
                w - pad,
                s.variant.name()
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

/// One row per record and click, in record order.
pub fn records_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        for (k, m) in r.miou_curve.iter().enumerate() {
            let _ = write!(out, "{},{},{},{k},{m:.6},", r.scene, r.variant, r.seed);
            match k.checked_sub(1).and_then(|i| r.clicks.get(i)) {
                Some(c) => {
                    let _ = writeln!(out, "{},{}", c.point_index, c.corrected_label);
                }
                None => out.push_str(",\n"),
            }
        }
    }
    out
}

/// Writes `results.csv`, `records.json`, `summary.json`, `summary.txt`,
/// `curves.svg` and, if given, a copy of the manifest.
pub fn write_artifacts(dir: &Path, records: &[RunRecord], summary: &BenchmarkSummary, manifest: Option<&Manifest>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("results.csv"), records_csv(records))?;
    std::fs::write(dir.join("records.json"), serde_json::to_string_pretty(records).expect("plain data"))?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary).expect("plain data"))?;
    std::fs::write(dir.join("summary.txt"), summary.table())?;
    std::fs::write(dir.join("curves.svg"), summary.svg())?;
    if let Some(m) = manifest {
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(m).expect("plain data"))?;
    }
    Ok(())
}
