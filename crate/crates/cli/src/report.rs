//! Text/CSV renderings of the multi-scale reports (Table 7 layout for
//! ablations, per-scale means for `bench`, a scale sweep for `profile`).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use scaleformer::metrics::{format_value, Metric, MetricReport};
use scaleformer::model::ModelConfig;
use scaleformer::profile::FlopReport;
use serde::Serialize;

/// One configuration of the §5.3 ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    NoRope,
    SeqToSpa,
    NoSap,
    Baseline,
}

impl Variant {
    /// Table 7 row order.
    pub const ALL: [Variant; 4] = [Variant::NoRope, Variant::SeqToSpa, Variant::NoSap, Variant::Baseline];

    /// Row label as printed in Table 7.
    pub fn label(self) -> &'static str {
        match self {
            Variant::NoRope => "w/o RoPE",
            Variant::SeqToSpa => "SeqT -> SpaT",
            Variant::NoSap => "w/o SAP",
            Variant::Baseline => "Baseline",
        }
    }

    /// The baseline config with this variant's component switched off.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Variant::NoRope => cfg.use_rope = false,
            Variant::SeqToSpa => cfg.use_seq_transformer = false,
            Variant::NoSap => cfg.use_sap = false,
            Variant::Baseline => {}
        }
        cfg
    }
}

/// Per-scale mean PSNR/SSIM of one trained variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    /// Mean loss of the final epoch.
    pub final_loss: f64,
    /// `(PSNR, SSIM)` per scale, aligned with [`AblationReport::scales`].
    pub scores: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub scales: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// `Ablation | PSNR@s | SSIM@s | ...`, one row per variant.
    pub fn to_table(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.label.len()).chain(["Ablation".len()]).max().unwrap_or(8);
        let mut out = format!("{:<label_w$}", "Ablation");
        for s in &self.scales {
            let _ = write!(out, " | {:>10} {:>10}", format!("PSNR@{s}"), format!("SSIM@{s}"));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<label_w$}", r.label);
            for (p, s) in &r.scores {
                let _ = write!(out, " | {:>10} {:>10}", format_value(*p), format_value(*s));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("ablation");
        for s in &self.scales {
            let _ = write!(out, ",PSNR@{s},SSIM@{s}");
        }
        out.push_str(",final_loss\n");
        for r in &self.rows {
            out.push_str(&r.label);
            for (p, s) in &r.scores {
                let _ = write!(out, ",{},{}", format_value(*p), format_value(*s));
            }
            let _ = writeln!(out, ",{:.8}", r.final_loss);
        }
        out
    }
}

/// Per-scale means of several methods (`bench`).
#[derive(Debug, Clone, Default)]
pub struct BenchSummary {
    /// `(scale, method) → report`, kept in scale order.
    pub entries: BTreeMap<(usize, String), MetricReport>,
}

impl BenchSummary {
    pub fn to_table(&self) -> String {
        let method_w = self.entries.keys().map(|(_, m)| m.len()).chain(["method".len()]).max().unwrap_or(6);
        let mut out = format!("{:>6} {:>3} {:<method_w$}", "scale", "n", "method");
        for m in Metric::ALL {
            let _ = write!(out, " {:>10}", m.name());
        }
        out.push('\n');
        for ((scale, method), report) in &self.entries {
            let _ = write!(out, "{scale:>6} {:>3} {method:<method_w$}", report.images.len());
            for m in Metric::ALL {
                let _ = write!(out, " {:>10}", report.means.get(&m).map_or("-".into(), |&v| format_value(v)));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale,n,method");
        for m in Metric::ALL {
            let _ = write!(out, ",{}", m.name());
        }
        out.push('\n');
        for ((scale, method), report) in &self.entries {
            let _ = write!(out, "{scale},{},{method}", report.images.len());
            for m in Metric::ALL {
                out.push(',');
                if let Some(&v) = report.means.get(&m) {
                    out.push_str(&format_value(v));
                }
            }
            out.push('\n');
        }
        out
    }
}

const PROFILE_COLUMNS: [&str; 14] = [
    "scale",
    "tokens",
    "encoder",
    "spatial_attention",
    "sequence_attention",
    "cross",
    "ffn",
    "head",
    "total_macs",
    "gflops",
    "global_attention_macs",
    "peak_elements",
    "peak_mib",
    "batch",
];

fn profile_cells(r: &FlopReport, peak_elements: u64, peak_bytes: u64, batch: usize) -> Vec<String> {
    let mut cells = vec![r.height.to_string(), r.tokens.to_string()];
    cells.extend(r.stages().iter().map(|(_, v)| v.to_string()));
    cells.push(r.total.to_string());
    cells.push(format!("{:.4}", r.gflops()));
    cells.push(r.global_attention_total.to_string());
    cells.push(peak_elements.to_string());
    cells.push(format!("{:.3}", peak_bytes as f64 / (1024.0 * 1024.0)));
    cells.push(batch.to_string());
    cells
}

/// One profiled scale: FLOP report plus the batch memory estimate.
#[derive(Debug, Clone)]
pub struct ProfileRow {
    pub flops: FlopReport,
    pub peak_elements: u64,
    pub peak_bytes: u64,
    pub batch: usize,
}

pub fn profile_table(rows: &[ProfileRow]) -> String {
    let cells: Vec<Vec<String>> =
        rows.iter().map(|r| profile_cells(&r.flops, r.peak_elements, r.peak_bytes, r.batch)).collect();
    let widths: Vec<usize> = (0..PROFILE_COLUMNS.len())
        .map(|i| cells.iter().map(|c| c[i].len()).chain([PROFILE_COLUMNS[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, items: &[&str]| {
        let row: Vec<String> = items.iter().zip(&widths).map(|(s, &w)| format!("{s:>w$}")).collect();
        out.push_str(row.join(" ").trim_end());
        out.push('\n');
    };
    line(&mut out, &PROFILE_COLUMNS);
    for c in &cells {
        line(&mut out, &c.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut out = PROFILE_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&profile_cells(&r.flops, r.peak_elements, r.peak_bytes, r.batch).join(","));
        out.push('\n');
    }
    out
}
