//! Gap tables: one row per training variant, test error on the unfiltered,
//! radial and random test sets, and the spread between them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::{PreprocessMode, Variant};
use crate::error::{Error, Result};
use crate::model::{ConvNetConfig, TrainConfig};

/// Test variants, in column order.
pub const TEST_VARIANTS: [Variant; 3] = [Variant::Unfiltered, Variant::Radial, Variant::Random];

/// `max - min` over the entries.
pub fn gap_of_row(errors: &[f64]) -> Result<f64> {
    if errors.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "a gap needs at least 2 errors, got {}",
            errors.len()
        )));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("gap input".into()));
    }
    let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// Test errors (fractions in `[0, 1]`) of one trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub train_variant: Variant,
    pub unfiltered: f64,
    pub radial: f64,
    pub random: f64,
    pub gap: f64,
}

impl GapRow {
    pub fn new(train_variant: Variant, unfiltered: f64, radial: f64, random: f64) -> Result<Self> {
        let errors = [unfiltered, radial, random];
        if let Some(e) = errors.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(Error::InvalidParameter(format!("error rate {e} outside [0, 1]")));
        }
        Ok(GapRow {
            train_variant,
            unfiltered,
            radial,
            random,
            gap: gap_of_row(&errors)?,
        })
    }

    pub fn errors(&self) -> [f64; 3] {
        [self.unfiltered, self.radial, self.random]
    }
}

/// Run parameters recorded alongside the table. Wall-clock time is kept out
/// so that identical runs produce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub dataset: String,
    pub train_count: usize,
    pub test_count: usize,
    pub radius: f64,
    pub drop_prob: f64,
    #[serde(with = "crate::seed_serde")]
    pub mask_seed: u64,
    pub preprocess: PreprocessMode,
    pub model: ConvNetConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_augmented: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<GapRow>,
}

impl GapReport {
    pub fn row(&self, train_variant: Variant) -> Option<&GapRow> {
        self.rows.iter().find(|r| r.train_variant == train_variant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Full-precision error fractions.
    Csv,
    /// Percentages to two decimals.
    Markdown,
    /// Lossless TOML including metadata.
    Toml,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "toml" => Ok(ReportFormat::Toml),
            other => Err(Error::InvalidParameter(format!("unknown report format '{other}'"))),
        }
    }
}

const CSV_HEADER: &str = "train_variant,unfiltered,radial,random,gap";
const MD_HEADER: &str = "| Train \\ Test | Unfiltered | Radial | Random | Gen. Gap |";

pub fn emit_report(report: &GapReport, format: ReportFormat) -> Result<String> {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in &report.rows {
                let _ = writeln!(out, "{},{},{},{},{}", r.train_variant, r.unfiltered, r.radial, r.random, r.gap);
            }
        }
        ReportFormat::Markdown => {
            out.push_str(MD_HEADER);
            out.push_str("\n|---|---:|---:|---:|---:|\n");
            for r in &report.rows {
                let _ = write!(out, "| {} |", r.train_variant);
                for v in [r.unfiltered, r.radial, r.random, r.gap] {
                    let _ = write!(out, " {:.2} |", 100.0 * v);
                }
                out.push('\n');
            }
        }
        ReportFormat::Toml => {
            out = toml::to_string(report).map_err(|e| Error::Config(format!("report serialization: {e}")))?;
        }
    }
    Ok(out)
}

pub fn parse_report_toml(text: &str) -> Result<GapReport> {
    toml::from_str(text).map_err(|e| Error::Config(format!("report parse: {e}")))
}

fn parse_number(cell: &str) -> Result<f64> {
    cell.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad number '{}' in report table", cell.trim())))
}

pub fn parse_report_csv(text: &str) -> Result<Vec<GapRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config("report csv: unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 5 {
                return Err(Error::Config(format!("report csv: expected 5 cells in '{line}'")));
            }
            Ok(GapRow {
                train_variant: cells[0].parse()?,
                unfiltered: parse_number(cells[1])?,
                radial: parse_number(cells[2])?,
                random: parse_number(cells[3])?,
                gap: parse_number(cells[4])?,
            })
        })
        .collect()
}

/// Reads back a markdown table; values return as fractions.
pub fn parse_report_markdown(text: &str) -> Result<Vec<GapRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(MD_HEADER) {
        return Err(Error::Config("report markdown: unexpected header".into()));
    }
    lines.next();
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let cells: Vec<&str> = line.trim().trim_matches('|').split('|').collect();
            if cells.len() != 5 {
                return Err(Error::Config(format!("report markdown: expected 5 cells in '{line}'")));
            }
            let pct = |c: &str| parse_number(c).map(|v| v / 100.0);
            Ok(GapRow {
                train_variant: cells[0].trim().parse()?,
                unfiltered: pct(cells[1])?,
                radial: pct(cells[2])?,
                random: pct(cells[3])?,
                gap: pct(cells[4])?,
            })
        })
        .collect()
}
