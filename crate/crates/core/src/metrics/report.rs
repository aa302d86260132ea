use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CaseMetrics;
use crate::error::{Error, Result};

pub const METRIC_COLUMNS: [&str; 7] = ["DC", "DG", "VOE", "RVD", "ASSD", "MSD", "RMSD"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cases: usize,
    /// Mean per-case Dice.
    pub dc: f64,
    /// Dice of pooled counts.
    pub dg: f64,
    pub voe: f64,
    pub rvd: Option<f64>,
    pub rvd_abs: Option<f64>,
    pub assd_mm: Option<f64>,
    pub msd_mm: Option<f64>,
    pub rmsd_mm: Option<f64>,
    pub rvd_degenerate: Vec<String>,
    pub surface_degenerate: Vec<String>,
    pub mean_seconds: Option<f64>,
}

impl Summary {
    /// Values in [`METRIC_COLUMNS`] order.
    pub fn columns(&self) -> [Option<f64>; 7] {
        [
            Some(self.dc),
            Some(self.dg),
            Some(self.voe),
            self.rvd,
            self.assd_mm,
            self.msd_mm,
            self.rmsd_mm,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Row label, usually the schedule.
    pub name: String,
    /// Seed, config hash and similar provenance.
    pub metadata: BTreeMap<String, String>,
    pub summary: Summary,
    pub cases: Vec<CaseMetrics>,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One row per report in the order given. With several rows, the best DC
/// and DG are marked with `*`. Undefined values print as `—`.
pub fn render_table(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to tabulate"));
    }
    let best = |f: fn(&Summary) -> f64| {
        reports
            .iter()
            .map(|r| f(&r.summary))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let (best_dc, best_dg) = (best(|s| s.dc), best(|s| s.dg));
    let mark = reports.len() > 1;

    let mut rows: Vec<Vec<String>> = vec![std::iter::once("Approach".to_string())
        .chain(METRIC_COLUMNS.iter().map(|c| c.to_string()))
        .collect()];
    for r in reports {
        let mut row = vec![r.name.clone()];
        for (i, v) in r.summary.columns().into_iter().enumerate() {
            let mut cell = match v {
                Some(v) => format!("{v:.3}"),
                None => "—".to_string(),
            };
            let is_best =
                (i == 0 && r.summary.dc == best_dc) || (i == 1 && r.summary.dg == best_dg);
            if mark && is_best {
                cell.push('*');
            }
            row.push(cell);
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, &w))| {
                let pad = w - cell.chars().count();
                if i == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).expect("write to string");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(name: &str, dc: f64, dg: f64, rvd: Option<f64>) -> MetricsReport {
        MetricsReport {
            name: name.into(),
            metadata: BTreeMap::new(),
            summary: Summary {
                cases: 1,
                dc,
                dg,
                voe: 0.1,
                rvd,
                rvd_abs: rvd.map(f64::abs),
                assd_mm: Some(1.0),
                msd_mm: Some(2.0),
                rmsd_mm: Some(1.5),
                rvd_degenerate: vec![],
                surface_degenerate: vec![],
                mean_seconds: None,
            },
            cases: vec![],
        }
    }

    #[test]
    fn header_order_and_marks() {
        let t = render_table(&[
            report("a", 0.8, 0.7, Some(0.1)),
            report("b", 0.7, 0.9, None),
        ])
        .unwrap();
        let lines: Vec<&str> = t.lines().collect();
        let header: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(
            header,
            ["Approach", "DC", "DG", "VOE", "RVD", "ASSD", "MSD", "RMSD"]
        );
        assert!(lines[1].contains("0.800*") && !lines[1].contains("0.700*"));
        assert!(lines[2].contains("0.900*") && lines[2].contains('—'));
    }

    #[test]
    fn single_row_unmarked() {
        let t = render_table(&[report("a", 0.8, 0.7, Some(0.1))]).unwrap();
        assert!(!t.contains('*'));
        assert!(render_table(&[]).is_err());
    }
}
