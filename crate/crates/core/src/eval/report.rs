//! CSV/JSON emission of ablation results, with a strict re-parse.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ablation::AblationTable;
use super::metrics::MetricsReport;
use crate::data::QType;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRow {
    pub cell_id: String,
    pub pgke: bool,
    pub qasc: bool,
    pub fusion: String,
    pub modality: String,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

fn header() -> String {
    let mut cols = vec![
        "cell_id".to_string(),
        "pgke".into(),
        "qasc".into(),
        "fusion".into(),
        "modality".into(),
        "seed".into(),
        "oa".into(),
        "aa".into(),
        "cider".into(),
    ];
    for t in QType::all() {
        cols.push(format!("acc_{}", t.as_str()));
    }
    cols.join(",")
}

/// Numeric cells carry 4 decimal places.
pub fn table_to_csv(rows: &[RunRow]) -> String {
    let mut out = String::new();
    out.push_str(&header());
    out.push('\n');
    for r in rows {
        let mut cols = vec![
            r.cell_id.clone(),
            r.pgke.to_string(),
            r.qasc.to_string(),
            r.fusion.clone(),
            r.modality.clone(),
            r.seed.to_string(),
            format!("{:.4}", r.report.oa),
            format!("{:.4}", r.report.aa),
            format!("{:.4}", r.report.cider),
        ];
        for t in QType::all() {
            let v = r.report.per_qtype.get(t.as_str()).copied();
            cols.push(match v {
                Some(v) => format!("{v:.4}"),
                None => String::new(),
            });
        }
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

/// Parse a CSV produced by [`table_to_csv`]. Fields not present in the CSV
/// (per-condition map, counts) come back empty.
pub fn parse_csv(text: &str) -> Result<Vec<RunRow>> {
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::Format("empty report".into()))?;
    if head != header() {
        return Err(Error::Format(format!("unexpected report header: {head}")));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let want = 9 + QType::all().len();
        if cols.len() != want {
            return Err(Error::Format(format!(
                "report line {}: {} columns, expected {want}",
                ln + 2,
                cols.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("line {}: bad {what}: {s:?}", ln + 2)))
        };
        let mut per_qtype = BTreeMap::new();
        for (i, t) in QType::all().iter().enumerate() {
            let cell = cols[9 + i];
            if !cell.is_empty() {
                per_qtype.insert(t.as_str().to_string(), parse_f(cell, "qtype accuracy")?);
            }
        }
        out.push(RunRow {
            cell_id: cols[0].to_string(),
            pgke: cols[1] == "true",
            qasc: cols[2] == "true",
            fusion: cols[3].to_string(),
            modality: cols[4].to_string(),
            seed: cols[5]
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad seed {:?}", ln + 2, cols[5])))?,
            report: MetricsReport {
                oa: parse_f(cols[6], "oa")?,
                aa: parse_f(cols[7], "aa")?,
                cider: parse_f(cols[8], "cider")?,
                per_qtype,
                ..MetricsReport::default()
            },
        });
    }
    Ok(out)
}

pub fn table_to_json(table: &AblationTable) -> Result<String> {
    serde_json::to_string_pretty(table).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_report(table: &AblationTable, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => table_to_csv(&table.rows),
        ReportFormat::Json => table_to_json(table)?,
    };
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, oa: f64) -> RunRow {
        let mut per_qtype = BTreeMap::new();
        per_qtype.insert("presence".to_string(), oa);
        per_qtype.insert("count".to_string(), oa / 2.0);
        RunRow {
            cell_id: "cell-a".into(),
            pgke: true,
            qasc: false,
            fusion: "add".into(),
            modality: "mul".into(),
            seed,
            report: MetricsReport {
                oa,
                aa: oa,
                cider: 1.2345,
                per_qtype,
                ..MetricsReport::default()
            },
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        let csv = table_to_csv(&[]);
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("cell_id,pgke,qasc,"));
    }

    #[test]
    fn one_row_has_four_decimal_values() {
        let csv = table_to_csv(&[row(3, 61.5)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].contains("61.5000"));
        assert!(lines[1].contains("1.2345"));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![row(1, 47.6190), row(2, 60.6667)];
        let emitted = table_to_csv(&rows);
        let parsed = parse_csv(&emitted).unwrap();
        let re_emitted = table_to_csv(&parsed);
        assert_eq!(emitted, re_emitted);
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].seed, 1);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(parse_csv("nope\n1,2,3").is_err());
    }
}
