//! Report tables (CSV and markdown) and heatmap grids.

use std::io::{Read, Write};

use icebench_core::report::{gap_vs_delete, table_order, DatasetReport, Heatmap};
use icebench_core::taxonomy::TaxonomyLabel;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 17] = [
    "dataset",
    "scorer",
    "method",
    "operator",
    "k",
    "M",
    "seed",
    "n",
    "n_degenerate",
    "win_rate",
    "ci_lo",
    "ci_hi",
    "mean_d",
    "sig_rate",
    "mean_nsr",
    "taxonomy",
    "gap_vs_delete",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl TableFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(TableFormat::Csv),
            "markdown" | "md" => Some(TableFormat::Markdown),
            _ => None,
        }
    }
}

fn fixed(x: f64) -> String {
    format!("{x:.3}")
}

/// Table cells in column order, with rows sorted by
/// (dataset, scorer, method, operator).
pub fn table_rows(reports: &[DatasetReport]) -> Vec<Vec<String>> {
    let mut sorted = reports.to_vec();
    table_order(&mut sorted);
    let gaps = gap_vs_delete(&sorted);
    sorted
        .iter()
        .zip(gaps)
        .map(|(r, gap)| {
            let c = &r.config;
            vec![
                c.dataset.clone(),
                c.scorer.clone(),
                c.method.clone(),
                c.operator.clone(),
                fixed(c.k),
                c.m.to_string(),
                c.seed.to_string(),
                r.n_examples.to_string(),
                r.n_degenerate.to_string(),
                fixed(r.win_rate),
                fixed(r.win_rate_ci.lo),
                fixed(r.win_rate_ci.hi),
                fixed(r.mean_d),
                fixed(r.sig_rate),
                fixed(r.mean_nsr),
                r.taxonomy.as_str().to_string(),
                gap.map(fixed).unwrap_or_default(),
            ]
        })
        .collect()
}

pub fn emit_tables(reports: &[DatasetReport], format: TableFormat, mut out: impl Write) -> std::io::Result<()> {
    let rows = table_rows(reports);
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(COLUMNS)?;
            for row in &rows {
                w.write_record(row)?;
            }
            w.flush()
        }
        TableFormat::Markdown => {
            writeln!(out, "| {} |", COLUMNS.join(" | "))?;
            writeln!(out, "|{}", "---|".repeat(COLUMNS.len()))?;
            for row in &rows {
                let cells: Vec<String> = row.iter().map(|c| c.replace('|', "\\|")).collect();
                writeln!(out, "| {} |", cells.join(" | "))?;
            }
            Ok(())
        }
    }
}

fn split_markdown_row(line: &str) -> Vec<String> {
    let inner = line.trim().trim_start_matches('|');
    let inner = inner.strip_suffix('|').unwrap_or(inner);
    let mut cells = Vec::new();
    let mut cur = String::new();
    let mut chars = inner.chars().peekable();
    while let Some(ch) = chars.next() {
        match ch {
            '\\' if chars.peek() == Some(&'|') => {
                cur.push('|');
                chars.next();
            }
            '|' => cells.push(std::mem::take(&mut cur).trim().to_string()),
            _ => cur.push(ch),
        }
    }
    cells.push(cur.trim().to_string());
    cells
}

/// Reads a markdown table back into header and rows.
pub fn parse_markdown(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = split_markdown_row(lines.next().ok_or_else(|| Error::Table("empty table".into()))?);
    let sep = lines.next().ok_or_else(|| Error::Table("missing separator row".into()))?;
    if !sep.chars().all(|c| matches!(c, '|' | '-' | ':' | ' ')) {
        return Err(Error::Table(format!("bad separator row {sep:?}")));
    }
    let mut rows = Vec::new();
    for l in lines {
        let row = split_markdown_row(l);
        if row.len() != header.len() {
            return Err(Error::Table(format!("row has {} cells, header has {}", row.len(), header.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// One row of a report table, as read back from CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dataset: String,
    pub scorer: String,
    pub method: String,
    pub operator: String,
    pub k: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    pub n: usize,
    pub n_degenerate: usize,
    pub win_rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub mean_d: f64,
    pub sig_rate: f64,
    pub mean_nsr: f64,
    pub taxonomy: String,
    pub gap_vs_delete: Option<f64>,
}

impl TableRow {
    pub fn taxonomy_label(&self) -> Option<TaxonomyLabel> {
        TaxonomyLabel::parse(&self.taxonomy)
    }
}

pub fn read_table_csv(input: impl Read) -> Result<Vec<TableRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| Error::Table(e.to_string()))?.clone();
    for col in ["dataset", "scorer", "method", "operator", "k", "win_rate"] {
        if !header.iter().any(|h| h == col) {
            return Err(Error::Table(format!("report table lacks column {col:?}")));
        }
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Table(format!("row {}: {e}", i + 2))))
        .collect()
}

pub fn write_heatmap_json(h: &Heatmap, mut out: impl Write) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut out, h)?;
    out.write_all(b"\n")
}

/// Long-form grid: one line per cell, with empty win rate and band for
/// missing cells.
pub fn write_heatmap_csv(h: &Heatmap, out: impl Write) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "col", "win_rate", "band", "reason"])?;
    for c in &h.cells {
        w.write_record([
            c.row.as_str(),
            c.col.as_str(),
            &c.win_rate.map(fixed).unwrap_or_default(),
            c.band.map(|b| b.as_str()).unwrap_or(""),
            c.reason.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush()
}
