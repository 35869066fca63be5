//! Results table: one row per (grid point, matcher), written as CSV.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! cell parses back to the identical value.

use std::io::{Read, Write};

use anyhow::{anyhow, bail, Context, Result};
use boxmatch::trainloop::EvalReport;

pub const KEY_COLUMNS: [&str; 4] = ["point", "axis", "level", "matcher"];
pub const REPORT_COLUMNS: [&str; 15] = [
    "scenes",
    "proposals",
    "view_top1",
    "view_top2",
    "no_view_rate",
    "match_precision",
    "match_recall",
    "match_f1",
    "det_mean_iou",
    "det_class_acc",
    "detection_score",
    "loss_total",
    "loss_det",
    "loss_view",
    "loss_pro",
];

pub const MATCHERS: [&str; 2] = ["fbm", "baseline"];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub point: String,
    pub axis: String,
    pub level: f64,
    pub matcher: String,
    pub report: EvalReport,
}

impl SweepRow {
    /// Value of a report column by name.
    pub fn metric(&self, name: &str) -> Option<f64> {
        let r = &self.report;
        Some(match name {
            "scenes" => r.scenes as f64,
            "proposals" => r.proposals as f64,
            "view_top1" => r.view_top1,
            "view_top2" => r.view_top2,
            "no_view_rate" => r.no_view_rate,
            "match_precision" => r.match_precision,
            "match_recall" => r.match_recall,
            "match_f1" => r.match_f1,
            "det_mean_iou" => r.det_mean_iou,
            "det_class_acc" => r.det_class_acc,
            "detection_score" => r.detection_score,
            "loss_total" => r.loss_total,
            "loss_det" => r.loss_det,
            "loss_view" => r.loss_view,
            "loss_pro" => r.loss_pro,
            _ => return None,
        })
    }

    fn cells(&self) -> Vec<String> {
        let mut out = vec![
            self.point.clone(),
            self.axis.clone(),
            self.level.to_string(),
            self.matcher.clone(),
        ];
        out.extend(REPORT_COLUMNS.iter().map(|c| match *c {
            "scenes" => self.report.scenes.to_string(),
            "proposals" => self.report.proposals.to_string(),
            _ => self.metric(c).expect("known column").to_string(),
        }));
        out
    }

    fn from_cells(cells: &[&str]) -> Result<Self> {
        let f = |i: usize| -> Result<f64> {
            let col = header_name(i);
            cells[i]
                .parse::<f64>()
                .with_context(|| format!("column `{col}`: `{}` is not a number", cells[i]))
        };
        let u = |i: usize| -> Result<usize> {
            let col = header_name(i);
            cells[i]
                .parse::<usize>()
                .with_context(|| format!("column `{col}`: `{}` is not a count", cells[i]))
        };
        let k = KEY_COLUMNS.len();
        for (i, name) in KEY_COLUMNS.iter().enumerate().filter(|&(i, _)| i != 2) {
            if cells[i].is_empty() {
                bail!("column `{name}` is empty");
            }
        }
        Ok(Self {
            point: cells[0].to_string(),
            axis: cells[1].to_string(),
            level: f(2)?,
            matcher: cells[3].to_string(),
            report: EvalReport {
                scenes: u(k)?,
                proposals: u(k + 1)?,
                view_top1: f(k + 2)?,
                view_top2: f(k + 3)?,
                no_view_rate: f(k + 4)?,
                match_precision: f(k + 5)?,
                match_recall: f(k + 6)?,
                match_f1: f(k + 7)?,
                det_mean_iou: f(k + 8)?,
                det_class_acc: f(k + 9)?,
                detection_score: f(k + 10)?,
                loss_total: f(k + 11)?,
                loss_det: f(k + 12)?,
                loss_view: f(k + 13)?,
                loss_pro: f(k + 14)?,
            },
        })
    }
}

fn header_name(i: usize) -> &'static str {
    KEY_COLUMNS.iter().chain(REPORT_COLUMNS.iter()).nth(i).copied().unwrap_or("?")
}

pub fn header() -> Vec<&'static str> {
    KEY_COLUMNS.iter().chain(REPORT_COLUMNS.iter()).copied().collect()
}

fn matcher_rank(m: &str) -> usize {
    MATCHERS.iter().position(|&x| x == m).unwrap_or(MATCHERS.len())
}

/// Canonical row order: grid-point name, then matcher (`fbm` first).
pub fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        a.point
            .cmp(&b.point)
            .then_with(|| matcher_rank(&a.matcher).cmp(&matcher_rank(&b.matcher)))
            .then_with(|| a.matcher.cmp(&b.matcher))
    });
}

pub fn write_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    wr.write_record(header())?;
    for r in rows {
        wr.write_record(r.cells())?;
    }
    wr.flush()?;
    Ok(())
}

pub fn to_csv_string(rows: &[SweepRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    Ok(String::from_utf8(buf)?)
}

/// Parses a results table; errors name the offending line.
pub fn read_csv<R: Read>(r: R) -> Result<Vec<SweepRow>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(r);
    let head = rd.headers().context("line 1: unreadable header")?.clone();
    let expected = header();
    if head.iter().ne(expected.iter().copied()) {
        bail!("line 1: header does not match the results schema (expected `{}`)", expected.join(","));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            anyhow!("line {line}: {e}")
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != expected.len() {
            bail!("line {line}: expected {} fields, found {}", expected.len(), rec.len());
        }
        let cells: Vec<&str> = rec.iter().collect();
        rows.push(SweepRow::from_cells(&cells).with_context(|| format!("line {line}"))?);
    }
    Ok(rows)
}
