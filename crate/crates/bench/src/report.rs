//! Degradation charts (metric vs. disturbance level, one series per
//! matcher) and a JSON summary, rendered from a results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::table::{SweepRow, MATCHERS};

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#7f7f7f"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub point: String,
    pub level: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub matcher: String,
    /// Value on the undisturbed point, when the table has one.
    pub clean: Option<f64>,
    pub points: Vec<SeriesPoint>,
    /// Largest drop below `clean` over the axis (0 without a clean value).
    pub max_decline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSummary {
    pub axis: String,
    pub series: Vec<Series>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metric: String,
    pub axes: Vec<AxisSummary>,
}

fn matcher_order(m: &str) -> (usize, &str) {
    (MATCHERS.iter().position(|&x| x == m).unwrap_or(MATCHERS.len()), m)
}

/// Groups rows by axis (the `clean` axis feeds every chart's baseline
/// value rather than getting a chart of its own).
pub fn summarize(rows: &[SweepRow], metric: &str) -> Result<Summary> {
    let value = |r: &SweepRow| r.metric(metric).with_context(|| format!("unknown metric `{metric}`"));
    let mut clean: BTreeMap<&str, f64> = BTreeMap::new();
    let mut by_axis: BTreeMap<&str, BTreeMap<(usize, &str), Vec<SeriesPoint>>> = BTreeMap::new();
    for r in rows {
        let v = value(r)?;
        if r.axis == "clean" {
            clean.insert(&r.matcher, v);
            continue;
        }
        by_axis
            .entry(&r.axis)
            .or_default()
            .entry(matcher_order(&r.matcher))
            .or_default()
            .push(SeriesPoint {
                point: r.point.clone(),
                level: r.level,
                value: v,
            });
    }
    if by_axis.is_empty() {
        // A clean-only table still gets a (single-point) chart.
        for r in rows {
            by_axis
                .entry("clean")
                .or_default()
                .entry(matcher_order(&r.matcher))
                .or_default()
                .push(SeriesPoint {
                    point: r.point.clone(),
                    level: r.level,
                    value: value(r)?,
                });
        }
    }
    let axes = by_axis
        .into_iter()
        .map(|(axis, series)| AxisSummary {
            axis: axis.to_string(),
            series: series
                .into_iter()
                .map(|((_, matcher), mut points)| {
                    points.sort_by(|a, b| a.level.total_cmp(&b.level).then_with(|| a.point.cmp(&b.point)));
                    let c = clean.get(matcher).copied();
                    let max_decline = c.map_or(0.0, |c| points.iter().map(|p| c - p.value).fold(0.0, f64::max));
                    Series {
                        matcher: matcher.to_string(),
                        clean: c,
                        points,
                        max_decline,
                    }
                })
                .collect(),
        })
        .collect();
    Ok(Summary {
        metric: metric.to_string(),
        axes,
    })
}

fn range(vals: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = vals.clone().fold(f64::INFINITY, f64::min);
    let hi = vals.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

/// One line chart. Every marker carries its exact data as attributes.
pub fn render_svg(axis: &AxisSummary, metric: &str) -> String {
    let all = axis.series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = range(all.clone().map(|p| p.level));
    let (mut y0, mut y1) = range(all.clone().map(|p| p.value));
    if y0 >= 0.0 && y1 <= 1.0 {
        (y0, y1) = (0.0, 1.0);
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-axis="{}" data-metric="{metric}">"#,
        axis.axis
    );
    let _ = writeln!(s, r##"<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{metric} vs {}</text>"#,
        WIDTH / 2.0,
        axis.axis
    );
    let (bx, by) = (MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r##"<path d="M{bx:.2} {:.2} L{bx:.2} {by:.2} L{:.2} {by:.2}" stroke="#000000" fill="none"/>"##,
        MARGIN,
        WIDTH - MARGIN
    );
    let mut levels: Vec<f64> = all.clone().map(|p| p.level).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    for l in levels {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="10">{l}</text>"#,
            sx(l),
            by + 14.0
        );
    }
    for (t, v) in [(y0, y0), (y1, y1)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.3}</text>"#,
            bx - 4.0,
            sy(t) + 3.0
        );
    }
    for (k, series) in axis.series.iter().enumerate() {
        let color = COLORS[k.min(COLORS.len() - 1)];
        let pts: Vec<String> = series
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.level), sy(p.value)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-series="{}" points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            series.matcher,
            pts.join(" ")
        );
        for p in &series.points {
            let _ = writeln!(
                s,
                r#"<circle data-series="{}" data-point="{}" data-x="{}" data-y="{}" cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                series.matcher,
                p.point,
                p.level,
                p.value,
                sx(p.level),
                sy(p.value)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 70.0,
            MARGIN + 14.0 * k as f64,
            series.matcher
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<axis>.svg` per axis and `summary.json` into `out_dir`; returns
/// the written paths in order.
pub fn write_report(rows: &[SweepRow], metric: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        bail!("results table has no rows to plot");
    }
    let summary = summarize(rows, metric)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut written = Vec::new();
    for axis in &summary.axes {
        let path = out_dir.join(format!("{}.svg", axis.axis));
        std::fs::write(&path, render_svg(axis, metric)).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    let path = out_dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
    written.push(path);
    Ok(written)
}

/// Extracts `(series, x, y)` from a rendered chart's markers.
pub fn parse_svg_points(svg: &str) -> Vec<(String, f64, f64)> {
    fn attr<'a>(line: &'a str, name: &str) -> Option<&'a str> {
        let key = format!(" {name}=\"");
        let start = line.find(&key)? + key.len();
        let len = line[start..].find('"')?;
        Some(&line[start..start + len])
    }
    svg.lines()
        .filter(|l| l.starts_with("<circle"))
        .filter_map(|l| {
            Some((
                attr(l, "data-series")?.to_string(),
                attr(l, "data-x")?.parse().ok()?,
                attr(l, "data-y")?.parse().ok()?,
            ))
        })
        .collect()
}
