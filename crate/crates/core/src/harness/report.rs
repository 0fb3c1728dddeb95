use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::experiment::{DecisionRecord, ExperimentReport};
use super::Result;
use crate::formats::{format_exponent, parse_exponent, FormatError, Header, FORMAT_VERSION};

const SUMMARY_KIND: &str = "spikecp-summary";
const RECORDS_KIND: &str = "spikecp-records";

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub r: String,
    pub p_targ: f64,
    pub coverage: f64,
    pub latency: f64,
    pub set_size: f64,
    pub ci_halfwidth: f64,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

impl SummaryRow {
    pub fn of(report: &ExperimentReport) -> Self {
        Self {
            mode: report.mode.clone(),
            k: report.k,
            r: format_exponent(report.r),
            p_targ: report.p_targ,
            coverage: round6(report.coverage()),
            latency: round6(report.latency()),
            set_size: round6(report.set_size()),
            ci_halfwidth: round6(report.ci_halfwidth()),
        }
    }
}

/// Summary table: a `#` header carrying `config_hash`, then one CSV row per report.
pub fn write_summary<W: Write>(reports: &[ExperimentReport], config_hash: &str, mut w: W) -> Result<()> {
    Header::new(SUMMARY_KIND)
        .with("version", FORMAT_VERSION)
        .with("config_hash", config_hash)
        .write_line(&mut w)?;
    let mut csv = csv::Writer::from_writer(w);
    for rep in reports {
        csv.serialize(SummaryRow::of(rep)).map_err(FormatError::from)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_summary<R: Read>(r: R) -> Result<(Vec<SummaryRow>, String)> {
    let (header, rest) = Header::read_from(r, SUMMARY_KIND)?;
    let rows = csv::Reader::from_reader(rest)
        .deserialize()
        .collect::<std::result::Result<Vec<SummaryRow>, _>>()
        .map_err(FormatError::from)?;
    Ok((rows, header.get("config_hash")?.to_string()))
}

/// Identifies the report a raw record belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportKey {
    pub mode: String,
    pub k: usize,
    pub r: f64,
    pub p_targ: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordRow {
    mode: String,
    #[serde(rename = "K")]
    k: usize,
    r: String,
    p_targ: f64,
    resample: usize,
    example: usize,
    label: usize,
    stop_time: usize,
    set: String,
    covered: u8,
}

/// Raw per-input records of every report, one CSV row each; sets are `;`-joined.
pub fn write_records<W: Write>(reports: &[ExperimentReport], config_hash: &str, mut w: W) -> Result<()> {
    Header::new(RECORDS_KIND)
        .with("version", FORMAT_VERSION)
        .with("config_hash", config_hash)
        .write_line(&mut w)?;
    let mut csv = csv::Writer::from_writer(w);
    for rep in reports {
        for rec in &rep.records {
            csv.serialize(RecordRow {
                mode: rep.mode.clone(),
                k: rep.k,
                r: format_exponent(rep.r),
                p_targ: rep.p_targ,
                resample: rec.resample,
                example: rec.example,
                label: rec.label,
                stop_time: rec.stop_time,
                set: rec.set.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
                covered: u8::from(rec.covered),
            })
            .map_err(FormatError::from)?;
        }
    }
    csv.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<(Vec<(ReportKey, DecisionRecord)>, String)> {
    let (header, rest) = Header::read_from(r, RECORDS_KIND)?;
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(rest).deserialize() {
        let row: RecordRow = row.map_err(FormatError::from)?;
        let set = if row.set.is_empty() {
            Vec::new()
        } else {
            row.set
                .split(';')
                .map(|c| {
                    c.parse()
                        .map_err(|_| FormatError::Record(format!("bad set '{}'", row.set)))
                })
                .collect::<std::result::Result<Vec<usize>, _>>()?
        };
        let r = parse_exponent(&row.r).map_err(FormatError::Record)?;
        out.push((
            ReportKey {
                mode: row.mode,
                k: row.k,
                r,
                p_targ: row.p_targ,
            },
            DecisionRecord {
                resample: row.resample,
                example: row.example,
                label: row.label,
                stop_time: row.stop_time,
                set,
                covered: row.covered == 1,
            },
        ));
    }
    Ok((out, header.get("config_hash")?.to_string()))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

type Metric = fn(&ExperimentReport) -> f64;

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Two-panel SVG of coverage and normalized latency against the swept value.
/// `points` are `(series, x, report)`; non-finite `x` are left out.
pub fn sweep_svg(x_label: &str, points: &[(String, f64, &ExperimentReport)]) -> String {
    let pts: Vec<_> = points.iter().filter(|(_, x, _)| x.is_finite()).collect();
    let mut series: Vec<&str> = Vec::new();
    for (s, _, _) in &pts {
        if !series.contains(&s.as_str()) {
            series.push(s);
        }
    }
    let (w, h) = (760.0, 340.0);
    let (pw, ph) = (300.0, 220.0);
    let (x0, y0) = (70.0, 40.0);
    let gap = 380.0;
    let xs: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (xmin, xmax) = nice_range(
        xs.iter().copied().fold(f64::INFINITY, f64::min),
        xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let panels: [(&str, Metric); 2] = [
        ("coverage", ExperimentReport::coverage),
        ("normalized latency", ExperimentReport::latency),
    ];
    for (pi, (title, metric)) in panels.iter().enumerate() {
        let left = x0 + pi as f64 * gap;
        let ys: Vec<f64> = pts.iter().map(|p| metric(p.2)).collect();
        let (ymin, ymax) = nice_range(
            ys.iter().copied().fold(f64::INFINITY, f64::min).min(1.0),
            ys.iter().copied().fold(f64::NEG_INFINITY, f64::max).clamp(0.0, 1.0),
        );
        let sx = |x: f64| left + (x - xmin) / (xmax - xmin) * pw;
        let sy = |y: f64| y0 + ph - (y - ymin) / (ymax - ymin) * ph;
        let _ = writeln!(
            svg,
            r#"<rect x="{left}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{title}</text>"#,
            left + pw / 2.0,
            y0 - 12.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
            left + pw / 2.0,
            y0 + ph + 34.0
        );
        for i in 0..=4 {
            let fx = xmin + (xmax - xmin) * i as f64 / 4.0;
            let fy = ymin + (ymax - ymin) * i as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{fx:.2}</text>"#,
                sx(fx),
                y0 + ph + 16.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{:.1}" text-anchor="end" dominant-baseline="middle">{fy:.2}</text>"#,
                left - 6.0,
                sy(fy)
            );
            let _ = writeln!(
                svg,
                r##"<line x1="{left}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
                left + pw,
                sy(fy),
                sy(fy)
            );
        }
        for (si, name) in series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            let mut line: Vec<(f64, f64)> = pts
                .iter()
                .filter(|p| p.0 == *name)
                .map(|p| (sx(p.1), sy(metric(p.2))))
                .collect();
            line.sort_by(|a, b| a.0.total_cmp(&b.0));
            let path: Vec<String> = line.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
            for (x, y) in &line {
                let _ = writeln!(svg, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#);
            }
        }
    }
    for (si, name) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let x = x0 + 90.0 * si as f64;
        let y = h - 20.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{}">{name}</text>"#,
            y - 10.0,
            x + 16.0,
            y
        );
    }
    svg.push_str("</svg>\n");
    svg
}
