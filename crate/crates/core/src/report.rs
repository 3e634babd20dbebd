//! Metric tables: CSV/JSON emission, parsing, and SVG bar charts.
//!
//! Floats are written in shortest round-trip form so `parse(emit(r)) == r`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLEAN_ROW: &str = "clean";
pub const MEAN_ROW: &str = "mean";
const CSV_HEADER: &str = "preset,top1,top5,divergence";
const SPEARMAN_TAG: &str = "# spearman=";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub preset: String,
    pub top1: f64,
    pub top5: f64,
    #[serde(default)]
    pub divergence: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Rank correlation between divergence and top-1 over the preset rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::param("format", format!("`{other}` is not csv|json"))),
        }
    }
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(ReportFormat::Csv),
            Some("json") => Ok(ReportFormat::Json),
            _ => Err(Error::param("path", format!("{} is neither .csv nor .json", path.display()))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Splits one CSV record, honouring double-quoted fields.
fn split_csv(line: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        match (quoted, c) {
            (true, '"') if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            (true, '"') => quoted = false,
            (false, '"') if cur.is_empty() => quoted = true,
            (false, ',') => out.push(std::mem::take(&mut cur)),
            (_, c) => cur.push(c),
        }
    }
    if quoted {
        return Err(Error::Report(format!("unterminated quote in `{line}`")));
    }
    out.push(cur);
    Ok(out)
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Report(format!("bad {what} value `{field}`")))
}

impl Report {
    pub fn new(rows: Vec<ReportRow>) -> Self {
        Report { rows, spearman: None }
    }

    pub fn row(&self, preset: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.preset == preset)
    }

    /// Rows other than the clean and mean rows.
    pub fn preset_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows
            .iter()
            .filter(|r| r.preset != CLEAN_ROW && r.preset != MEAN_ROW)
    }

    /// Unweighted mean of the preset rows (divergence only if every row has one).
    pub fn mean_row(&self) -> Option<ReportRow> {
        let rows: Vec<&ReportRow> = self.preset_rows().collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let divergence = rows
            .iter()
            .map(|r| r.divergence)
            .sum::<Option<f64>>()
            .map(|s| s / n);
        Some(ReportRow {
            preset: MEAN_ROW.into(),
            top1: rows.iter().map(|r| r.top1).sum::<f64>() / n,
            top5: rows.iter().map(|r| r.top5).sum::<f64>() / n,
            divergence,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let div = r.divergence.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", csv_field(&r.preset), r.top1, r.top5, div);
        }
        if let Some(rho) = self.spearman {
            let _ = writeln!(s, "{SPEARMAN_TAG}{rho}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Report(format!("expected header `{CSV_HEADER}`")));
        }
        let mut report = Report::default();
        for line in lines.filter(|l| !l.is_empty()) {
            if let Some(v) = line.strip_prefix(SPEARMAN_TAG) {
                report.spearman = Some(parse_f64(v, "spearman")?);
                continue;
            }
            let f = split_csv(line)?;
            if f.len() != 4 {
                return Err(Error::Report(format!("expected 4 fields in `{line}`")));
            }
            report.rows.push(ReportRow {
                preset: f[0].clone(),
                top1: parse_f64(&f[1], "top1")?,
                top5: parse_f64(&f[2], "top5")?,
                divergence: if f[3].is_empty() { None } else { Some(parse_f64(&f[3], "divergence")?) },
            });
        }
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json(),
        }
    }

    pub fn emit(&self, format: ReportFormat, path: &Path) -> Result<()> {
        write_file(path, self.render(format).as_bytes())
    }

    /// Parses a report, choosing the format from the file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match ReportFormat::from_path(path)? {
            ReportFormat::Csv => Self::from_csv(&text),
            ReportFormat::Json => Self::from_json(&text),
        }
    }

    /// Dual-axis bar chart: top-1 on the left axis, divergence on the right.
    pub fn to_svg(&self, title: &str) -> String {
        let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.preset != MEAN_ROW).collect();
        let (left, right, top, bottom) = (60.0, 60.0, 40.0, 110.0);
        let slot = 36.0;
        let plot_h = 240.0;
        let width = left + right + slot * rows.len().max(1) as f64;
        let height = top + plot_h + bottom;
        let max_div = rows
            .iter()
            .filter_map(|r| r.divergence)
            .fold(0.0f64, f64::max);
        let div_scale = if max_div > 0.0 { max_div } else { 1.0 };
        let base = top + plot_h;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, xml_escape(title));
        let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{base}" stroke="black"/>"#);
        let rx = width - right;
        let _ = writeln!(s, r#"<line x1="{rx}" y1="{top}" x2="{rx}" y2="{base}" stroke="black"/>"#);
        let _ = writeln!(s, r#"<line x1="{left}" y1="{base}" x2="{rx}" y2="{base}" stroke="black"/>"#);
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let y = base - f * plot_h;
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"#, left - 4.0, y + 4.0, f);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{:.3}</text>"#, rx + 4.0, y + 4.0, f * div_scale);
        }
        let _ = writeln!(s, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">Top-1 accuracy</text>"#, top + plot_h / 2.0, top + plot_h / 2.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" transform="rotate(90 {:.1} {:.1})" text-anchor="middle">Feature divergence</text>"#, width - 12.0, top + plot_h / 2.0, width - 12.0, top + plot_h / 2.0);
        for (i, r) in rows.iter().enumerate() {
            let x = left + slot * i as f64 + 4.0;
            let h1 = r.top1.clamp(0.0, 1.0) * plot_h;
            let _ = writeln!(s, r##"<rect x="{x:.1}" y="{:.1}" width="13" height="{h1:.1}" fill="#4472c4"/>"##, base - h1);
            if let Some(d) = r.divergence {
                let h2 = (d / div_scale).clamp(0.0, 1.0) * plot_h;
                let _ = writeln!(s, r##"<rect x="{:.1}" y="{:.1}" width="13" height="{h2:.1}" fill="#ed7d31"/>"##, x + 14.0, base - h2);
            }
            let lx = x + 14.0;
            let ly = base + 8.0;
            let _ = writeln!(s, r#"<text x="{lx:.1}" y="{ly:.1}" transform="rotate(60 {lx:.1} {ly:.1})">{}</text>"#, xml_escape(&r.preset));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        Report {
            rows: vec![
                ReportRow { preset: "clean".into(), top1: 0.9, top5: 1.0, divergence: Some(0.0) },
                ReportRow { preset: "Lord Kelvin".into(), top1: 0.1 + 0.2, top5: 0.875, divergence: Some(1.0 / 3.0) },
                ReportRow { preset: "odd, \"name\"".into(), top1: 0.5, top5: 0.75, divergence: None },
            ],
            spearman: Some(-0.4),
        }
    }

    #[test]
    fn csv_and_json_round_trip() {
        let r = sample();
        assert_eq!(Report::from_csv(&r.to_csv()).unwrap(), r);
        assert_eq!(Report::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(Report::default().to_csv(), format!("{CSV_HEADER}\n"));
        assert_eq!(Report::from_csv(&Report::default().to_csv()).unwrap(), Report::default());
    }

    #[test]
    fn mean_row_skips_clean() {
        let m = sample().mean_row().unwrap();
        assert_eq!(m.top1, (0.1 + 0.2 + 0.5) / 2.0);
        assert_eq!(m.divergence, None);
    }

    #[test]
    fn svg_is_stable() {
        let r = sample();
        assert_eq!(r.to_svg("t"), r.to_svg("t"));
        assert!(r.to_svg("t").starts_with("<svg"));
    }
}
