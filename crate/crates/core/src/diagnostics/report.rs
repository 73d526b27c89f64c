use std::fmt::Write as _;
use std::path::Path;

use super::alignment::AlignmentPoint;
use super::spectrum::SpectrumReport;
use super::ssim::CurveRow;
use crate::error::{Error, Result};

/// Header plus string cells; numbers use the shortest round-trip form.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub fn column_f64(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name)
            .ok_or_else(|| Error::Format(format!("no column {name}")))?
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| Error::Format(format!("{name}: {s:?}"))))
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Table { header, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn spectrum_table(reports: &[SpectrumReport]) -> Table {
    let mut t = Table::new(&["variant", "index", "singular_value"]);
    for r in reports {
        for (i, v) in r.values.iter().enumerate() {
            t.push(vec![r.label.clone(), i.to_string(), num(*v)]);
        }
    }
    t
}

pub fn curve_table(rows: &[CurveRow]) -> Table {
    let mut t = Table::new(&["level", "scale", "mean_ssim", "std_ssim"]);
    for r in rows {
        t.push(vec![r.level.to_string(), num(r.scale), num(r.mean), num(r.std)]);
    }
    t
}

pub fn alignment_table(points: &[AlignmentPoint]) -> Table {
    let mut t = Table::new(&["sample", "patch", "ssim", "cosine"]);
    for p in points {
        t.push(vec![p.sample.clone(), p.patch.to_string(), num(p.ssim), num(p.cosine)]);
    }
    t
}

/// `key: value` lines.
pub fn summary_block(entries: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        writeln!(s, "{k}: {v}").unwrap();
    }
    s
}

pub fn parse_summary(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once(": ")
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("summary line {l:?}")))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mark {
    Line,
    Scatter,
}

/// One plotted series.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub mark: Mark,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal SVG chart with labelled axes, ticks at the data range ends and
/// a legend. Output depends only on the inputs.
pub fn svg_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, m) = (640.0, 420.0, 60.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, w / 2.0, esc(title)).unwrap();
    writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m).unwrap();
    writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, h - 15.0, esc(x_label)).unwrap();
    writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        esc(y_label)
    )
    .unwrap();
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="{anchor}" font-size="11">{v:.4}</text>"#, sx(v), h - m + 16.0).unwrap();
    }
    for v in [y0, y1] {
        writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="11">{v:.4}</text>"#, m - 4.0, sy(v) + 4.0).unwrap();
    }
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let finite: Vec<&(f64, f64)> = ser.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        match ser.mark {
            Mark::Line => {
                let path: Vec<String> = finite.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
                writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" ")).unwrap();
            }
            Mark::Scatter => {
                for (x, y) in finite {
                    writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}" fill-opacity="0.6"/>"#, sx(*x), sy(*y)).unwrap();
                }
            }
        }
        let ly = m + 16.0 * k as f64;
        writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, w - m - 120.0, ly - 9.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{ly}" font-size="11">{}</text>"#, w - m - 105.0, esc(&ser.name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_lossless() {
        let mut t = Table::new(&["a", "b"]);
        for v in [0.1, 1.0 / 3.0, -2.5e-300, f64::MAX, 7.0] {
            t.push(vec!["x,\"y\"".into(), num(v)]);
        }
        let back = Table::from_csv(&t.to_csv().unwrap()).unwrap();
        assert_eq!(back, t);
        let vals = back.column_f64("b").unwrap();
        assert_eq!(vals[1], 1.0 / 3.0);
    }

    #[test]
    fn summary_round_trip() {
        let e = vec![("effective_rank".to_string(), "3.25".to_string()), ("label".into(), "a: b".into())];
        assert_eq!(parse_summary(&summary_block(&e)).unwrap(), e);
    }

    #[test]
    fn svg_is_stable_and_labelled() {
        let s = vec![Series {
            name: "mean".into(),
            points: vec![(1.0, 0.2), (2.0, 0.4)],
            mark: Mark::Line,
        }];
        let a = svg_chart("t", "scale", "SSIM", &s);
        assert_eq!(a, svg_chart("t", "scale", "SSIM", &s));
        assert!(a.contains(">scale<") && a.contains(">SSIM<"));
    }
}
