// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dependency-free SVG charts. The CSV files stay the source of truth;
//! these renderings are conveniences.

use std::fmt::Write as _;
use std::path::Path;

use crate::trainer::{detect_saturation, first_step_at, read_metrics, EvalRecord, EvalSplit, GENERALIZATION_THRESHOLD, SATURATION_THRESHOLD};
use crate::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 160.0, 40.0, 50.0); // left, right, top, bottom
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// A vertical marker line.
pub struct Marker {
    pub x: f64,
    pub label: String,
}

pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Log-scaled x axis; non-positive x values are dropped.
    pub log_x: bool,
    /// Fixed y range, otherwise fitted to the data.
    pub y_range: Option<(f64, f64)>,
    pub series: Vec<Series>,
    pub markers: Vec<Marker>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.0e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

impl LineChart {
    pub fn to_svg(&self) -> String {
        let (ml, mr, mt, mb) = MARGIN;
        let (pw, ph) = (WIDTH - ml - mr, HEIGHT - mt - mb);
        let tx = |x: f64| if self.log_x { x.log10() } else { x };
        let pts = || self.series.iter().flat_map(|s| s.points.iter()).filter(|p| p.1.is_finite() && (!self.log_x || p.0 > 0.0));
        let (mut x0, mut x1) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(tx(p.0)), b.max(tx(p.0))));
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        let (y0, y1) = self.y_range.unwrap_or_else(|| {
            let (a, b) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
            if a.is_finite() && b > a {
                (a, b)
            } else if a.is_finite() {
                (a - 0.5, a + 0.5)
            } else {
                (0.0, 1.0)
            }
        });
        let px = |x: f64| ml + (tx(x) - x0) / (x1 - x0) * pw;
        let py = |y: f64| mt + ph - (y.clamp(y0, y1) - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, ml + pw / 2.0, escape(&self.title));
        // y grid
        for t in nice_ticks(y0, y1, 5) {
            let y = py(t);
            let _ = writeln!(s, r##"<line x1="{ml}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#e0e0e0"/>"##, ml + pw);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, ml - 6.0, y + 4.0, fmt_tick(t));
        }
        // x ticks
        let xticks: Vec<f64> = if self.log_x {
            (x0.floor() as i32..=x1.ceil() as i32).map(|e| 10f64.powi(e)).filter(|v| (x0..=x1).contains(&v.log10())).collect()
        } else {
            nice_ticks(x0, x1, 6)
        };
        for t in xticks {
            let x = px(t);
            let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{mt}" x2="{x:.1}" y2="{:.1}" stroke="#f0f0f0"/>"##, mt + ph);
            let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, mt + ph + 16.0, fmt_tick(t));
        }
        let _ = writeln!(s, r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, ml + pw / 2.0, HEIGHT - 10.0, escape(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            mt + ph / 2.0,
            escape(&self.y_label)
        );
        for m in &self.markers {
            if self.log_x && m.x <= 0.0 {
                continue;
            }
            let x = px(m.x);
            let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{mt}" x2="{x:.1}" y2="{:.1}" stroke="gray" stroke-dasharray="4 3"/>"#, mt + ph);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" fill="gray" font-size="10">{}</text>"#, x + 3.0, mt + 12.0, escape(&m.label));
        }
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let path: Vec<String> = series
                .points
                .iter()
                .filter(|p| p.1.is_finite() && (!self.log_x || p.0 > 0.0))
                .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
                .collect();
            if !path.is_empty() {
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
            }
            let ly = mt + 10.0 + 18.0 * i as f64;
            let lx = ml + pw + 12.0;
            let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 24.0, ly + 4.0, escape(&series.name));
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Row-major grid of optional values; `None` cells are hatched grey.
pub struct Heatmap {
    pub title: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    /// Colour scale range.
    pub range: (f64, f64),
}

fn blend(t: f64) -> String {
    // white -> dark blue
    let t = t.clamp(0.0, 1.0);
    let c = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(255.0, 8.0), c(255.0, 48.0), c(255.0, 107.0))
}

impl Heatmap {
    /// Rows are drawn bottom-up so the first row sits at the bottom.
    pub fn to_svg(&self) -> String {
        let cell = 44.0;
        let (ml, mt) = (70.0, 40.0);
        let (nr, nc) = (self.values.len(), self.col_labels.len());
        let (w, h) = (ml + cell * nc as f64 + 90.0, mt + cell * nr as f64 + 40.0);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(&self.title));
        let (lo, hi) = self.range;
        for (r, row) in self.values.iter().enumerate() {
            let y = mt + cell * (nr - 1 - r) as f64;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                ml - 6.0,
                y + cell / 2.0 + 4.0,
                escape(self.row_labels.get(r).map_or("", String::as_str))
            );
            for (c, v) in row.iter().enumerate() {
                let x = ml + cell * c as f64;
                match v {
                    Some(v) => {
                        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
                        let _ = writeln!(
                            s,
                            r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{}" stroke="#ccc"/>"##,
                            blend(t)
                        );
                        let fg = if t > 0.55 { "white" } else { "black" };
                        let _ = writeln!(
                            s,
                            r#"<text x="{}" y="{}" text-anchor="middle" fill="{fg}">{v:.2}</text>"#,
                            x + cell / 2.0,
                            y + cell / 2.0 + 4.0
                        );
                    }
                    None => {
                        let _ = writeln!(s, r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="#eeeeee" stroke="#ccc"/>"##);
                    }
                }
            }
        }
        for (c, l) in self.col_labels.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                ml + cell * (c as f64 + 0.5),
                mt + cell * nr as f64 + 16.0,
                escape(l)
            );
        }
        // colour bar
        let bx = ml + cell * nc as f64 + 20.0;
        let bh = cell * nr as f64;
        for i in 0..20 {
            let t = i as f64 / 19.0;
            let _ = writeln!(
                s,
                r#"<rect x="{bx}" y="{:.1}" width="14" height="{:.1}" fill="{}"/>"#,
                mt + bh * (1.0 - (i + 1) as f64 / 20.0),
                bh / 20.0 + 0.5,
                blend(t)
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, bx + 18.0, mt + 8.0, fmt_tick(hi));
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, bx + 18.0, mt + bh, fmt_tick(lo));
        s.push_str("</svg>\n");
        s
    }
}

/// Saturation and generalization points of a training history.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CurveSummary {
    pub saturation_step: Option<u64>,
    pub generalization: Vec<(String, Option<u64>)>,
    pub final_step: Option<u64>,
}

impl CurveSummary {
    pub fn from_history(history: &[EvalRecord]) -> Self {
        CurveSummary {
            saturation_step: detect_saturation(history, SATURATION_THRESHOLD),
            generalization: [EvalSplit::TestId, EvalSplit::TestOod]
                .iter()
                .filter(|s| history.iter().any(|r| r.get(**s).is_some()))
                .map(|s| (s.name().to_string(), first_step_at(history, *s, GENERALIZATION_THRESHOLD)))
                .collect(),
            final_step: history.last().map(|r| r.step),
        }
    }

    pub fn to_text(&self) -> String {
        let step = |s: Option<u64>| s.map_or("never".to_string(), |v| v.to_string());
        let mut t = format!("saturation step (train >= {SATURATION_THRESHOLD}): {}\n", step(self.saturation_step));
        for (name, s) in &self.generalization {
            let _ = writeln!(t, "{name} >= {GENERALIZATION_THRESHOLD}: {}", step(*s));
        }
        let _ = writeln!(t, "last evaluated step: {}", step(self.final_step));
        t
    }
}

/// Accuracy curves of one or more runs; the x axis is log-scaled like the
/// usual grokking plots (step 0 is dropped).
pub fn accuracy_chart(runs: &[(String, Vec<EvalRecord>)], log_x: bool) -> LineChart {
    let mut series = Vec::new();
    let mut markers = Vec::new();
    for (name, history) in runs {
        for split in EvalSplit::ALL {
            let points: Vec<(f64, f64)> =
                history.iter().filter_map(|r| r.get(split).map(|a| (r.step as f64, a))).collect();
            if points.is_empty() {
                continue;
            }
            let label = if runs.len() > 1 { format!("{name} {}", split.name()) } else { split.name().to_string() };
            series.push(Series { name: label, points });
        }
        if let Some(s) = detect_saturation(history, SATURATION_THRESHOLD) {
            let label = if runs.len() > 1 { format!("{name} saturation") } else { "saturation".into() };
            markers.push(Marker { x: s as f64, label });
        }
    }
    LineChart {
        title: "accuracy".into(),
        x_label: if log_x { "optimization step (log)".into() } else { "optimization step".into() },
        y_label: "accuracy".into(),
        log_x,
        y_range: Some((0.0, 1.0)),
        series,
        markers,
    }
}

/// Render `metrics.csv` files into an SVG plus a text summary (first run).
pub fn plot_metrics(paths: &[&Path], log_x: bool) -> Result<(String, CurveSummary)> {
    if paths.is_empty() {
        return Err(Error::Config("no metrics files given".into()));
    }
    let mut runs = Vec::new();
    for p in paths {
        let h = read_metrics(p)?;
        if h.is_empty() {
            return Err(Error::Data(format!("{}: no metric rows", p.display())));
        }
        let name = p.parent().and_then(|d| d.file_name()).map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        runs.push((name, h));
    }
    let summary = CurveSummary::from_history(&runs[0].1);
    Ok((accuracy_chart(&runs, log_x).to_svg(), summary))
}

/// Heatmap of a causal-grid CSV: layers as rows, input positions as columns.
pub fn grid_heatmap(csv: &str, title: &str) -> Result<Heatmap> {
    let mut roles: Vec<String> = Vec::new();
    let mut cells: Vec<(usize, usize, Option<f64>)> = Vec::new();
    let mut header: Option<Vec<&str>> = None;
    for (i, line) in csv.lines().enumerate() {
        if let Some(r) = line.strip_prefix("# roles: ") {
            roles = r.split(',').map(str::to_string).collect();
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let Some(h) = &header else {
            header = Some(parts);
            continue;
        };
        let col = |name: &str| -> Result<&str> {
            let k = h.iter().position(|c| *c == name).ok_or_else(|| Error::Data(format!("grid CSV lacks a {name} column")))?;
            parts.get(k).copied().ok_or_else(|| Error::Data(format!("grid CSV line {}: too few cells", i + 1)))
        };
        let bad = |c: &str| Error::Data(format!("grid CSV line {}: bad value {c:?}", i + 1));
        let layer = col("layer")?.parse().map_err(|_| bad(col("layer").unwrap_or("")))?;
        let pos = col("position")?.parse().map_err(|_| bad(col("position").unwrap_or("")))?;
        let v = col("value")?;
        let v = if v.is_empty() { None } else { Some(v.parse::<f64>().map_err(|_| bad(v))?) };
        cells.push((layer, pos, v));
    }
    if cells.is_empty() {
        return Err(Error::Data("grid CSV has no cells".into()));
    }
    let nr = cells.iter().map(|c| c.0).max().unwrap() + 1;
    let nc = cells.iter().map(|c| c.1).max().unwrap() + 1;
    let mut values = vec![vec![None; nc]; nr];
    for (l, p, v) in cells {
        values[l][p] = v;
    }
    Ok(Heatmap {
        title: title.to_string(),
        row_labels: (0..nr).map(|l| format!("layer {l}")).collect(),
        col_labels: (0..nc).map(|p| roles.get(p).cloned().unwrap_or_else(|| format!("pos {p}"))).collect(),
        values,
        range: (0.0, 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn rec(step: u64, train: f64, test: f64) -> EvalRecord {
        let mut accuracy = BTreeMap::new();
        accuracy.insert(EvalSplit::TrainAtomic, train);
        accuracy.insert(EvalSplit::TrainInferred, train);
        accuracy.insert(EvalSplit::TestId, test);
        EvalRecord { step, epoch: 0, loss: 1.0, accuracy }
    }

    #[test]
    fn summary_names_the_crossing() {
        let h = vec![rec(0, 0.0, 0.0), rec(100, 0.5, 0.0), rec(200, 0.995, 0.1), rec(400, 1.0, 0.95)];
        let s = CurveSummary::from_history(&h);
        assert_eq!(s.saturation_step, Some(200));
        assert_eq!(s.generalization, vec![("test_id".to_string(), Some(400))]);
        assert!(s.to_text().contains("saturation step (train >= 0.99): 200"));
        let svg = accuracy_chart(&[("run".into(), h)], true).to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains(">saturation<"));
    }

    #[test]
    fn heatmap_from_grid_csv() {
        let csv = "# target: x\n# roles: h,r1,r2\nlayer,position,value,n_used,n_skipped,downstream\n0,0,1.0,3,0,true\n0,1,,0,3,true\n1,2,0.25,3,0,true\n";
        let h = grid_heatmap(csv, "t").unwrap();
        assert_eq!(h.values, vec![vec![Some(1.0), None, None], vec![None, None, Some(0.25)]]);
        assert_eq!(h.col_labels, vec!["h", "r1", "r2"]);
        assert_eq!(h.to_svg().matches("<rect x=").count(), 6 + 20);
        assert!(grid_heatmap("layer,position,value\n", "t").is_err());
    }

    #[test]
    fn ticks_cover_range() {
        let t = nice_ticks(0.0, 1.0, 5);
        assert_eq!(t.first(), Some(&0.0));
        assert!((t.last().unwrap() - 1.0).abs() < 1e-9);
    }
}
