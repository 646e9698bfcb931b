//! Self-contained SVG charts: PE histograms per correctness group, box plots
//! of the per-run distance, and curves against the uncertainty threshold.
//!
//! Output is plain text built from fixed-precision numbers, so identical
//! tables give byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{BenchError, Result};
use crate::tables::{
    find_curve_files, first_seen, read_table, write_text, CurveRecord, LevelRow, RunRow, SampleRow,
    LEVELS_CSV, RUNS_CSV, SAMPLES_CSV,
};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 168.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Maps data ranges onto the plot area.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let widen = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        let (x0, x1) = widen(x0, x1);
        let (y0, y1) = widen(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

struct Svg {
    body: String,
}

impl Svg {
    fn new(title: &str) -> Self {
        let mut body = String::new();
        let _ = writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(body, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            body,
            r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            (W - RIGHT + LEFT) / 2.0,
            esc(title)
        );
        Self { body }
    }

    fn axes(&mut self, f: &Frame, x_label: &str, y_label: &str) {
        let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(
            self.body,
            r#"<path d="M{l:.2} {t:.2} L{l:.2} {b:.2} L{r:.2} {b:.2}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let fx = f.x0 + (f.x1 - f.x0) * f64::from(i) / 4.0;
            let fy = f.y0 + (f.y1 - f.y0) * f64::from(i) / 4.0;
            let (x, y) = (f.px(fx), f.py(fy));
            let _ = writeln!(
                self.body,
                r#"<line x1="{x:.2}" y1="{b:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{fx:.2}</text>"#,
                b + 4.0,
                b + 18.0
            );
            let _ = writeln!(
                self.body,
                r#"<line x1="{:.2}" y1="{y:.2}" x2="{l:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{fy:.2}</text>"#,
                l - 4.0,
                l - 6.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            (l + r) / 2.0,
            H - 16.0,
            esc(x_label)
        );
        let _ = writeln!(
            self.body,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            (t + b) / 2.0,
            (t + b) / 2.0,
            esc(y_label)
        );
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = TOP + 8.0 + 18.0 * i as f64;
            let x = W - RIGHT + 12.0;
            let _ = writeln!(
                self.body,
                r#"<rect x="{x:.2}" y="{:.2}" width="12" height="12" fill="{color}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                y - 10.0,
                x + 18.0,
                y,
                esc(label)
            );
        }
    }

    fn note(&mut self, text: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" fill="gray">{}</text>"#,
            (W - RIGHT + LEFT) / 2.0,
            TOP + 20.0,
            esc(text)
        );
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// Overlaid histograms of normalized PE for correct and incorrect predictions,
/// each scaled to its own group's fraction.
pub fn histogram_svg(title: &str, correct: &[f64], incorrect: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let fractions = |v: &[f64]| {
        let mut counts = vec![0usize; bins];
        for &x in v {
            let b = ((x.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        counts
            .into_iter()
            .map(|c| c as f64 / v.len().max(1) as f64)
            .collect::<Vec<_>>()
    };
    let (fc, fi) = (fractions(correct), fractions(incorrect));
    let top = fc.iter().chain(&fi).fold(0.0f64, |a, &b| a.max(b));
    let f = Frame::new(0.0, 1.0, 0.0, if top > 0.0 { top } else { 1.0 });
    let mut svg = Svg::new(title);
    svg.axes(&f, "normalized predictive entropy", "fraction of group");
    let width = 1.0 / bins as f64;
    for (series, c, present) in [
        (&fc, color(0), !correct.is_empty()),
        (&fi, color(1), !incorrect.is_empty()),
    ] {
        if !present {
            continue;
        }
        for (b, &h) in series.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            let x = f.px(b as f64 * width);
            let x2 = f.px((b + 1) as f64 * width);
            let y = f.py(h);
            let _ = writeln!(
                svg.body,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{c}" fill-opacity="0.5" stroke="{c}"/>"#,
                x2 - x,
                f.py(0.0) - y
            );
        }
    }
    svg.legend(&[
        (format!("correct (n={})", correct.len()), color(0)),
        (format!("incorrect (n={})", incorrect.len()), color(1)),
    ]);
    if incorrect.is_empty() {
        svg.note("no incorrect predictions");
    }
    if correct.is_empty() {
        svg.note("no correct predictions");
    }
    svg.finish()
}

/// Median, quartiles, 1.5·IQR whiskers, and the points beyond them.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

/// Quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = v
        .iter()
        .copied()
        .filter(|&x| x >= lo_fence && x <= hi_fence);
    let whisker_lo = inside.clone().fold(f64::INFINITY, f64::min);
    let whisker_hi = inside.fold(f64::NEG_INFINITY, f64::max);
    let outliers = v
        .iter()
        .copied()
        .filter(|&x| x < lo_fence || x > hi_fence)
        .collect();
    Some(BoxStats {
        q1,
        median,
        q3,
        whisker_lo,
        whisker_hi,
        outliers,
    })
}

pub fn box_plot_svg(title: &str, y_label: &str, series: &[(String, Vec<f64>)]) -> String {
    let stats: Vec<Option<BoxStats>> = series.iter().map(|(_, v)| box_stats(v)).collect();
    let all = series.iter().flat_map(|(_, v)| v.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let pad = (hi - lo) * 0.05;
    let f = Frame::new(0.0, series.len().max(1) as f64, lo - pad, hi + pad);
    let mut svg = Svg::new(title);
    svg.axes(&f, "", y_label);
    for (i, ((label, _), st)) in series.iter().zip(&stats).enumerate() {
        let c = color(i);
        let cx = f.px(i as f64 + 0.5);
        let half = (f.px(1.0) - f.px(0.0)) * 0.25;
        let _ = writeln!(
            svg.body,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 32.0,
            esc(label)
        );
        let Some(s) = st else {
            continue;
        };
        let (y1, ym, y3) = (f.py(s.q1), f.py(s.median), f.py(s.q3));
        let _ = writeln!(
            svg.body,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{y1:.2}" stroke="{c}"/><line x1="{cx:.2}" y1="{y3:.2}" x2="{cx:.2}" y2="{:.2}" stroke="{c}"/>"#,
            f.py(s.whisker_lo),
            f.py(s.whisker_hi)
        );
        let _ = writeln!(
            svg.body,
            r#"<rect x="{:.2}" y="{y3:.2}" width="{:.2}" height="{:.2}" fill="{c}" fill-opacity="0.3" stroke="{c}"/>"#,
            cx - half,
            2.0 * half,
            y1 - y3
        );
        let _ = writeln!(
            svg.body,
            r#"<line x1="{:.2}" y1="{ym:.2}" x2="{:.2}" y2="{ym:.2}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            cx + half
        );
        for &o in &s.outliers {
            let _ = writeln!(
                svg.body,
                r#"<circle cx="{cx:.2}" cy="{:.2}" r="2.5" fill="none" stroke="{c}"/>"#,
                f.py(o)
            );
        }
    }
    svg.finish()
}

/// A named series of `(x, y)` points; `None` breaks the line.
pub type Series = (String, Vec<(f64, Option<f64>)>);

pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        if let Some(y) = y {
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    let pad = (y1 - y0) * 0.05;
    let f = Frame::new(x0, x1, y0 - pad, y1 + pad);
    let mut svg = Svg::new(title);
    svg.axes(&f, x_label, y_label);
    let mut legend = Vec::new();
    for (i, (label, points)) in series.iter().enumerate() {
        let c = color(i);
        let mut d = String::new();
        let mut pen_down = false;
        for &(x, y) in points {
            match y {
                Some(y) => {
                    let _ = write!(
                        d,
                        "{}{:.2} {:.2} ",
                        if pen_down { "L" } else { "M" },
                        f.px(x),
                        f.py(y)
                    );
                    pen_down = true;
                }
                None => pen_down = false,
            }
        }
        if !d.is_empty() {
            let _ = writeln!(
                svg.body,
                r#"<path d="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#,
                d.trim_end()
            );
        }
        for &(x, y) in points {
            if let Some(y) = y {
                let _ = writeln!(
                    svg.body,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{c}"/>"#,
                    f.px(x),
                    f.py(y)
                );
            }
        }
        legend.push((label.clone(), c));
    }
    svg.legend(&legend);
    svg.finish()
}

/// Renders every chart the tables in `dir` support and returns the files
/// written. Fails if `dir` holds none of the expected tables.
pub fn plot_dir(dir: &Path, histogram_bins: usize) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |name: String, svg: String| -> Result<()> {
        let path = dir.join(name);
        write_text(&path, &svg)?;
        written.push(path);
        Ok(())
    };

    let samples_path = dir.join(SAMPLES_CSV);
    if samples_path.exists() {
        let rows: Vec<SampleRow> = read_table(&samples_path)?;
        for method in first_seen(&rows, |r| r.method.as_str()) {
            let (mut ok, mut bad) = (Vec::new(), Vec::new());
            for r in rows.iter().filter(|r| r.method == method) {
                if r.correct == 1 {
                    ok.push(r.pe_normalized);
                } else {
                    bad.push(r.pe_normalized);
                }
            }
            emit(
                format!("hist_{method}.svg"),
                histogram_svg(
                    &format!("Predictive entropy, {method}"),
                    &ok,
                    &bad,
                    histogram_bins,
                ),
            )?;
        }
    }

    let runs_path = dir.join(RUNS_CSV);
    if runs_path.exists() {
        let rows: Vec<RunRow> = read_table(&runs_path)?;
        let series: Vec<(String, Vec<f64>)> = first_seen(&rows, |r| r.method.as_str())
            .into_iter()
            .map(|m| {
                let v = rows
                    .iter()
                    .filter(|r| r.method == m)
                    .filter_map(|r| r.distance)
                    .collect();
                (m.to_string(), v)
            })
            .collect();
        emit(
            "distance_box.svg".into(),
            box_plot_svg(
                "Distance between PE means (incorrect - correct)",
                "distance",
                &series,
            ),
        )?;
    }

    for (level, path) in find_curve_files(dir)? {
        let rows: Vec<CurveRecord> = read_table(&path)?;
        let methods = first_seen(&rows, |r| r.method.as_str());
        let curve = |get: &dyn Fn(&CurveRecord) -> Option<f64>| -> Vec<Series> {
            methods
                .iter()
                .map(|m| {
                    let pts = rows
                        .iter()
                        .filter(|r| r.method == *m)
                        .map(|r| (r.threshold, get(r)))
                        .collect();
                    (m.to_string(), pts)
                })
                .collect()
        };
        emit(
            format!("ua_{level}.svg"),
            line_plot_svg(
                &format!("Uncertainty accuracy, level {level}"),
                "uncertainty threshold",
                "UAcc",
                &curve(&|r| r.uacc),
            ),
        )?;
        emit(
            format!("ece_{level}.svg"),
            line_plot_svg(
                &format!("ECE of samples at or below threshold, level {level}"),
                "uncertainty threshold",
                "ECE (certain samples)",
                &curve(&|r| r.ece_certain),
            ),
        )?;
    }

    let levels_path = dir.join(LEVELS_CSV);
    if levels_path.exists() {
        let rows: Vec<LevelRow> = read_table(&levels_path)?;
        let mut by_method: BTreeMap<usize, Series> = BTreeMap::new();
        let order = first_seen(&rows, |r| r.method.as_str());
        for r in &rows {
            let i = order.iter().position(|m| *m == r.method).expect("seen");
            by_method
                .entry(i)
                .or_insert_with(|| (r.method.clone(), Vec::new()))
                .1
                .push((r.level, r.ece_mean));
        }
        let series: Vec<Series> = by_method.into_values().collect();
        emit(
            "ece_levels.svg".into(),
            line_plot_svg("Test-set ECE by noise level", "level", "ECE", &series),
        )?;
    }

    if written.is_empty() {
        return Err(BenchError::Input {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no result tables to plot"),
        });
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_stats_of_constant_series_is_flat() {
        let s = box_stats(&[0.4; 7]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (0.4, 0.4, 0.4));
        assert_eq!((s.whisker_lo, s.whisker_hi), (0.4, 0.4));
        assert!(s.outliers.is_empty());
        let svg = box_plot_svg("t", "d", &[("ce".into(), vec![0.4; 7])]);
        assert!(svg.contains(r#"height="0.00""#));
    }

    #[test]
    fn box_stats_quartiles_and_outliers() {
        let s = box_stats(&[1.0, 2.0, 3.0, 4.0, 5.0, 100.0]).unwrap();
        assert_eq!(s.median, 3.5);
        assert_eq!(s.q1, 2.25);
        assert_eq!(s.q3, 4.75);
        assert_eq!(s.outliers, [100.0]);
        assert_eq!(s.whisker_hi, 5.0);
        assert_eq!(s.whisker_lo, 1.0);
        assert!(box_stats(&[]).is_none());
    }

    #[test]
    fn empty_incorrect_group_is_annotated() {
        let svg = histogram_svg("h", &[0.1, 0.2], &[], 10);
        assert!(svg.contains("no incorrect predictions"));
        let svg = histogram_svg("h", &[0.1], &[0.9], 10);
        assert!(!svg.contains("no incorrect predictions"));
    }

    #[test]
    fn identical_input_gives_identical_svg() {
        let series: Vec<Series> = vec![(
            "ce".into(),
            vec![(0.0, Some(0.5)), (0.5, None), (1.0, Some(0.9))],
        )];
        let a = line_plot_svg("t", "x", "y", &series);
        assert_eq!(a, line_plot_svg("t", "x", "y", &series));
        // the undefined point splits the path into two pieces
        let path = a
            .lines()
            .find(|l| l.contains(r#"stroke-width="1.5""#))
            .unwrap();
        assert_eq!(path.matches('M').count(), 2);
    }

    #[test]
    fn text_is_escaped() {
        let svg = line_plot_svg("a < b & c", "x", "y", &[]);
        assert!(svg.contains("a &lt; b &amp; c"));
    }
}
