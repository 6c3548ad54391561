//! Minimal SVG output: line charts and grayscale heatmaps.

use std::fmt::Write;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn header(out: &mut String, width: f64, height: f64, comment: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, "<!-- {} -->", comment.replace("--", "-"));
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

impl LineChart {
    pub fn render(&self, comment: &str) -> String {
        let (w, h) = (720.0, 440.0);
        let (left, right, top, bottom) = (80.0, 190.0, 40.0, 60.0);
        let ty = |y: f64| if self.log_y { y.max(1e-300).log10() } else { y };
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|&(x, y)| (x, ty(y))))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        let bounds = |f: fn(&(f64, f64)) -> f64| {
            let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            match (lo.is_finite(), hi > lo) {
                (true, true) => (lo, hi),
                (true, false) => (lo - 0.5, lo + 0.5),
                _ => (0.0, 1.0),
            }
        };
        let (x0, x1) = bounds(|p| p.0);
        let (y0, y1) = bounds(|p| p.1);
        let (pw, ph) = (w - left - right, h - top - bottom);
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

        let mut out = String::new();
        header(&mut out, w, h, comment);
        let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, left + pw / 2.0, escape(&self.title));
        let _ = writeln!(
            out,
            r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for x in ticks(x0, x1, 5) {
            let _ = writeln!(
                out,
                r#"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="black"/><text x="{0:.2}" y="{3}" text-anchor="middle">{4}</text>"#,
                sx(x),
                top + ph,
                top + ph + 5.0,
                top + ph + 20.0,
                fmt_tick(x)
            );
        }
        for y in ticks(y0, y1, 5) {
            let label = if self.log_y { format!("1e{y:.1}") } else { fmt_tick(y) };
            let _ = writeln!(
                out,
                r#"<line x1="{0}" y1="{1:.2}" x2="{2}" y2="{1:.2}" stroke="black"/><text x="{3}" y="{4:.2}" text-anchor="end">{5}</text>"#,
                left - 5.0,
                sy(y),
                left,
                left - 8.0,
                sy(y) + 4.0,
                label
            );
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 15.0, escape(&self.x_label));
        let _ = writeln!(
            out,
            r#"<text x="20" y="{0}" text-anchor="middle" transform="rotate(-90 20 {0})">{1}</text>"#,
            top + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let coords: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| (x, ty(y)))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                coords.join(" ")
            );
            let ly = top + 10.0 + 18.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="2"/><text x="{3}" y="{4}">{5}</text>"#,
                w - right + 10.0,
                ly,
                w - right + 30.0,
                w - right + 35.0,
                ly + 4.0,
                escape(&s.label)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e4) {
        format!("{}", (v * 100.0).round() / 100.0)
    } else {
        format!("{v:.1e}")
    }
}

/// Row-major grayscale image; black is the panel minimum.
pub struct Panel {
    pub label: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Panels side by side, each scaled to its own range unless `shared` is set.
pub fn heatmap_strip(title: &str, panels: &[Panel], cell: f64, shared: bool, comment: &str) -> String {
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let global = range(&panels.iter().flat_map(|p| p.values.iter().copied()).collect::<Vec<_>>());
    let gap = 12.0;
    let width: f64 = panels.iter().map(|p| p.cols as f64 * cell + gap).sum::<f64>() + gap;
    let height = panels.iter().map(|p| p.rows).max().unwrap_or(0) as f64 * cell + 60.0;
    let mut out = String::new();
    header(&mut out, width, height, comment);
    let _ = writeln!(out, r#"<text x="{gap}" y="18" font-size="14">{}</text>"#, escape(title));
    let mut x = gap;
    for p in panels {
        let (lo, hi) = if shared { global } else { range(&p.values) };
        let span = if hi > lo { hi - lo } else { 1.0 };
        let _ = writeln!(out, r#"<g class="panel" transform="translate({x:.2},40)">"#);
        for r in 0..p.rows {
            for c in 0..p.cols {
                let g = (((p.values[r * p.cols + c] - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.2}" y="{:.2}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>"#,
                    c as f64 * cell,
                    r as f64 * cell
                );
            }
        }
        let _ = writeln!(out, r#"<text x="0" y="-6">{}</text></g>"#, escape(&p.label));
        x += p.cols as f64 * cell + gap;
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_series() {
        let chart = LineChart {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            log_y: true,
            series: (0..4)
                .map(|i| Series {
                    label: format!("s{i}"),
                    points: vec![(0.0, 1.0 + i as f64), (1.0, 0.5)],
                })
                .collect(),
        };
        let svg = chart.render("digest");
        assert_eq!(svg.matches("class=\"series\"").count(), 4);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn heatmap_has_one_group_per_panel() {
        let panels: Vec<Panel> = (0..11)
            .map(|i| Panel {
                label: format!("{i}"),
                rows: 2,
                cols: 3,
                values: vec![i as f64; 6],
            })
            .collect();
        let svg = heatmap_strip("t", &panels, 2.0, false, "c");
        assert_eq!(svg.matches("class=\"panel\"").count(), 11);
        assert_eq!(svg.matches("<rect x=").count(), 66);
    }
}
