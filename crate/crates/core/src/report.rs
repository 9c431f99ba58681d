//! CSV and SVG renderings of daily series.
//!
//! Both outputs are pure functions of their input, so identical runs give
//! identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("series {label:?} has {found} points, expected {expected}")]
    Shape { label: String, expected: usize, found: usize },
    #[error("no series to report")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        Self { label: label.into(), values }
    }
}

fn check_shape(series: &[Series]) -> Result<usize, ReportError> {
    let first = series.first().ok_or(ReportError::Empty)?;
    let days = first.values.len();
    for s in series {
        if s.values.len() != days {
            return Err(ReportError::Shape { label: s.label.clone(), expected: days, found: s.values.len() });
        }
    }
    Ok(days)
}

/// `day` column followed by one column per series, LF line endings.
pub fn render_csv(series: &[Series]) -> Result<String, ReportError> {
    let days = check_shape(series)?;
    let mut out = String::from("day");
    for s in series {
        out.push(',');
        out.push_str(&s.label);
    }
    out.push('\n');
    for day in 0..days {
        write!(out, "{day}").expect("writing to a String");
        for s in series {
            write!(out, ",{}", s.values[day]).expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_csv(series: &[Series], path: &Path) -> Result<(), ReportError> {
    fs::write(path, render_csv(series)?)?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct SvgOptions {
    pub title: String,
    /// Indices of two series whose gap is shaded, e.g. baseline vs app.
    pub shade_between: Option<(usize, usize)>,
}

pub const SVG_WIDTH: u32 = 800;
pub const SVG_HEIGHT: u32 = 500;
const PALETTE: [&str; 8] = ["#1f4e9c", "#c0392b", "#2e8b57", "#8e44ad", "#d35400", "#16a085", "#7f8c8d", "#b7950b"];
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart with one polyline per series and a legend of series labels.
pub fn render_svg(series: &[Series], options: &SvgOptions) -> Result<String, ReportError> {
    let days = check_shape(series)?;
    let w = f64::from(SVG_WIDTH);
    let h = f64::from(SVG_HEIGHT);
    let plot_w = w - LEFT - RIGHT;
    let plot_h = h - TOP - BOTTOM;
    let y_max = series.iter().flat_map(|s| s.values.iter().copied()).fold(0.0f64, f64::max).max(1.0);
    let x_span = (days.max(2) - 1) as f64;
    let px = |day: usize| LEFT + plot_w * day as f64 / x_span;
    let py = |v: f64| TOP + plot_h * (1.0 - v / y_max);
    let points = |s: &Series| -> Vec<String> { s.values.iter().enumerate().map(|(d, &v)| format!("{:.2},{:.2}", px(d), py(v))).collect() };

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(&options.title)
    );

    if let Some((a, b)) = options.shade_between {
        if a < series.len() && b < series.len() {
            let mut band = points(&series[a]);
            band.extend(points(&series[b]).into_iter().rev());
            let _ =
                writeln!(out, r##"<polygon class="band" points="{}" fill="#999999" fill-opacity="0.35" stroke="none"/>"##, band.join(" "));
        }
    }

    // Axes with five y ticks and day ticks every ten days.
    let _ = writeln!(
        out,
        r#"<path d="M{LEFT:.2},{TOP:.2} L{LEFT:.2},{:.2} L{:.2},{:.2}" fill="none" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h
    );
    for i in 0..=5 {
        let v = y_max * f64::from(i) / 5.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{:.0}</text>"#,
            LEFT - 6.0,
            py(v) + 4.0,
            v
        );
    }
    for day in (0..days).step_by(10) {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{day}</text>"#,
            px(day),
            TOP + plot_h + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">day</text>"#,
        LEFT + plot_w / 2.0,
        h - 10.0
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-label="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(&s.label),
            points(s).join(" ")
        );
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = LEFT + plot_w + 15.0;
        let _ = writeln!(out, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(
            out,
            r#"<text class="legend" x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn emit_svg(series: &[Series], options: &SvgOptions, path: &Path) -> Result<(), ReportError> {
    fs::write(path, render_svg(series, options)?)?;
    Ok(())
}
