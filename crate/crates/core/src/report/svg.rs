//! Line charts as standalone SVG documents.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HistoryRow, RunHistory};
use crate::error::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const LEGEND_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChartKind {
    /// Test accuracy per round, one line per meta-iteration.
    Accuracy,
    /// Validation loss per round, one line per meta-iteration.
    Loss,
    /// Aggregation weight per round for each client, from the last pass.
    Weights,
}

impl ChartKind {
    pub const ALL: [ChartKind; 3] = [ChartKind::Accuracy, ChartKind::Loss, ChartKind::Weights];

    pub fn file_stem(self) -> &'static str {
        match self {
            ChartKind::Accuracy => "accuracy",
            ChartKind::Loss => "loss",
            ChartKind::Weights => "weights",
        }
    }

    fn y_label(self) -> &'static str {
        match self {
            ChartKind::Accuracy => "test accuracy",
            ChartKind::Loss => "validation loss",
            ChartKind::Weights => "aggregation weight",
        }
    }
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn series(history: &RunHistory, kind: ChartKind) -> Vec<Series> {
    match kind {
        ChartKind::Weights => {
            let pass = history.last_pass();
            (0..history.clients)
                .map(|k| Series {
                    label: format!("client {k}"),
                    points: pass
                        .iter()
                        .map(|r| (r.record.round as f64, r.record.theta[k]))
                        .collect(),
                })
                .collect()
        }
        ChartKind::Accuracy | ChartKind::Loss => {
            let value = |r: &HistoryRow| match kind {
                ChartKind::Accuracy => r.record.test_accuracy,
                _ => r.record.val_loss,
            };
            let mut out: Vec<(usize, Series)> = Vec::new();
            for row in history.rows() {
                let point = (row.record.round as f64, value(row));
                match out.last_mut() {
                    Some((m, s)) if *m == row.meta_iter => s.points.push(point),
                    _ => out.push((
                        row.meta_iter,
                        Series {
                            label: format!("meta {}", row.meta_iter),
                            points: vec![point],
                        },
                    )),
                }
            }
            out.into_iter().map(|(_, s)| s).collect()
        }
    }
}

fn color(index: usize, count: usize) -> String {
    let hue = if count <= 1 {
        220.0
    } else {
        300.0 * index as f64 / (count - 1) as f64
    };
    format!("hsl({hue:.1},70%,42%)")
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

/// Renders `history` as an SVG string.
pub fn svg_document(history: &RunHistory, kind: ChartKind) -> Result<String> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("cannot plot an empty history".into()));
    }
    let lines = series(history, kind);
    let all = || lines.iter().flat_map(|s| s.points.iter());
    if all().any(|(_, y)| !y.is_finite()) {
        return Err(Error::NonFinite(format!("{} series", kind.file_stem())));
    }
    let (x0, x1) = bounds(all().map(|p| p.0));
    let (y0, y1) = bounds(all().map(|p| p.1));
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, "<title>{}</title>", escape(kind.y_label()));
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (bx, by) = (LEFT, TOP + plot_h);
    let _ = writeln!(
        svg,
        r#"<g class="axes" stroke="black"><line x1="{bx}" y1="{by}" x2="{}" y2="{by}"/><line x1="{bx}" y1="{TOP}" x2="{bx}" y2="{by}"/></g>"#,
        LEFT + plot_w
    );
    svg.push_str(r#"<g class="ticks" fill="black">"#);
    svg.push('\n');
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(xv),
            by + 18.0,
            tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    svg.push_str("</g>\n");
    let _ = writeln!(
        svg,
        r#"<text class="x-label" x="{:.2}" y="{:.2}" text-anchor="middle">round</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text class="y-label" x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(kind.y_label())
    );
    for (i, s) in lines.iter().enumerate() {
        let points: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" data-label="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            escape(&s.label),
            color(i, lines.len()),
            points.join(" ")
        );
    }
    if lines.len() <= LEGEND_LIMIT {
        svg.push_str(r#"<g class="legend">"#);
        svg.push('\n');
        for (i, s) in lines.iter().enumerate() {
            let y = TOP + 10.0 + 18.0 * i as f64;
            let x = LEFT + plot_w + 16.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                x + 20.0,
                color(i, lines.len()),
                x + 26.0,
                y + 4.0,
                escape(&s.label)
            );
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

pub fn render_svg(history: &RunHistory, kind: ChartKind, path: impl AsRef<Path>) -> Result<()> {
    let doc = svg_document(history, kind)?;
    let path = path.as_ref();
    std::fs::write(path, doc).map_err(|e| Error::io(path, e))
}
