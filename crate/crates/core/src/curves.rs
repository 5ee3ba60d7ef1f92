//! Optimization-curve artifacts: the per-step CSV written by a search run and
//! static SVG renderings of its loss and acceptance-rate panels.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::search::StepRecord;

pub const CSV_HEADER: [&str; 6] = [
    "step",
    "layer",
    "proposed_loss",
    "best_loss",
    "accepted",
    "acceptance_rate_window",
];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_curves(path: impl AsRef<Path>, records: &[StepRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if records.is_empty() {
        w.write_record(CSV_HEADER).map_err(|e| csv_error(path, e))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curves(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Format(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Panel {
    Loss,
    Acceptance,
}

impl Panel {
    pub fn file_name(self) -> &'static str {
        match self {
            Panel::Loss => "loss.svg",
            Panel::Acceptance => "acceptance.svg",
        }
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x.1 - self.x.0).max(f64::MIN_POSITIVE);
        MARGIN + (x - self.x.0) / span * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y.1 - self.y.0).max(f64::MIN_POSITIVE);
        HEIGHT - MARGIN - (y - self.y.0) / span * (HEIGHT - 2.0 * MARGIN)
    }

    fn polyline(&self, out: &mut String, points: impl Iterator<Item = (f64, f64)>, style: &str) {
        let coords: Vec<String> = points
            .map(|(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" {style} points="{}"/>"#,
            coords.join(" ")
        );
    }
}

/// One panel as a standalone SVG document.
pub fn render_svg(records: &[StepRecord], panel: Panel) -> String {
    let last_step = records.last().map_or(1, |r| r.step) as f64;
    let (title, y_label, y_range) = match panel {
        Panel::Loss => {
            let (lo, hi) = records
                .iter()
                .flat_map(|r| [r.proposed_loss, r.best_loss])
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let (lo, hi) = if lo.is_finite() { (lo, hi.max(lo + 1e-9)) } else { (0.0, 1.0) };
            ("Calibration objective", "loss", (lo, hi))
        }
        Panel::Acceptance => ("Acceptance rate (sliding window)", "rate", (0.0, 1.0)),
    };
    let frame = Frame {
        x: (0.0, last_step),
        y: y_range,
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{title}</text>"#,
        WIDTH / 2.0
    );
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#
    );
    for (v, anchor_y) in [(frame.y.0, y0), (frame.y.1, y1)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#,
            x0 - 4.0,
            anchor_y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{x1}" y="{}" text-anchor="end">step {last_step}</text>"#,
        y0 + 18.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{y_label}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    match panel {
        Panel::Loss => {
            frame.polyline(
                &mut s,
                records.iter().map(|r| (r.step as f64, r.proposed_loss)),
                r##"stroke="#9ecae1" stroke-width="0.8""##,
            );
            frame.polyline(
                &mut s,
                records.iter().map(|r| (r.step as f64, r.best_loss)),
                r##"stroke="#08519c" stroke-width="2""##,
            );
        }
        Panel::Acceptance => frame.polyline(
            &mut s,
            records.iter().map(|r| (r.step as f64, r.acceptance_rate_window)),
            r##"stroke="#a63603" stroke-width="2""##,
        ),
    }
    s.push_str("</svg>\n");
    s
}

/// Fraction of accepted steps in a slice of the curve.
pub fn acceptance_rate(records: &[StepRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.accepted).count() as f64 / records.len() as f64
}
