//! SVG rendering of one evaluated window: observed past, ground-truth
//! future, every candidate, and the best candidate, as styled polylines.
//!
//! Viewport transform (documented for parse-back): with `(min_x, min_y,
//! max_x, max_y)` the bounding box over all drawn points,
//! `s = min((W - 2m) / (max_x - min_x), (H - 2m) / (max_y - min_y))` for
//! canvas `W x H` and margin `m`, a world point `(x, y)` maps to
//!
//! ```text
//! px = m + (x - min_x) * s
//! py = H - m - (y - min_y) * s     // y axis flipped
//! ```
//!
//! Degenerate boxes (a single point) use `s = 1`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::evaluation::WindowRecord;

pub const CANVAS_W: f64 = 800.0;
pub const CANVAS_H: f64 = 600.0;
pub const MARGIN: f64 = 40.0;

/// The affine viewport transform used by [`render_window_svg`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub min_x: f64,
    pub min_y: f64,
    pub scale: f64,
}

impl Viewport {
    /// Fits all points of a record, with the documented margin.
    pub fn fit(record: &WindowRecord) -> Viewport {
        let mut min_x = f64::INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        let all = record
            .past
            .iter()
            .chain(&record.future)
            .chain(record.candidates.iter().flatten());
        for p in all {
            min_x = min_x.min(p[0]);
            min_y = min_y.min(p[1]);
            max_x = max_x.max(p[0]);
            max_y = max_y.max(p[1]);
        }
        let (dx, dy) = (max_x - min_x, max_y - min_y);
        let scale = if dx > 0.0 || dy > 0.0 {
            let sx = (CANVAS_W - 2.0 * MARGIN) / dx.max(1e-12);
            let sy = (CANVAS_H - 2.0 * MARGIN) / dy.max(1e-12);
            sx.min(sy)
        } else {
            1.0
        };
        Viewport {
            min_x,
            min_y,
            scale,
        }
    }

    pub fn to_canvas(&self, p: [f64; 2]) -> (f64, f64) {
        (
            MARGIN + (p[0] - self.min_x) * self.scale,
            CANVAS_H - MARGIN - (p[1] - self.min_y) * self.scale,
        )
    }

    pub fn to_world(&self, px: f64, py: f64) -> [f64; 2] {
        [
            (px - MARGIN) / self.scale + self.min_x,
            (CANVAS_H - MARGIN - py) / self.scale + self.min_y,
        ]
    }
}

fn polyline(svg: &mut String, vp: &Viewport, pts: &[[f64; 2]], style: &str) {
    let coords: Vec<String> = pts
        .iter()
        .map(|&p| {
            let (x, y) = vp.to_canvas(p);
            format!("{x:.3},{y:.3}")
        })
        .collect();
    writeln!(
        svg,
        "  <polyline fill=\"none\" {} points=\"{}\"/>",
        style,
        coords.join(" ")
    )
    .unwrap();
}

/// Renders one window record as a standalone SVG document.
///
/// Draws, in order: the observed past (blue), the ground-truth future
/// (green), every candidate (red, thin), and the best candidate by ADE
/// (orange) — `2 + n_candidates + 1` polylines — plus a legend.
pub fn render_window_svg(record: &WindowRecord) -> String {
    let vp = Viewport::fit(record);
    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CANVAS_W}\" height=\"{CANVAS_H}\" viewBox=\"0 0 {CANVAS_W} {CANVAS_H}\">"
    )
    .unwrap();
    writeln!(
        svg,
        "  <rect width=\"{CANVAS_W}\" height=\"{CANVAS_H}\" fill=\"white\"/>"
    )
    .unwrap();
    writeln!(
        svg,
        "  <title>window {} pedestrian {} frame {}</title>",
        record.index, record.pedestrian_id, record.start_frame
    )
    .unwrap();
    polyline(
        &mut svg,
        &vp,
        &record.past,
        "stroke=\"blue\" stroke-width=\"2.5\"",
    );
    polyline(
        &mut svg,
        &vp,
        &record.future,
        "stroke=\"green\" stroke-width=\"2.5\"",
    );
    for cand in &record.candidates {
        polyline(
            &mut svg,
            &vp,
            cand,
            "stroke=\"red\" stroke-width=\"0.8\" stroke-opacity=\"0.5\"",
        );
    }
    polyline(
        &mut svg,
        &vp,
        &record.candidates[record.best_ade_idx],
        "stroke=\"orange\" stroke-width=\"2\"",
    );

    // Legend.
    let legend = [
        ("blue", "observed past"),
        ("green", "ground truth future"),
        ("red", "candidates"),
        ("orange", "best candidate"),
    ];
    for (i, (color, label)) in legend.iter().enumerate() {
        let y = 20.0 + 18.0 * i as f64;
        writeln!(
            svg,
            "  <line x1=\"12\" y1=\"{y}\" x2=\"40\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\"/>"
        )
        .unwrap();
        writeln!(
            svg,
            "  <text x=\"46\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">{label}</text>",
            y + 4.0
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Renders the record at `index` from a records list.
pub fn render_indexed(records: &[WindowRecord], index: usize) -> Result<String> {
    let record = records
        .iter()
        .find(|r| r.index == index)
        .ok_or_else(|| {
            Error::Validation(format!(
                "window index {index} not in records (0..{})",
                records.len()
            ))
        })?;
    Ok(render_window_svg(record))
}
