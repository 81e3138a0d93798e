//! Deterministic scatter-plot SVG: stable element order, fixed precision,
//! point layers with a legend. Byte-identical output for identical inputs.

use infusion_core::worlds::{Point2, PointSet};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub min: Point2,
    pub max: Point2,
}

impl Bounds {
    pub fn new(min: Point2, max: Point2) -> Result<Self> {
        if !(min[0] < max[0] && min[1] < max[1]) {
            return Err(CliError::config("bounds must satisfy min < max per axis"));
        }
        Ok(Bounds { min, max })
    }

    /// Default window for the builtin worlds.
    pub fn toy() -> Self {
        Bounds { min: [-5.5, -5.5], max: [5.5, 5.5] }
    }

    fn contains(&self, p: Point2) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

#[derive(Clone, Debug)]
pub struct LayerStyle {
    pub label: String,
    pub color: String,
    pub radius: f64,
    /// Skip points outside the bounds instead of failing.
    pub clip: bool,
}

impl LayerStyle {
    pub fn new(label: &str, color: &str) -> Self {
        LayerStyle { label: label.to_string(), color: color.to_string(), radius: 2.0, clip: false }
    }

    pub fn clipped(mut self) -> Self {
        self.clip = true;
        self
    }
}

pub const PALETTE: [&str; 6] = ["#777777", "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

const SIZE: f64 = 640.0;
const MARGIN: f64 = 40.0;

/// Render point layers into an SVG document and return it as a string.
/// Points outside the bounds are an error unless the layer opts into
/// clipping.
pub fn render_scatter_svg(
    layers: &[(&PointSet, LayerStyle)],
    bounds: Bounds,
    config_hash: &str,
) -> Result<String> {
    if layers.is_empty() {
        return Err(CliError::config("render_scatter_svg: no layers"));
    }
    let span_x = bounds.max[0] - bounds.min[0];
    let span_y = bounds.max[1] - bounds.min[1];
    let scale = (SIZE - 2.0 * MARGIN) / span_x.max(span_y);
    let to_px = |p: Point2| -> (f64, f64) {
        let x = MARGIN + (p[0] - bounds.min[0]) * scale;
        let y = SIZE - MARGIN - (p[1] - bounds.min[1]) * scale;
        (x, y)
    };

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
    ));
    out.push_str(&format!("<!-- config={config_hash} -->\n"));
    out.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{SIZE}\" height=\"{SIZE}\" fill=\"#ffffff\"/>\n"
    ));

    for (points, style) in layers {
        out.push_str(&format!("<g fill=\"{}\" fill-opacity=\"0.55\">\n", style.color));
        for &p in &points.points {
            if !bounds.contains(p) {
                if style.clip {
                    continue;
                }
                return Err(CliError::config(format!(
                    "point ({}, {}) outside bounds; enable clipping or widen bounds",
                    p[0], p[1]
                )));
            }
            let (x, y) = to_px(p);
            out.push_str(&format!(
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{:.2}\"/>\n",
                style.radius
            ));
        }
        out.push_str("</g>\n");
    }

    for (i, (_, style)) in layers.iter().enumerate() {
        let y = 18.0 + 16.0 * i as f64;
        out.push_str(&format!(
            "<circle cx=\"14\" cy=\"{:.2}\" r=\"4\" fill=\"{}\"/>\n",
            y - 4.0,
            style.color
        ));
        out.push_str(&format!(
            "<text x=\"24\" y=\"{y:.2}\" font-family=\"monospace\" font-size=\"12\">{}</text>\n",
            style.label
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}
