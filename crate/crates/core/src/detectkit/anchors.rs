use serde::{Deserialize, Serialize};

use crate::datakit::BoundingBox;

/// Anchor layout of a region-proposal stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    /// Pixels between neighbouring anchor centers.
    pub stride: f64,
    /// Anchor side lengths in stride units.
    pub scales: Vec<f64>,
    /// Height-to-width aspect ratios.
    pub ratios: Vec<f64>,
}

impl Default for AnchorSpec {
    /// Stride 16 with 128, 256 and 512 pixel anchors at ratios 1:2, 1:1 and 2:1.
    fn default() -> Self {
        Self {
            stride: 16.0,
            scales: vec![8.0, 16.0, 32.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

/// A floating-point anchor given by its center and extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Unclipped anchors in `(row, col, scale, ratio)` order.
///
/// An anchor of scale `s` and ratio `r` has area `(s * stride)^2`, width
/// `s * stride / sqrt(r)` and height `s * stride * sqrt(r)`, centered at
/// `((col + 0.5) * stride, (row + 0.5) * stride)`.
pub fn anchor_grid(spec: &AnchorSpec, feature_h: usize, feature_w: usize) -> Vec<AnchorBox> {
    let mut out = Vec::with_capacity(feature_h * feature_w * spec.scales.len() * spec.ratios.len());
    for row in 0..feature_h {
        for col in 0..feature_w {
            let cx = (col as f64 + 0.5) * spec.stride;
            let cy = (row as f64 + 0.5) * spec.stride;
            for &s in &spec.scales {
                let side = s * spec.stride;
                for &r in &spec.ratios {
                    out.push(AnchorBox {
                        cx,
                        cy,
                        w: side / r.sqrt(),
                        h: side * r.sqrt(),
                    });
                }
            }
        }
    }
    out
}

fn clip_span(lo: f64, hi: f64, limit: u32) -> (u32, u32) {
    let limit_f = f64::from(limit);
    let a = lo.clamp(0.0, limit_f).floor() as u32;
    let b = hi.clamp(0.0, limit_f).ceil() as u32;
    let a = a.min(limit - 1);
    (a, b.max(a + 1) - a)
}

/// Integer anchors clipped to a `image_w`×`image_h` image, one per grid
/// anchor and in the same order. Every box keeps at least one pixel.
pub fn generate_anchors(
    spec: &AnchorSpec,
    feature_h: usize,
    feature_w: usize,
    image_w: u32,
    image_h: u32,
) -> Vec<BoundingBox> {
    anchor_grid(spec, feature_h, feature_w)
        .into_iter()
        .map(|a| {
            let (x, w) = clip_span(a.cx - a.w / 2.0, a.cx + a.w / 2.0, image_w);
            let (y, h) = clip_span(a.cy - a.h / 2.0, a.cy + a.h / 2.0, image_h);
            BoundingBox { x, y, w, h }
        })
        .collect()
}
