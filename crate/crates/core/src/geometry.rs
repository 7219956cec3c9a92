use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixels per feature-grid cell.
pub const GRID_STRIDE: f32 = 16.0;

/// Object short edge, in pixels, at which concepts and offsets are learned.
pub const CANONICAL_SHORT_EDGE: f32 = 224.0;

/// Canonical short edge in grid cells (224 / 16).
pub const CANONICAL_SHORT_EDGE_CELLS: f32 = CANONICAL_SHORT_EDGE / GRID_STRIDE;

/// Side of the square anchor placed at every part-map peak.
pub const ANCHOR_SIZE: f32 = 100.0;

/// Axis-aligned box in pixels, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl PixelBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        PixelBox { x, y, w, h }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        PixelBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f32, f32) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        f64::from(self.w) * f64::from(self.h)
    }

    pub fn scaled(&self, sx: f32, sy: f32) -> Self {
        PixelBox {
            x: self.x * sx,
            y: self.y * sy,
            w: self.w * sx,
            h: self.h * sy,
        }
    }

    pub fn contains(&self, px: f32, py: f32) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    /// Grid cells covered by the box, rounded outward: `[x0, x1) × [y0, y1)`.
    pub fn grid_cells_outward(&self) -> (i64, i64, i64, i64) {
        (
            (self.x / GRID_STRIDE).floor() as i64,
            (self.y / GRID_STRIDE).floor() as i64,
            ((self.x + self.w) / GRID_STRIDE).ceil() as i64,
            ((self.y + self.h) / GRID_STRIDE).ceil() as i64,
        )
    }
}

/// Intersection over union. Both boxes must have positive extent.
pub fn iou(a: &PixelBox, b: &PixelBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.w > 0.0 && bx.h > 0.0) {
            return Err(Error::Input(format!(
                "box {bx:?} has non-positive width or height"
            )));
        }
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &PixelBox, b: &PixelBox) -> f64 {
    let ix = (f64::from(a.x + a.w).min(f64::from(b.x + b.w)) - f64::from(a.x).max(f64::from(b.x))).max(0.0);
    let iy = (f64::from(a.y + a.h).min(f64::from(b.y + b.h)) - f64::from(a.y).max(f64::from(b.y))).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Nearest grid point of a pixel position, clamped into a `width × height`
/// grid.
pub fn nearest_grid_point(px: f32, py: f32, width: usize, height: usize) -> (usize, usize) {
    let clamp = |v: f32, n: usize| -> usize {
        let g = (v / GRID_STRIDE).round();
        if g <= 0.0 {
            0
        } else {
            (g as usize).min(n.saturating_sub(1))
        }
    };
    (clamp(px, width), clamp(py, height))
}
