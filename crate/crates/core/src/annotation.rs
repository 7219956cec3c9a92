use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PixelBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartAnnotation {
    pub part_id: usize,
    /// Part center in pixels.
    pub center: [f32; 2],
    #[serde(rename = "box")]
    pub bbox: PixelBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Occlusion {
    /// 0 (none) through 3 (heaviest).
    pub level: u8,
    /// Fraction of object pixels covered by the union of occluders.
    pub ratio: f64,
    pub occluders: Vec<PixelBox>,
}

/// Ground truth for one scene, stored as `<image_id>.json` next to the
/// feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub image_id: String,
    pub object_box: PixelBox,
    /// Object short edge divided by image long edge.
    pub scale_ratio: f32,
    pub parts: Vec<PartAnnotation>,
    #[serde(default)]
    pub occlusion: Occlusion,
}

/// Occluder count and half-open ratio band of an occlusion level.
pub fn level_spec(level: u8) -> Option<(usize, f64, f64)> {
    match level {
        0 => Some((0, 0.0, 0.0)),
        1 => Some((2, 0.2, 0.4)),
        2 => Some((3, 0.4, 0.6)),
        3 => Some((4, 0.6, 0.8)),
        _ => None,
    }
}

impl SceneAnnotation {
    pub fn is_occluded(&self) -> bool {
        self.occlusion.level > 0 || !self.occlusion.occluders.is_empty()
    }

    /// Checks the occluder count and ratio band against the declared level.
    pub fn validate_occlusion(&self) -> Result<()> {
        let occ = &self.occlusion;
        let (count, lo, hi) = level_spec(occ.level)
            .ok_or_else(|| Error::data(format!("{}: unknown occlusion level {}", self.image_id, occ.level)))?;
        if occ.occluders.len() != count {
            return Err(Error::data(format!(
                "{}: level {} expects {count} occluders, found {}",
                self.image_id,
                occ.level,
                occ.occluders.len()
            )));
        }
        let in_band = if occ.level == 0 {
            occ.ratio == 0.0
        } else {
            occ.ratio >= lo && occ.ratio < hi
        };
        if !in_band {
            return Err(Error::data(format!(
                "{}: occlusion ratio {} outside the level {} band",
                self.image_id, occ.ratio, occ.level
            )));
        }
        Ok(())
    }

    /// Whether a pixel lies under any occluder.
    pub fn occluded_at(&self, px: f32, py: f32) -> bool {
        self.occlusion.occluders.iter().any(|b| b.contains(px, py))
    }

    pub fn scaled(&self, sx: f32, sy: f32) -> SceneAnnotation {
        let mut out = self.clone();
        out.object_box = self.object_box.scaled(sx, sy);
        for p in &mut out.parts {
            p.center = [p.center[0] * sx, p.center[1] * sy];
            p.bbox = p.bbox.scaled(sx, sy);
        }
        for o in &mut out.occlusion.occluders {
            *o = o.scaled(sx, sy);
        }
        out
    }

    pub fn translated(&self, dx: f32, dy: f32) -> SceneAnnotation {
        let shift = |b: &PixelBox| PixelBox::new(b.x + dx, b.y + dy, b.w, b.h);
        let mut out = self.clone();
        out.object_box = shift(&self.object_box);
        for p in &mut out.parts {
            p.center = [p.center[0] + dx, p.center[1] + dy];
            p.bbox = shift(&p.bbox);
        }
        for o in &mut out.occlusion.occluders {
            *o = shift(o);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::formats::write_json(path, self)
    }
}

/// Fraction of the object box covered by the union of occluders, counted in
/// grid cells. Synthesized boxes are cell-aligned, so this equals the pixel
/// ratio.
pub fn occlusion_ratio(object: &PixelBox, occluders: &[PixelBox]) -> f64 {
    let (x0, y0, x1, y1) = object.grid_cells_outward();
    let total = (x1 - x0) * (y1 - y0);
    if total <= 0 {
        return 0.0;
    }
    let cells: Vec<(i64, i64, i64, i64)> = occluders.iter().map(PixelBox::grid_cells_outward).collect();
    let mut covered = 0i64;
    for gy in y0..y1 {
        for gx in x0..x1 {
            if cells
                .iter()
                .any(|&(a, b, c, d)| gx >= a && gx < c && gy >= b && gy < d)
            {
                covered += 1;
            }
        }
    }
    covered as f64 / total as f64
}
