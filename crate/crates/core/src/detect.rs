//! Inference: scale normalization, the head's forward pass, peak decoding,
//! anchor regression and per-part non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::NamedTensor;
use crate::geometry::{iou_unchecked, PixelBox, ANCHOR_SIZE, CANONICAL_SHORT_EDGE, GRID_STRIDE};
use crate::model::{BoxDeltas, DeepVotingModel};
use crate::tensor::{l2_normalize_locations, resize_bilinear, Tensor3};

/// Lower bound (exclusive) of predicted scale ratios.
pub const MIN_SCALE_RATIO: f32 = 0.05;
pub const MAX_SCALE_RATIO: f32 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub part_id: usize,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub score: f32,
    /// Peak cell `(w, h)` on the scale-normalized grid the head ran on.
    pub peak: (usize, usize),
}

/// Linear map from globally pooled feature magnitudes to the ratio of object
/// short edge to image long edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRegressor {
    pub weights: Vec<f32>,
    pub bias: f32,
}

impl ScaleRegressor {
    pub fn constant(feature_dim: usize, bias: f32) -> Self {
        ScaleRegressor {
            weights: vec![0.0; feature_dim],
            bias,
        }
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        vec![
            NamedTensor::new("scale.weight", &[self.weights.len()], self.weights.clone()),
            NamedTensor::new("scale.bias", &[1], vec![self.bias]),
        ]
    }

    /// `None` when the checkpoint carries no scale regressor.
    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Option<Self>> {
        let w = tensors.iter().find(|t| t.name == "scale.weight");
        let b = tensors.iter().find(|t| t.name == "scale.bias");
        match (w, b) {
            (Some(w), Some(b)) if b.data.len() == 1 => Ok(Some(ScaleRegressor {
                weights: w.data.clone(),
                bias: b.data[0],
            })),
            (None, None) => Ok(None),
            _ => Err(Error::data("malformed scale regressor tensors")),
        }
    }
}

/// Per-channel mean of |x| over all locations.
pub fn pooled_magnitudes(features: &Tensor3) -> Vec<f64> {
    let mut acc = vec![0.0f64; features.channels];
    for loc in features.data.chunks_exact(features.channels.max(1)) {
        for (a, v) in acc.iter_mut().zip(loc) {
            *a += f64::from(v.abs());
        }
    }
    let n = features.num_cells().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

pub fn predict_scale(reg: &ScaleRegressor, features: &Tensor3) -> f32 {
    let pooled = pooled_magnitudes(features);
    let raw = pooled
        .iter()
        .zip(&reg.weights)
        .map(|(p, w)| p * f64::from(*w))
        .sum::<f64>()
        + f64::from(reg.bias);
    let raw = if raw.is_finite() { raw as f32 } else { MAX_SCALE_RATIO };
    raw.clamp(MIN_SCALE_RATIO + f32::EPSILON, MAX_SCALE_RATIO)
}

/// Ridge least squares on pooled magnitudes; the bias is not penalized.
pub fn fit_scale_regressor(features: &[&Tensor3], ratios: &[f32], ridge: f64) -> Result<ScaleRegressor> {
    if features.len() != ratios.len() {
        return Err(Error::config("scale regressor needs one ratio per scene"));
    }
    let Some(first) = features.first() else {
        return Err(Error::data("cannot fit a scale regressor without scenes"));
    };
    let d = first.channels;
    let n = d + 1;
    let mut ata = vec![0.0f64; n * n];
    let mut atb = vec![0.0f64; n];
    for (x, &y) in features.iter().zip(ratios) {
        if x.channels != d {
            return Err(Error::config("scenes disagree on feature depth"));
        }
        let mut row = pooled_magnitudes(x);
        row.push(1.0);
        for i in 0..n {
            atb[i] += row[i] * f64::from(y);
            for j in 0..n {
                ata[i * n + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        ata[i * n + i] += ridge;
    }
    let sol = solve_spd(&mut ata, &mut atb, n)?;
    Ok(ScaleRegressor {
        weights: sol[..d].iter().map(|v| *v as f32).collect(),
        bias: sol[d] as f32,
    })
}

/// Gaussian elimination with partial pivoting on a dense `n × n` system.
fn solve_spd(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("non-empty range");
        if a[pivot * n + col].abs() < 1e-12 {
            return Err(Error::data("scale regression system is singular"));
        }
        if pivot != col {
            for j in 0..n {
                a.swap(pivot * n + j, col * n + j);
            }
            b.swap(pivot, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|j| a[row * n + j] * x[j]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    Ok(x)
}

/// Bilinear resampling of a grid to `(new_w, new_h)` followed by
/// per-location renormalization. Equal dimensions return the input.
pub fn resample_grid(features: &Tensor3, new_w: usize, new_h: usize) -> Result<Tensor3> {
    if new_w == features.width && new_h == features.height {
        return Ok(features.clone());
    }
    let resized = resize_bilinear(features, new_w, new_h)?;
    Ok(l2_normalize_locations(&resized, 1e-8))
}

/// Grid rescaled so an object of `ratio` (short edge / image long edge)
/// gets the canonical short edge. Returns the new grid and the applied
/// per-axis factors.
pub fn normalize_scale(features: &Tensor3, ratio: f32) -> Result<(Tensor3, f32, f32)> {
    if !(ratio > 0.0) {
        return Err(Error::Input(format!("scale ratio must be positive, got {ratio}")));
    }
    let long_px = features.width.max(features.height) as f32 * GRID_STRIDE;
    let factor = CANONICAL_SHORT_EDGE / (ratio * long_px);
    let new_w = ((features.width as f32 * factor).round() as usize).max(1);
    let new_h = ((features.height as f32 * factor).round() as usize).max(1);
    let out = resample_grid(features, new_w, new_h)?;
    Ok((
        out,
        new_w as f32 / features.width as f32,
        new_h as f32 / features.height as f32,
    ))
}

/// Strict 3×3 local maxima of channel `part_id` with `z ≥ tau`, by score
/// descending then row-major cell.
pub fn extract_peaks(z: &Tensor3, tau: f32, part_id: usize) -> Vec<((usize, usize), f32)> {
    let (w, h) = (z.width, z.height);
    let mut peaks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = z.get(x, y, part_id);
            if !(v >= tau) {
                continue;
            }
            let mut strict = true;
            'nb: for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    if (nx, ny) != (x, y) && z.get(nx, ny, part_id) >= v {
                        strict = false;
                        break 'nb;
                    }
                }
            }
            if strict {
                peaks.push(((x, y), v));
            }
        }
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then((a.0 .1, a.0 .0).cmp(&(b.0 .1, b.0 .0))));
    peaks
}

/// Center of the anchor placed at grid cell `peak`.
pub fn anchor_center(peak: (usize, usize)) -> (f32, f32) {
    (
        peak.0 as f32 * GRID_STRIDE + GRID_STRIDE / 2.0,
        peak.1 as f32 * GRID_STRIDE + GRID_STRIDE / 2.0,
    )
}

pub fn anchor_box(peak: (usize, usize)) -> PixelBox {
    let (cx, cy) = anchor_center(peak);
    PixelBox::from_center(cx, cy, ANCHOR_SIZE, ANCHOR_SIZE)
}

pub fn decode_box(peak: (usize, usize), deltas: &BoxDeltas) -> PixelBox {
    let (cx, cy) = anchor_center(peak);
    let [dx, dy, dw, dh] = *deltas;
    PixelBox::from_center(
        cx + dx * ANCHOR_SIZE,
        cy + dy * ANCHOR_SIZE,
        ANCHOR_SIZE * dw.exp(),
        ANCHOR_SIZE * dh.exp(),
    )
}

/// Regression targets that turn the anchor at `peak` into `target`.
pub fn encode_box(peak: (usize, usize), target: &PixelBox) -> BoxDeltas {
    let (cx, cy) = anchor_center(peak);
    let (tx, ty) = target.center();
    [
        (tx - cx) / ANCHOR_SIZE,
        (ty - cy) / ANCHOR_SIZE,
        (target.w / ANCHOR_SIZE).ln(),
        (target.h / ANCHOR_SIZE).ln(),
    ]
}

/// Greedy suppression within one part: keep the best remaining detection,
/// drop everything overlapping it with IoU ≥ `iou_thresh`.
pub fn nms(mut detections: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then((a.peak.1, a.peak.0).cmp(&(b.peak.1, b.peak.0)))
    });
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for d in detections {
        if kept.iter().all(|k| iou_unchecked(&k.bbox, &d.bbox) < iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub tau: f32,
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig { tau: 0.3, nms_iou: 0.3 }
    }
}

/// Where the scale ratio used for normalization comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleSource<'a> {
    Predicted(&'a ScaleRegressor),
    Given(f32),
}

impl ScaleSource<'_> {
    pub fn ratio(&self, features: &Tensor3) -> f32 {
        match self {
            ScaleSource::Predicted(reg) => predict_scale(reg, features),
            ScaleSource::Given(r) => *r,
        }
    }
}

/// The scale-normalized grid a detection was computed on.
#[derive(Debug, Clone)]
pub struct WorkingGrid {
    pub features: Tensor3,
    pub ratio: f32,
    pub sx: f32,
    pub sy: f32,
}

impl WorkingGrid {
    pub fn prepare(features: &Tensor3, scale: ScaleSource<'_>) -> Result<Self> {
        let ratio = scale.ratio(features);
        let normalized = l2_normalize_locations(features, 1e-8);
        let (features, sx, sy) = normalize_scale(&normalized, ratio)?;
        Ok(WorkingGrid { features, ratio, sx, sy })
    }

    /// Maps a box on the working grid back to the input frame.
    pub fn to_input_frame(&self, b: &PixelBox) -> PixelBox {
        b.scaled(1.0 / self.sx, 1.0 / self.sy)
    }
}

/// Decodes every part channel of `z` into boxes in the input frame.
pub fn decode_part_map(
    model: &DeepVotingModel,
    z: &Tensor3,
    grid: &WorkingGrid,
    cfg: &DetectConfig,
    image_id: &str,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for part in 0..z.channels {
        let deltas = model.box_regressor.get(part).copied().unwrap_or_default();
        let candidates = extract_peaks(z, cfg.tau, part)
            .into_iter()
            .map(|(peak, score)| Detection {
                image_id: image_id.to_string(),
                part_id: part,
                bbox: grid.to_input_frame(&decode_box(peak, &deltas)),
                score,
                peak,
            })
            .collect();
        out.extend(nms(candidates, cfg.nms_iou));
    }
    out
}

/// Full inference on one scene: scale normalization, forward pass with
/// dropout off, peak decoding, regression, NMS, and mapping back to the
/// input pixel frame.
pub fn detect(
    model: &DeepVotingModel,
    scale: ScaleSource<'_>,
    features: &Tensor3,
    cfg: &DetectConfig,
    image_id: &str,
) -> Result<Vec<Detection>> {
    let grid = WorkingGrid::prepare(features, scale)?;
    let pass = model.forward(&grid.features, false, 0)?;
    Ok(decode_part_map(model, &pass.parts, &grid, cfg, image_id))
}
