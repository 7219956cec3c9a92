//! PASCAL-style evaluation: greedy matching at an IoU threshold, all-points
//! interpolated AP, peak recall, and sweeps over occlusion levels.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_split, test_dir, Scene};
use crate::detect::{decode_box, decode_part_map, extract_peaks, nms, DetectConfig, Detection, ScaleRegressor, ScaleSource, WorkingGrid};
use crate::error::{Error, Result};
use crate::formats::{write_bytes, write_json};
use crate::geometry::{iou_unchecked, PixelBox, GRID_STRIDE};
use crate::model::DeepVotingModel;
use crate::tensor::Tensor3;

pub use crate::geometry::iou;

/// One ground-truth box of the part under evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub bbox: PixelBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Detections ranked by score, ties by image id then row-major peak.
pub fn rank_detections(detections: &[Detection]) -> Vec<&Detection> {
    let mut ranked: Vec<&Detection> = detections.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then((a.peak.1, a.peak.0).cmp(&(b.peak.1, b.peak.0)))
    });
    ranked
}

/// True-positive flags in rank order. Each detection takes the unmatched
/// ground truth of its image with the highest IoU ≥ `iou_thresh`.
pub fn match_detections(ranked: &[&Detection], gts: &[GroundTruth], iou_thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    ranked
        .iter()
        .map(|d| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(i, g)| !taken[*i] && g.image_id == d.image_id)
                .map(|(i, g)| (i, iou_unchecked(&d.bbox, &g.bbox)))
                .filter(|(_, v)| *v >= iou_thresh)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((i, _)) => {
                    taken[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the monotone precision envelope (all-points interpolation).
/// Zero when there are no ground truths.
pub fn average_precision(tp: &[bool], num_gt: usize) -> (f64, PrCurve) {
    let mut curve = PrCurve::default();
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        curve.precision.push(hits as f64 / (i + 1) as f64);
        curve.recall.push(if num_gt == 0 { 0.0 } else { hits as f64 / num_gt as f64 });
    }
    if num_gt == 0 {
        return (0.0, curve);
    }
    let mut envelope = curve.precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in curve.recall.iter().zip(&envelope) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    (ap, curve)
}

pub fn match_and_ap(detections: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> (f64, PrCurve) {
    let ranked = rank_detections(detections);
    let tp = match_detections(&ranked, gts, iou_thresh);
    average_precision(&tp, gts.len())
}

/// Fraction of ground-truth cells with a candidate peak within `radius`
/// cells (Euclidean). Zero when there is nothing to cover.
pub fn peak_recall(peaks: &[(f32, f32)], gts: &[(f32, f32)], radius: f32) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let covered = gts
        .iter()
        .filter(|g| peaks.iter().any(|p| (p.0 - g.0).hypot(p.1 - g.1) <= radius))
        .count();
    covered as f64 / gts.len() as f64
}

/// The strongest single voting connection per part: concept `k` observed at
/// offset `(du, dv)` from the part location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleCue {
    pub concept: usize,
    pub offset: (i32, i32),
}

/// Largest positive voting weight per part.
pub fn single_concept_cues(model: &DeepVotingModel) -> Vec<SingleCue> {
    let k = &model.voting;
    let (ph, pw) = ((k.kh / 2) as i32, (k.kw / 2) as i32);
    (0..k.cout)
        .map(|part| {
            let mut best = (f32::NEG_INFINITY, SingleCue { concept: 0, offset: (0, 0) });
            for i in 0..k.kh {
                for j in 0..k.kw {
                    for c in 0..k.cin {
                        let w = k.weight(i, j, c, part);
                        if w > best.0 {
                            best = (
                                w,
                                SingleCue {
                                    concept: c,
                                    offset: (j as i32 - pw, i as i32 - ph),
                                },
                            );
                        }
                    }
                }
            }
            best.1
        })
        .collect()
}

/// Score map of one cue: `B[p] = Y[p + offset, concept]`, zero off-grid.
pub fn cue_score_map(concepts: &Tensor3, cues: &[SingleCue]) -> Tensor3 {
    let (w, h) = (concepts.width, concepts.height);
    let mut out = Tensor3::zeros(w, h, cues.len());
    for (part, cue) in cues.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x as i32 + cue.offset.0, y as i32 + cue.offset.1);
                if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                    out.set(x, y, part, concepts.get(sx as usize, sy as usize, cue.concept));
                }
            }
        }
    }
    out
}

/// Which scale ratio the sweep normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ScaleChoice {
    #[default]
    #[serde(rename = "predicted")]
    Predicted,
    #[serde(rename = "ground_truth")]
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub tau: f32,
    pub nms_iou: f64,
    pub iou_thresh: f64,
    /// Peak threshold of the single-concept baseline.
    pub baseline_tau: f32,
    /// Radius in cells for candidate-peak recall.
    pub recall_radius: f32,
    pub scale: ScaleChoice,
    pub ap_variant: String,
    pub cue_ranking: String,
    pub threads: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            tau: 0.3,
            nms_iou: 0.3,
            iou_thresh: 0.5,
            baseline_tau: 1e-6,
            recall_radius: 2.0,
            scale: ScaleChoice::Predicted,
            ap_variant: "all-points".to_string(),
            cue_ranking: "contribution".to_string(),
            threads: 1,
        }
    }
}

impl EvalSettings {
    fn detect_config(&self) -> DetectConfig {
        DetectConfig {
            tau: self.tau,
            nms_iou: self.nms_iou,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartResult {
    pub part_id: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
    pub curve: PrCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub num_scenes: usize,
    pub map: f64,
    pub parts: Vec<PartResult>,
    pub peak_recall: f64,
    pub baseline_map: f64,
    pub baseline_parts: Vec<PartResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub settings: EvalSettings,
    /// Mean AP over parts, keyed by object class.
    pub class_map: BTreeMap<String, BTreeMap<String, f64>>,
    pub levels: BTreeMap<String, LevelResult>,
}

pub const CLASS_NAME: &str = "object";

impl EvalReport {
    pub fn map(&self, level: u8) -> Option<f64> {
        self.levels.get(&level_key(level)).map(|l| l.map)
    }

    pub fn baseline_map(&self, level: u8) -> Option<f64> {
        self.levels.get(&level_key(level)).map(|l| l.baseline_map)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("part_id,level,ap,method\n");
        for (level, r) in &self.levels {
            for (method, parts) in [("deepvoting", &r.parts), ("single_concept", &r.baseline_parts)] {
                for p in parts {
                    out.push_str(&format!("{},{level},{:.6},{method}\n", p.part_id, p.ap));
                }
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("report.json"), self)?;
        write_bytes(&dir.join("report.csv"), self.to_csv().as_bytes())
    }
}

pub fn level_key(level: u8) -> String {
    format!("L{level}")
}

/// Per-scene outputs of the full model and the baseline.
struct SceneOutcome {
    detections: Vec<Detection>,
    baseline: Vec<Detection>,
    peaks: Vec<(usize, (f32, f32))>,
}

fn evaluate_scene(
    model: &DeepVotingModel,
    scale: &ScaleRegressor,
    cues: &[SingleCue],
    scene: &Scene,
    settings: &EvalSettings,
) -> Result<SceneOutcome> {
    let source = match settings.scale {
        ScaleChoice::Predicted => ScaleSource::Predicted(scale),
        ScaleChoice::GroundTruth => ScaleSource::Given(scene.annotation.scale_ratio),
    };
    let grid = WorkingGrid::prepare(&scene.features, source)?;
    let pass = model.forward(&grid.features, false, 0)?;
    let cfg = settings.detect_config();
    let detections = decode_part_map(model, &pass.parts, &grid, &cfg, scene.id());

    let mut peaks = Vec::new();
    for part in 0..model.num_parts() {
        for ((x, y), _) in extract_peaks(&pass.parts, settings.tau, part) {
            peaks.push((part, (x as f32 / grid.sx, y as f32 / grid.sy)));
        }
    }

    let scores = cue_score_map(&pass.concepts, cues);
    let mut baseline = Vec::new();
    for part in 0..cues.len() {
        let deltas = model.box_regressor.get(part).copied().unwrap_or_default();
        let candidates = extract_peaks(&scores, settings.baseline_tau, part)
            .into_iter()
            .map(|(peak, score)| Detection {
                image_id: scene.id().to_string(),
                part_id: part,
                bbox: grid.to_input_frame(&decode_box(peak, &deltas)),
                score,
                peak,
            })
            .collect();
        baseline.extend(nms(candidates, settings.nms_iou));
    }
    Ok(SceneOutcome {
        detections,
        baseline,
        peaks,
    })
}

fn evaluate_all(
    model: &DeepVotingModel,
    scale: &ScaleRegressor,
    scenes: &[Scene],
    settings: &EvalSettings,
) -> Result<Vec<SceneOutcome>> {
    let cues = single_concept_cues(model);
    let threads = settings.threads.max(1).min(scenes.len().max(1));
    if threads == 1 {
        return scenes
            .iter()
            .map(|s| evaluate_scene(model, scale, &cues, s, settings))
            .collect();
    }
    let chunk = scenes.len().div_ceil(threads);
    let cues = &cues;
    let parts: Vec<Result<Vec<SceneOutcome>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = scenes
            .chunks(chunk)
            .map(|c| {
                scope.spawn(move || {
                    c.iter()
                        .map(|s| evaluate_scene(model, scale, cues, s, settings))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(scenes.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn part_results(num_parts: usize, scenes: &[Scene], dets: &[Detection], iou_thresh: f64) -> Vec<PartResult> {
    (0..num_parts)
        .map(|part| {
            let gts: Vec<GroundTruth> = scenes
                .iter()
                .flat_map(|s| {
                    s.annotation.parts.iter().filter(|p| p.part_id == part).map(|p| GroundTruth {
                        image_id: s.id().to_string(),
                        bbox: p.bbox,
                    })
                })
                .collect();
            let mine: Vec<Detection> = dets.iter().filter(|d| d.part_id == part).cloned().collect();
            let (ap, curve) = match_and_ap(&mine, &gts, iou_thresh);
            PartResult {
                part_id: part,
                ap,
                num_gt: gts.len(),
                num_detections: mine.len(),
                curve,
            }
        })
        .collect()
}

/// Mean AP over parts that have ground truth.
pub fn mean_ap(parts: &[PartResult]) -> f64 {
    let scored: Vec<f64> = parts.iter().filter(|p| p.num_gt > 0).map(|p| p.ap).collect();
    if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    }
}

/// Evaluates the model and the single-concept baseline on one set of scenes.
pub fn evaluate_level(
    model: &DeepVotingModel,
    scale: &ScaleRegressor,
    scenes: &[Scene],
    settings: &EvalSettings,
) -> Result<LevelResult> {
    let outcomes = evaluate_all(model, scale, scenes, settings)?;
    let dets: Vec<Detection> = outcomes.iter().flat_map(|o| o.detections.iter().cloned()).collect();
    let base: Vec<Detection> = outcomes.iter().flat_map(|o| o.baseline.iter().cloned()).collect();
    let parts = part_results(model.num_parts(), scenes, &dets, settings.iou_thresh);
    let baseline_parts = part_results(model.num_parts(), scenes, &base, settings.iou_thresh);

    let mut covered = 0.0;
    let mut total = 0usize;
    for (scene, o) in scenes.iter().zip(&outcomes) {
        for part in 0..model.num_parts() {
            let gts: Vec<(f32, f32)> = scene
                .annotation
                .parts
                .iter()
                .filter(|p| p.part_id == part)
                .map(|p| (p.center[0] / GRID_STRIDE, p.center[1] / GRID_STRIDE))
                .collect();
            let peaks: Vec<(f32, f32)> = o.peaks.iter().filter(|(p, _)| *p == part).map(|(_, c)| *c).collect();
            covered += peak_recall(&peaks, &gts, settings.recall_radius) * gts.len() as f64;
            total += gts.len();
        }
    }
    Ok(LevelResult {
        num_scenes: scenes.len(),
        map: mean_ap(&parts),
        parts,
        peak_recall: if total == 0 { 0.0 } else { covered / total as f64 },
        baseline_map: mean_ap(&baseline_parts),
        baseline_parts,
    })
}

/// All detections of the full model, in scene order.
pub fn detect_all(
    model: &DeepVotingModel,
    scale: &ScaleRegressor,
    scenes: &[Scene],
    settings: &EvalSettings,
) -> Result<Vec<Detection>> {
    Ok(evaluate_all(model, scale, scenes, settings)?
        .into_iter()
        .flat_map(|o| o.detections)
        .collect())
}

/// Builds a report from in-memory splits keyed by level.
pub fn sweep_scenes(
    model: &DeepVotingModel,
    scale: &ScaleRegressor,
    splits: &BTreeMap<u8, Vec<Scene>>,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let mut levels = BTreeMap::new();
    for (level, scenes) in splits {
        let r = evaluate_level(model, scale, scenes, settings)?;
        log::info!("{}: mAP {:.4} (baseline {:.4})", level_key(*level), r.map, r.baseline_map);
        levels.insert(level_key(*level), r);
    }
    let class_map = BTreeMap::from([(
        CLASS_NAME.to_string(),
        levels.iter().map(|(k, v)| (k.clone(), v.map)).collect(),
    )]);
    Ok(EvalReport {
        settings: settings.clone(),
        class_map,
        levels,
    })
}

/// Runs every available level of `<data>/test/L0..L3`. Missing splits are
/// logged and skipped; empty splits are omitted from the report.
pub fn occlusion_sweep(
    model: &DeepVotingModel,
    scale: &ScaleRegressor,
    data: &Path,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let mut splits = BTreeMap::new();
    for level in 0..=3u8 {
        let dir = test_dir(data, level);
        if !dir.is_dir() {
            log::warn!("split {} missing, skipped", dir.display());
            continue;
        }
        let scenes = load_split(&dir)?;
        for s in &scenes {
            if s.annotation.occlusion.level != level {
                return Err(Error::data(format!(
                    "{} is level {} but stored under {}",
                    s.id(),
                    s.annotation.occlusion.level,
                    dir.display()
                )));
            }
        }
        if !scenes.is_empty() {
            splits.insert(level, scenes);
        }
    }
    sweep_scenes(model, scale, &splits, settings)
}
