//! Synthetic scenes rendered directly at feature-grid resolution.
//!
//! An [`ObjectTemplate`] is a rigid layout of semantic parts and
//! proto-patterns (unit feature vectors standing in for mid-level visual
//! cues). Rendering stamps the patterns onto a noisy grid at a chosen scale
//! and position; occlusion overwrites rectangles of the object with
//! unrelated random vectors. Pixel coordinates are grid cells times 16.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::{level_spec, occlusion_ratio, Occlusion, PartAnnotation, SceneAnnotation};
use crate::dataset::{test_dir, train_dir, Scene};
use crate::error::{Error, Result};
use crate::formats::write_json;
use crate::geometry::{PixelBox, GRID_STRIDE};
use crate::seed::derive;
use crate::tensor::{l2_normalize_locations, Tensor3};

const MAX_TEMPLATE_RESAMPLES: usize = 1000;
const MAX_OCCLUSION_SAMPLES: usize = 10_000;
/// Occluder vectors must stay below this |dot| with every proto-pattern.
const OCCLUDER_MAX_DOT: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateConfig {
    pub num_parts: usize,
    pub num_patterns: usize,
    pub feature_dim: usize,
    /// Object side at canonical scale, in grid cells.
    pub extent: usize,
    /// Every part needs `min_patterns_per_part` patterns within this
    /// Chebyshev distance (half the voting kernel).
    pub voting_radius: usize,
    pub min_patterns_per_part: usize,
    /// Patterns placed just outside the object box (scene context).
    pub context_patterns: usize,
    pub max_dot: f32,
    /// Part box side range in pixels at canonical scale.
    pub part_box_min: f32,
    pub part_box_max: f32,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig {
            num_parts: 6,
            num_patterns: 24,
            feature_dim: 256,
            extent: 14,
            voting_radius: 7,
            min_patterns_per_part: 3,
            context_patterns: 0,
            max_dot: 0.3,
            part_box_min: 80.0,
            part_box_max: 128.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplatePart {
    pub part_id: usize,
    /// Grid offset `(dx, dy)` from the object origin at canonical scale.
    pub offset: (i32, i32),
    /// Box width and height in pixels at canonical scale.
    pub box_size: (f32, f32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoPattern {
    pub pattern_id: usize,
    pub vector: Vec<f32>,
    pub offset: (i32, i32),
    #[serde(default)]
    pub context: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTemplate {
    pub feature_dim: usize,
    pub extent: usize,
    pub parts: Vec<TemplatePart>,
    pub patterns: Vec<ProtoPattern>,
    /// Two sparse directions whose mixture encodes the imaging scale of a
    /// scene (see [`RenderStyle::scale_cue`]).
    pub scale_basis: [Vec<f32>; 2],
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| (x / n) as f32).collect();
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum::<f64>() as f32
}

fn chebyshev(a: (i32, i32), b: (i32, i32)) -> i32 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

/// Deterministic template for `seed`. Fails when the pattern vectors cannot
/// be kept `max_dot` apart or the layout constraint cannot be met within
/// 1000 resamples.
pub fn generate_template(seed: u64, cfg: &TemplateConfig) -> Result<ObjectTemplate> {
    if cfg.extent < 3 {
        return Err(Error::config("template extent must be at least 3 cells"));
    }
    let d = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let total = cfg.num_patterns + cfg.context_patterns;
    let mut vectors: Vec<Vec<f32>> = Vec::with_capacity(total);
    for _ in 0..total {
        let mut accepted = None;
        for _ in 0..MAX_TEMPLATE_RESAMPLES {
            let v = random_unit(&mut rng, d);
            if vectors.iter().all(|u| dot(u, &v).abs() < cfg.max_dot) {
                accepted = Some(v);
                break;
            }
        }
        vectors.push(accepted.ok_or_else(|| {
            Error::Generation(format!(
                "could not draw {total} patterns in {d} dims with |dot| < {}",
                cfg.max_dot
            ))
        })?);
    }

    let e = cfg.extent as i32;
    let interior: Vec<(i32, i32)> = (1..e - 1).flat_map(|y| (1..e - 1).map(move |x| (x, y))).collect();
    let inside: Vec<(i32, i32)> = (0..e).flat_map(|y| (0..e).map(move |x| (x, y))).collect();
    let ring: Vec<(i32, i32)> = (-3..e + 3)
        .flat_map(|y| (-3..e + 3).map(move |x| (x, y)))
        .filter(|&(x, y)| !(0..e).contains(&x) || !(0..e).contains(&y))
        .collect();
    if cfg.num_parts > interior.len() || cfg.num_patterns > inside.len() {
        return Err(Error::config("template too small for the requested parts/patterns"));
    }

    let radius = cfg.voting_radius as i32;
    let mut layout = None;
    for _ in 0..MAX_TEMPLATE_RESAMPLES {
        let parts: Vec<(i32, i32)> = interior.choose_multiple(&mut rng, cfg.num_parts).copied().collect();
        let pats: Vec<(i32, i32)> = inside.choose_multiple(&mut rng, cfg.num_patterns).copied().collect();
        let ok = parts.iter().all(|p| {
            pats.iter().filter(|q| chebyshev(*p, **q) <= radius).count() >= cfg.min_patterns_per_part
        });
        if ok {
            layout = Some((parts, pats));
            break;
        }
    }
    let (part_cells, pattern_cells) = layout.ok_or_else(|| {
        Error::Generation(format!(
            "no layout gives every part {} patterns within radius {radius}",
            cfg.min_patterns_per_part
        ))
    })?;
    let context_cells: Vec<(i32, i32)> = ring.choose_multiple(&mut rng, cfg.context_patterns).copied().collect();

    let parts = part_cells
        .into_iter()
        .enumerate()
        .map(|(i, offset)| TemplatePart {
            part_id: i,
            offset,
            box_size: (
                rng.gen_range(cfg.part_box_min..=cfg.part_box_max),
                rng.gen_range(cfg.part_box_min..=cfg.part_box_max),
            ),
        })
        .collect();
    let patterns = pattern_cells
        .into_iter()
        .map(|c| (c, false))
        .chain(context_cells.into_iter().map(|c| (c, true)))
        .zip(vectors)
        .enumerate()
        .map(|(i, ((offset, context), vector))| ProtoPattern {
            pattern_id: i,
            vector,
            offset,
            context,
        })
        .collect();

    let mut dims: Vec<usize> = (0..d).collect();
    dims.shuffle(&mut rng);
    let per = (d / 2).clamp(1, 8);
    let basis = |chosen: &[usize]| {
        let mut v = vec![0.0f32; d];
        for &i in chosen {
            v[i] = 1.0 / (chosen.len() as f32).sqrt();
        }
        v
    };
    let scale_basis = [basis(&dims[..per]), basis(&dims[per..(2 * per).min(d)])];

    Ok(ObjectTemplate {
        feature_dim: d,
        extent: cfg.extent,
        parts,
        patterns,
        scale_basis,
    })
}

/// Appearance knobs for rendering. The defaults give clean scenes: patterns
/// and Gaussian noise only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderStyle {
    pub noise_sigma: f32,
    /// Magnitude of a random unrelated vector written to every non-pattern
    /// cell (background clutter).
    pub clutter: f32,
    /// Magnitude of the global scale signature added to every cell.
    pub scale_cue: f32,
    /// Scale range mapped onto the signature mixture.
    pub scale_min: f32,
    pub scale_max: f32,
    /// Probability that each object pattern is visible.
    pub presence: f32,
    /// Uniform positional jitter of patterns, in cells.
    pub jitter: i32,
    /// Proto-patterns stamped at random background cells.
    pub distractors: usize,
}

impl Default for RenderStyle {
    fn default() -> Self {
        RenderStyle {
            noise_sigma: 0.0,
            clutter: 0.0,
            scale_cue: 0.0,
            scale_min: 0.8,
            scale_max: 1.25,
            presence: 1.0,
            jitter: 0,
            distractors: 0,
        }
    }
}

impl RenderStyle {
    /// Scale signature for an object rendered at `scale` times canonical.
    fn cue(&self, template: &ObjectTemplate, scale: f32) -> Option<Vec<f32>> {
        if self.scale_cue == 0.0 {
            return None;
        }
        let span = (self.scale_max - self.scale_min).max(1e-6);
        let t = ((scale - self.scale_min) / span).clamp(0.0, 1.0);
        Some(
            template.scale_basis[0]
                .iter()
                .zip(&template.scale_basis[1])
                .map(|(a, b)| self.scale_cue * ((1.0 - t) * a + t * b))
                .collect(),
        )
    }
}

/// Where and how large the object appears.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Object size relative to canonical (1 = short edge of 224 px).
    pub scale: f32,
    /// Grid cell of the object's top-left corner.
    pub origin: (i32, i32),
}

fn scaled_offset(offset: (i32, i32), scale: f32) -> (i32, i32) {
    (
        (offset.0 as f32 * scale).round() as i32,
        (offset.1 as f32 * scale).round() as i32,
    )
}

/// Random unit vector with |dot| below `OCCLUDER_MAX_DOT` against every
/// proto-pattern.
fn unrelated_vector(rng: &mut ChaCha8Rng, template: &ObjectTemplate) -> Vec<f32> {
    loop {
        let v = random_unit(rng, template.feature_dim);
        if template.patterns.iter().all(|p| dot(&p.vector, &v).abs() < OCCLUDER_MAX_DOT) {
            return v;
        }
    }
}

fn add_noise_and_cue(
    features: &mut Tensor3,
    cue: Option<&[f32]>,
    noise_sigma: f32,
    rng: &mut ChaCha8Rng,
    cells: impl Iterator<Item = (usize, usize)>,
) -> Result<()> {
    let normal = if noise_sigma > 0.0 {
        Some(Normal::new(0.0f32, noise_sigma).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };
    for (x, y) in cells {
        let loc = features.location_mut(x, y);
        if let Some(c) = cue {
            for (v, a) in loc.iter_mut().zip(c) {
                *v += a;
            }
        }
        if let Some(n) = &normal {
            for v in loc.iter_mut() {
                *v += n.sample(rng);
            }
        }
    }
    Ok(())
}

/// Object extent in cells at `scale`.
fn object_cells(template: &ObjectTemplate, scale: f32) -> usize {
    ((template.extent as f32 * scale).round() as usize).max(1)
}

/// Renders one scene on a `grid.0 × grid.1` lattice.
///
/// Each visible proto-pattern writes its vector at
/// `origin + round(offset · s)`, where `s` is the realized object side over
/// the template extent; noise and the scale signature are added
/// everywhere and every location is then ℓ2-normalized.
pub fn render_scene(
    template: &ObjectTemplate,
    style: &RenderStyle,
    placement: Placement,
    grid: (usize, usize),
    seed: u64,
    image_id: &str,
) -> Result<Scene> {
    let (gw, gh) = grid;
    let d = template.feature_dim;
    let side = object_cells(template, placement.scale);
    // Offsets use the realized scale so every pattern lands inside the box.
    let scale = side as f32 / template.extent as f32;
    let (ox, oy) = placement.origin;
    if ox < 0 || oy < 0 || ox as usize + side > gw || oy as usize + side > gh {
        return Err(Error::Generation(format!(
            "{image_id}: object of {side} cells at ({ox}, {oy}) does not fit a {gw}x{gh} grid"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Tensor3::zeros(gw, gh, d);
    let in_grid = |x: i32, y: i32| x >= 0 && y >= 0 && (x as usize) < gw && (y as usize) < gh;

    if style.clutter > 0.0 {
        for y in 0..gh {
            for x in 0..gw {
                let v = unrelated_vector(&mut rng, template);
                for (dst, s) in features.location_mut(x, y).iter_mut().zip(&v) {
                    *dst = style.clutter * s;
                }
            }
        }
    }

    let stamp = |features: &mut Tensor3, x: i32, y: i32, v: &[f32]| {
        features.location_mut(x as usize, y as usize).copy_from_slice(v);
    };
    for p in &template.patterns {
        if style.presence < 1.0 && rng.gen::<f32>() >= style.presence {
            continue;
        }
        let (dx, dy) = scaled_offset(p.offset, scale);
        let (mut x, mut y) = (ox + dx, oy + dy);
        if style.jitter > 0 {
            x += rng.gen_range(-style.jitter..=style.jitter);
            y += rng.gen_range(-style.jitter..=style.jitter);
            if !p.context {
                x = x.clamp(ox, ox + side as i32 - 1);
                y = y.clamp(oy, oy + side as i32 - 1);
            }
        }
        if !in_grid(x, y) {
            if p.context {
                continue;
            }
            return Err(Error::Generation(format!("{image_id}: pattern {} falls off the grid", p.pattern_id)));
        }
        stamp(&mut features, x, y, &p.vector);
    }

    if style.distractors > 0 && !template.patterns.is_empty() {
        let inside_object = |x: i32, y: i32| x >= ox && x < ox + side as i32 && y >= oy && y < oy + side as i32;
        let background: Vec<(i32, i32)> = (0..gh as i32)
            .flat_map(|y| (0..gw as i32).map(move |x| (x, y)))
            .filter(|&(x, y)| !inside_object(x, y))
            .collect();
        for _ in 0..style.distractors {
            let Some(&(x, y)) = background.choose(&mut rng) else { break };
            let p = template.patterns.choose(&mut rng).expect("non-empty");
            stamp(&mut features, x, y, &p.vector);
        }
    }

    let cue = style.cue(template, scale);
    let cells = (0..gh).flat_map(|y| (0..gw).map(move |x| (x, y)));
    add_noise_and_cue(&mut features, cue.as_deref(), style.noise_sigma, &mut rng, cells)?;
    let features = l2_normalize_locations(&features, 1e-8);

    let parts = template
        .parts
        .iter()
        .map(|p| {
            let (dx, dy) = scaled_offset(p.offset, scale);
            let (cx, cy) = ((ox + dx) as f32 * GRID_STRIDE, (oy + dy) as f32 * GRID_STRIDE);
            PartAnnotation {
                part_id: p.part_id,
                center: [cx, cy],
                bbox: PixelBox::from_center(cx, cy, p.box_size.0 * scale, p.box_size.1 * scale),
            }
        })
        .collect();
    let object_px = side as f32 * GRID_STRIDE;
    let long_edge = gw.max(gh) as f32 * GRID_STRIDE;
    let annotation = SceneAnnotation {
        image_id: image_id.to_string(),
        object_box: PixelBox::new(ox as f32 * GRID_STRIDE, oy as f32 * GRID_STRIDE, object_px, object_px),
        scale_ratio: object_px / long_edge,
        parts,
        occlusion: Occlusion::default(),
    };
    Ok(Scene {
        features,
        annotation,
    })
}

/// Covers the object with the level's occluder count, rejection-sampling
/// boxes until the occluded fraction of object cells falls in the level's
/// band. Occluded cells get unrelated random vectors; part annotations are
/// kept, so fully hidden parts remain detection targets.
pub fn apply_occlusion(
    scene: &Scene,
    template: &ObjectTemplate,
    style: &RenderStyle,
    level: u8,
    seed: u64,
) -> Result<Scene> {
    if scene.annotation.is_occluded() {
        return Err(Error::data(format!("{} is already occluded", scene.id())));
    }
    let (count, lo, hi) = level_spec(level)
        .filter(|_| level > 0)
        .ok_or_else(|| Error::config(format!("occlusion level {level} not in 1..=3")))?;

    let grid = (scene.features.width as i64, scene.features.height as i64);
    let (x0, y0, x1, y1) = scene.annotation.object_box.grid_cells_outward();
    let short = (x1 - x0).min(y1 - y0).max(1);
    let f = short as f32 / template.extent as f32;
    let smin = ((3.0 * f).round() as i64).max(1);
    let smax = ((8.0 * f).round() as i64).max(smin);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = None;
    for _ in 0..MAX_OCCLUSION_SAMPLES {
        let mut boxes = Vec::with_capacity(count);
        for _ in 0..count {
            let w = rng.gen_range(smin..=smax);
            let h = rng.gen_range(smin..=smax);
            let bx = rng.gen_range(x0 - w / 2..x1 - w / 2);
            let by = rng.gen_range(y0 - h / 2..y1 - h / 2);
            let (cx0, cy0) = (bx.max(0), by.max(0));
            let (cx1, cy1) = ((bx + w).min(grid.0), (by + h).min(grid.1));
            if cx1 <= cx0 || cy1 <= cy0 {
                continue;
            }
            boxes.push(PixelBox::new(
                cx0 as f32 * GRID_STRIDE,
                cy0 as f32 * GRID_STRIDE,
                (cx1 - cx0) as f32 * GRID_STRIDE,
                (cy1 - cy0) as f32 * GRID_STRIDE,
            ));
        }
        if boxes.len() != count {
            continue;
        }
        let r = occlusion_ratio(&scene.annotation.object_box, &boxes);
        if r >= lo && r < hi {
            chosen = Some((boxes, r));
            break;
        }
    }
    let (boxes, ratio) = chosen.ok_or_else(|| {
        Error::Generation(format!(
            "{}: no occluder placement reached ratio band [{lo}, {hi}) in {MAX_OCCLUSION_SAMPLES} samples",
            scene.id()
        ))
    })?;

    let mut features = scene.features.clone();
    let mut covered = Vec::new();
    for b in &boxes {
        let (bx0, by0, bx1, by1) = b.grid_cells_outward();
        for y in by0..by1 {
            for x in bx0..bx1 {
                if !covered.contains(&(x as usize, y as usize)) {
                    covered.push((x as usize, y as usize));
                }
            }
        }
    }
    covered.sort_by_key(|&(x, y)| (y, x));
    for &(x, y) in &covered {
        let v = unrelated_vector(&mut rng, template);
        features.location_mut(x, y).copy_from_slice(&v);
    }
    let cue = style.cue(template, short as f32 / template.extent as f32);
    add_noise_and_cue(&mut features, cue.as_deref(), style.noise_sigma, &mut rng, covered.iter().copied())?;
    for &(x, y) in &covered {
        let loc = features.location_mut(x, y);
        let n = loc.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt().max(1e-8);
        for v in loc.iter_mut() {
            *v = (f64::from(*v) / n) as f32;
        }
    }

    let mut annotation = scene.annotation.clone();
    annotation.occlusion = Occlusion {
        level,
        ratio,
        occluders: boxes,
    };
    Ok(Scene {
        features,
        annotation,
    })
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub template: TemplateConfig,
    pub style: RenderStyle,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            n_train: 100,
            n_test: 100,
            grid_w: 28,
            grid_h: 28,
            template: TemplateConfig::default(),
            style: RenderStyle::default(),
        }
    }
}

impl DatasetConfig {
    /// The synthetic benchmark: a 6-part object on a 28×28×256 grid with
    /// clutter, pattern dropout, jitter and distractors so that single cues
    /// are unreliable.
    pub fn benchmark(seed: u64) -> Self {
        DatasetConfig {
            seed,
            style: RenderStyle {
                noise_sigma: 0.03,
                clutter: 0.6,
                scale_cue: 0.5,
                scale_min: 0.8,
                scale_max: 1.25,
                presence: 0.8,
                jitter: 0,
                distractors: 6,
            },
            ..DatasetConfig::default()
        }
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub counts: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Random placement of the object for scene `seed`.
fn sample_placement(cfg: &DatasetConfig, template: &ObjectTemplate, rng: &mut ChaCha8Rng) -> Result<Placement> {
    let (lo, hi) = (cfg.style.scale_min, cfg.style.scale_max);
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let side = object_cells(template, scale) as i32;
    let room_x = cfg.grid_w as i32 - side;
    let room_y = cfg.grid_h as i32 - side;
    if room_x < 0 || room_y < 0 {
        return Err(Error::config(format!(
            "object of {side} cells does not fit a {}x{} grid",
            cfg.grid_w, cfg.grid_h
        )));
    }
    Ok(Placement {
        scale,
        origin: (rng.gen_range(0..=room_x), rng.gen_range(0..=room_y)),
    })
}

/// One clean scene from the dataset's stream `stream` at `index`.
pub fn dataset_scene(
    cfg: &DatasetConfig,
    template: &ObjectTemplate,
    stream: &str,
    index: usize,
    image_id: &str,
) -> Result<Scene> {
    let seed = derive(cfg.seed, stream, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let placement = sample_placement(cfg, template, &mut rng)?;
    render_scene(template, &cfg.style, placement, (cfg.grid_w, cfg.grid_h), rng.gen(), image_id)
}

pub fn template_for(cfg: &DatasetConfig) -> Result<ObjectTemplate> {
    generate_template(derive(cfg.seed, "template", 0), &cfg.template)
}

/// A generated dataset held in memory.
#[derive(Debug, Clone)]
pub struct Splits {
    pub template: ObjectTemplate,
    pub train: Vec<Scene>,
    /// Test scenes keyed by occlusion level 0..=3.
    pub test: BTreeMap<u8, Vec<Scene>>,
}

/// Renders the occlusion-free train split and test splits L0..L3. Each test
/// scene appears at every level with the same object placement.
pub fn generate_splits(cfg: &DatasetConfig) -> Result<Splits> {
    let template = template_for(cfg)?;
    let train = (0..cfg.n_train)
        .map(|i| dataset_scene(cfg, &template, "train", i, &format!("train_{i:05}")))
        .collect::<Result<Vec<_>>>()?;
    let mut test: BTreeMap<u8, Vec<Scene>> = (0..=3u8).map(|l| (l, Vec::with_capacity(cfg.n_test))).collect();
    for i in 0..cfg.n_test {
        let clean = dataset_scene(cfg, &template, "test", i, &format!("test_L0_{i:05}"))?;
        for level in 1..=3u8 {
            let mut occluded = apply_occlusion(
                &clean,
                &template,
                &cfg.style,
                level,
                derive(cfg.seed, &format!("occlude-L{level}"), i as u64),
            )?;
            occluded.annotation.image_id = format!("test_L{level}_{i:05}");
            test.get_mut(&level).expect("level present").push(occluded);
        }
        test.get_mut(&0).expect("level present").push(clean);
    }
    Ok(Splits { template, train, test })
}

/// Writes `train/`, `test/L0..L3/`, `template.json` and `manifest.json`
/// under `out`.
pub fn dataset_generate(cfg: &DatasetConfig, out: &Path) -> Result<Manifest> {
    let splits = generate_splits(cfg)?;
    let train = train_dir(out);
    std::fs::create_dir_all(&train).map_err(|e| Error::io(&train, e))?;
    for scene in &splits.train {
        scene.write(&train)?;
    }
    for (level, scenes) in &splits.test {
        let dir = test_dir(out, *level);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for scene in scenes {
            scene.write(&dir)?;
        }
    }
    log::info!("wrote {} training and {} test scenes per level", cfg.n_train, cfg.n_test);

    write_json(&out.join("template.json"), &splits.template)?;
    let manifest = Manifest {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seeds: BTreeMap::from([
            ("base".to_string(), cfg.seed),
            ("template".to_string(), derive(cfg.seed, "template", 0)),
        ]),
        counts: BTreeMap::from([
            ("train".to_string(), cfg.n_train),
            ("test_L0".to_string(), cfg.n_test),
            ("test_L1".to_string(), cfg.n_test),
            ("test_L2".to_string(), cfg.n_test),
            ("test_L3".to_string(), cfg.n_test),
        ]),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_template(path: &Path) -> Result<ObjectTemplate> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
