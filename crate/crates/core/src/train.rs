//! Training orchestration: scale-normalizing preprocessing, the SGD loop over
//! the head, and the post-hoc box and scale regressors.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::SceneAnnotation;
use crate::dataset::{load_split, train_dir, Scene};
use crate::detect::{anchor_box, encode_box, extract_peaks, fit_scale_regressor, resample_grid, ScaleRegressor};
use crate::error::{Error, Result};
use crate::formats::{read_checkpoint, write_checkpoint, write_json, NamedTensor};
use crate::geometry::{iou_unchecked, CANONICAL_SHORT_EDGE_CELLS, GRID_STRIDE};
use crate::model::{make_label_cube, BoxDeltas, DeepVotingModel, HeadConfig};
use crate::seed::derive;
use crate::tensor::{l2_normalize_locations, Sgd, SgdConfig, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Mode {
    /// Object-cropped inputs.
    #[serde(rename = "dv")]
    Dv,
    /// Whole grid with context.
    #[default]
    #[serde(rename = "dv+")]
    DvPlus,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dv" => Ok(Mode::Dv),
            "dv+" | "dvplus" => Ok(Mode::DvPlus),
            other => Err(Error::config(format!("unknown mode {other:?}, expected dv or dv+"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub dropout_p: f32,
    pub sigma_label: f32,
    pub kernel_size: usize,
    pub num_concepts: usize,
    pub seed: u64,
    /// Anchor/GT IoU needed for a peak to train the box regressor.
    pub regression_iou: f64,
    /// Peak threshold used when collecting regression samples.
    pub regression_tau: f32,
    pub scale_ridge: f64,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::DvPlus,
            epochs: 50,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            dropout_p: 0.5,
            sigma_label: 1.0,
            kernel_size: 15,
            num_concepts: 64,
            seed: 0,
            regression_iou: 0.3,
            regression_tau: 0.3,
            scale_ridge: 1e-3,
            dataset: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.dvck"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.sigma_label > 0.0) {
            return Err(Error::config("label sigma must be positive"));
        }
        self.sgd().validate()
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn head(&self, num_parts: usize, feature_dim: usize) -> HeadConfig {
        HeadConfig {
            num_concepts: self.num_concepts,
            num_parts,
            feature_dim,
            kernel_size: self.kernel_size,
            dropout_p: self.dropout_p,
        }
    }

    /// SHA-256 of the settings that influence the trained parameters (paths
    /// excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.checkpoint = PathBuf::new();
        c.dataset = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A scene brought to canonical object scale, with its label cube.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub features: Tensor3,
    pub labels: Tensor3,
    pub annotation: SceneAnnotation,
}

/// Crops (DV) and rescales so the object short edge spans 14 cells.
///
/// The crop is the object box in cells rounded outward and clipped to the
/// grid; DV+ rescales the full grid by the same factor. Features are
/// ℓ2-normalized per location before and after resampling.
pub fn preprocess(scene: &Scene, mode: Mode, num_parts: usize, sigma: f32) -> Result<Prepared> {
    let ann = &scene.annotation;
    let (gw, gh) = (scene.features.width as i64, scene.features.height as i64);
    let (x0, y0, x1, y1) = ann.object_box.grid_cells_outward();
    let (x0, y0, x1, y1) = (x0.clamp(0, gw), y0.clamp(0, gh), x1.clamp(0, gw), y1.clamp(0, gh));
    if x1 <= x0 || y1 <= y0 || !(ann.object_box.w > 0.0 && ann.object_box.h > 0.0) {
        return Err(Error::data(format!("{}: degenerate object box {:?}", ann.image_id, ann.object_box)));
    }
    let features = l2_normalize_locations(&scene.features, 1e-8);
    let (features, annotation) = match mode {
        Mode::DvPlus => (features, ann.clone()),
        Mode::Dv => {
            let (w, h) = ((x1 - x0) as usize, (y1 - y0) as usize);
            let mut crop = Tensor3::zeros(w, h, features.channels);
            for y in 0..h {
                for x in 0..w {
                    crop.location_mut(x, y)
                        .copy_from_slice(features.location(x + x0 as usize, y + y0 as usize));
                }
            }
            let shifted = ann.translated(-(x0 as f32) * GRID_STRIDE, -(y0 as f32) * GRID_STRIDE);
            (crop, shifted)
        }
    };
    let short = (x1 - x0).min(y1 - y0) as f32;
    let factor = CANONICAL_SHORT_EDGE_CELLS / short;
    let new_w = ((features.width as f32 * factor).round() as usize).max(1);
    let new_h = ((features.height as f32 * factor).round() as usize).max(1);
    let sx = new_w as f32 / features.width as f32;
    let sy = new_h as f32 / features.height as f32;
    let features = resample_grid(&features, new_w, new_h)?;
    let annotation = annotation.scaled(sx, sy);
    let labels = make_label_cube(&annotation, new_w, new_h, num_parts, sigma)?;
    Ok(Prepared {
        features,
        labels,
        annotation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: DeepVotingModel,
    pub scale: ScaleRegressor,
    pub log: Vec<EpochLog>,
    pub config_hash: String,
}

/// Refuses training sets that contain occluded scenes.
pub fn check_training_scenes(scenes: &[Scene]) -> Result<()> {
    if let Some(s) = scenes.iter().find(|s| s.annotation.is_occluded()) {
        return Err(Error::data(format!("occluded scene in training set: {}", s.id())));
    }
    Ok(())
}

fn num_parts_of(scenes: &[Scene]) -> usize {
    scenes
        .iter()
        .flat_map(|s| s.annotation.parts.iter().map(|p| p.part_id + 1))
        .max()
        .unwrap_or(0)
}

/// Trains on in-memory scenes. The part count is inferred from the largest
/// annotated part id.
pub fn train_scenes(scenes: &[Scene], cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    check_training_scenes(scenes)?;
    let num_parts = num_parts_of(scenes);
    if num_parts == 0 {
        return Err(Error::data("training set has no part annotations"));
    }
    let feature_dim = scenes[0].features.channels;
    let prepared = scenes
        .iter()
        .map(|s| preprocess(s, cfg.mode, num_parts, cfg.sigma_label))
        .collect::<Result<Vec<_>>>()?;

    let mut model = DeepVotingModel::init(&cfg.head(num_parts, feature_dim), derive(cfg.seed, "init", 0))?;
    let mut opt = Sgd::new(cfg.sgd())?;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(cfg.seed, "shuffle", epoch as u64)));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Tensor3, &Tensor3)> =
                chunk.iter().map(|&i| (&prepared[i].features, &prepared[i].labels)).collect();
            total += model.train_step(&mut opt, &batch, derive(cfg.seed, "dropout", step))?;
            batches += 1;
            step += 1;
        }
        let loss = total / batches as f64;
        log::info!("epoch {epoch}: loss {loss:.6}");
        log.push(EpochLog { epoch, loss });
    }

    model.box_regressor = fit_box_regressor(&model, &prepared, cfg.regression_tau, cfg.regression_iou)?;
    let features: Vec<&Tensor3> = scenes.iter().map(|s| &s.features).collect();
    let ratios: Vec<f32> = scenes.iter().map(|s| s.annotation.scale_ratio).collect();
    let normalized: Vec<Tensor3> = features.iter().map(|f| l2_normalize_locations(f, 1e-8)).collect();
    let scale = fit_scale_regressor(&normalized.iter().collect::<Vec<_>>(), &ratios, cfg.scale_ridge)?;
    Ok(Trained {
        model,
        scale,
        log,
        config_hash: cfg.hash(),
    })
}

/// Per-part box regression fitted post hoc on training peaks.
///
/// Every peak whose anchor overlaps a same-part ground-truth box with
/// IoU ≥ `min_iou` contributes the regression targets towards its best
/// such box; the least-squares constant fit per part is the target mean.
/// Parts without samples get zero deltas.
pub fn fit_box_regressor(
    model: &DeepVotingModel,
    scenes: &[Prepared],
    tau: f32,
    min_iou: f64,
) -> Result<Vec<BoxDeltas>> {
    let s = model.num_parts();
    let mut sums = vec![[0.0f64; 4]; s];
    let mut counts = vec![0usize; s];
    for scene in scenes {
        let pass = model.forward(&scene.features, false, 0)?;
        for part in 0..s {
            let gts: Vec<_> = scene.annotation.parts.iter().filter(|p| p.part_id == part).collect();
            if gts.is_empty() {
                continue;
            }
            for (peak, _) in extract_peaks(&pass.parts, tau, part) {
                let anchor = anchor_box(peak);
                let best = gts
                    .iter()
                    .map(|g| (iou_unchecked(&anchor, &g.bbox), g))
                    .filter(|(v, _)| *v >= min_iou)
                    .max_by(|a, b| a.0.total_cmp(&b.0));
                if let Some((_, g)) = best {
                    let t = encode_box(peak, &g.bbox);
                    for (acc, v) in sums[part].iter_mut().zip(t) {
                        *acc += f64::from(v);
                    }
                    counts[part] += 1;
                }
            }
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(part, (sum, &n))| {
            if n == 0 {
                log::warn!("part {part}: no matched training peaks, using identity regression");
                [0.0; 4]
            } else {
                sum.map(|v| (v / n as f64) as f32)
            }
        })
        .collect())
}

/// Model, scale regressor and config hash as checkpoint tensors.
pub fn checkpoint_tensors(model: &DeepVotingModel, scale: &ScaleRegressor, config_hash: &str) -> Vec<NamedTensor> {
    let mut t = model.to_tensors();
    t.extend(scale.to_tensors());
    let hash: Vec<f32> = config_hash.bytes().map(f32::from).collect();
    t.push(NamedTensor::new("meta.config_hash", &[hash.len()], hash));
    t
}

pub fn save_checkpoint(path: &Path, trained: &Trained) -> Result<()> {
    write_checkpoint(path, &checkpoint_tensors(&trained.model, &trained.scale, &trained.config_hash))
}

/// Loaded checkpoint; `scale` is `None` for checkpoints without a scale
/// regressor.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DeepVotingModel,
    pub scale: Option<ScaleRegressor>,
    pub config_hash: Option<String>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let tensors = read_checkpoint(path)?;
    let model = DeepVotingModel::from_tensors(&tensors)?;
    let scale = ScaleRegressor::from_tensors(&tensors)?;
    let config_hash = tensors
        .iter()
        .find(|t| t.name == "meta.config_hash")
        .map(|t| t.data.iter().map(|v| *v as u8 as char).collect());
    Ok(Checkpoint {
        model,
        scale,
        config_hash,
    })
}

/// Loads `<dataset>/train`, trains, and writes the checkpoint plus a
/// `<checkpoint>.log.json` loss log.
pub fn train(cfg: &TrainConfig) -> Result<Trained> {
    let scenes = load_split(&train_dir(&cfg.dataset))?;
    let trained = train_scenes(&scenes, cfg)?;
    save_checkpoint(&cfg.checkpoint, &trained)?;
    write_json(&log_path(&cfg.checkpoint), &trained.log)?;
    Ok(trained)
}

pub fn log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".log.json");
    checkpoint.with_file_name(name)
}
