//! On-disk scene collections: `<id>.dvfm` feature grids with `<id>.json`
//! annotation sidecars, grouped in split directories.

use std::fs;
use std::path::{Path, PathBuf};

use crate::annotation::SceneAnnotation;
use crate::error::{Error, Result};
use crate::formats::{read_features, write_features};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub features: Tensor3,
    pub annotation: SceneAnnotation,
}

impl Scene {
    pub fn id(&self) -> &str {
        &self.annotation.image_id
    }

    /// Image size in pixels implied by the grid.
    pub fn image_size(&self) -> (f32, f32) {
        (
            self.features.width as f32 * crate::geometry::GRID_STRIDE,
            self.features.height as f32 * crate::geometry::GRID_STRIDE,
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_features(&dir.join(format!("{}.dvfm", self.id())), &self.features)?;
        self.annotation.write(&dir.join(format!("{}.json", self.id())))
    }

    pub fn read(feature_path: &Path) -> Result<Scene> {
        let features = read_features(feature_path)?;
        let annotation = SceneAnnotation::read(&feature_path.with_extension("json"))?;
        Ok(Scene {
            features,
            annotation,
        })
    }
}

/// Feature files in `dir`, sorted by file name.
pub fn list_split(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "dvfm") {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn load_split(dir: &Path) -> Result<Vec<Scene>> {
    list_split(dir)?.iter().map(|p| Scene::read(p)).collect()
}

pub const TRAIN_DIR: &str = "train";
pub const TEST_DIR: &str = "test";

pub fn train_dir(root: &Path) -> PathBuf {
    root.join(TRAIN_DIR)
}

/// Test split for occlusion level `level`, e.g. `test/L2`.
pub fn test_dir(root: &Path, level: u8) -> PathBuf {
    root.join(TEST_DIR).join(format!("L{level}"))
}
