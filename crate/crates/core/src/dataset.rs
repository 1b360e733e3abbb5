//! Labeled scenes grouped into train/validation/test splits, their voxelized
//! form, and the on-disk manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Shape3;
use crate::pointcloud::{
    load_pointcloud, voxelize, PointCloud, PointFormat, VoxelGrid, VoxelLabelGrid, Voxelized,
};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

/// One labeled point cloud plus the generator facts needed downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub name: String,
    pub seed: u64,
    pub cloud: PointCloud,
    /// Radius of the tower the scene is cropped around, in meters.
    pub tower_radius_m: Option<f64>,
    pub tower_height_m: Option<f64>,
}

impl Scene {
    pub fn voxelize(&self, shape: Shape3, target_label: u8) -> Result<Voxelized> {
        voxelize(&self.cloud, shape, target_label)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub target_label: u8,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scenes(&self) -> impl Iterator<Item = (Split, &Scene)> {
        self.train
            .iter()
            .map(|s| (Split::Train, s))
            .chain(self.val.iter().map(|s| (Split::Val, s)))
            .chain(self.test.iter().map(|s| (Split::Test, s)))
    }
}

/// Occupancy grid and voxel labels of one scene.
#[derive(Clone, Debug)]
pub struct VoxelSample {
    pub name: String,
    pub grid: VoxelGrid,
    pub labels: VoxelLabelGrid,
}

pub fn voxel_samples(scenes: &[Scene], shape: Shape3, target_label: u8) -> Result<Vec<VoxelSample>> {
    scenes
        .par_iter()
        .map(|s| {
            let v = s.voxelize(shape, target_label)?;
            Ok(VoxelSample {
                name: s.name.clone(),
                grid: v.grid,
                labels: v.labels,
            })
        })
        .collect()
}

/// Sizes of `(train, val, test)` for `n` items. Fractions must sum to 1;
/// train and val are rounded and test takes the rest.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must be in [0, 1] and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let train = ((n as f64) * a).round() as usize;
    let val = (((n as f64) * b).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    Ok((train, val, n - train - val))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Scene file, relative to the manifest's directory.
    pub path: String,
    pub split: Split,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub tower_radius_m: Option<f64>,
    #[serde(default)]
    pub tower_height_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub target_label: u8,
    pub base_seed: u64,
    pub config_hash: String,
    /// Generator configuration the scenes were produced with.
    pub scene_config: serde_json::Value,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::config(format!(
                "manifest format_version {} is not supported",
                m.format_version
            )));
        }
        Ok(m)
    }

    /// Read every scene file listed, resolving paths against `root`.
    pub fn load_dataset(&self, root: &Path) -> Result<Dataset> {
        let loaded: Vec<(Split, Scene)> = self
            .scenes
            .par_iter()
            .map(|e| {
                let path: PathBuf = root.join(&e.path);
                let cloud = load_pointcloud(&path, PointFormat::Binary)?;
                let name = Path::new(&e.path)
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or(&e.path)
                    .to_string();
                Ok((
                    e.split,
                    Scene {
                        name,
                        seed: e.seed,
                        cloud,
                        tower_radius_m: e.tower_radius_m,
                        tower_height_m: e.tower_height_m,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        let mut ds = Dataset {
            target_label: self.target_label,
            ..Dataset::default()
        };
        for (split, scene) in loaded {
            match split {
                Split::Train => ds.train.push(scene),
                Split::Val => ds.val.push(scene),
                Split::Test => ds.test.push(scene),
            }
        }
        Ok(ds)
    }
}

/// Load a manifest and every scene it lists.
pub fn load_manifest_dataset(path: &Path) -> Result<(Manifest, Dataset)> {
    let m = Manifest::load(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let ds = m.load_dataset(root)?;
    Ok((m, ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_split_shape() {
        assert_eq!(split_sizes(100, (0.2, 0.1, 0.7)).unwrap(), (20, 10, 70));
        assert_eq!(split_sizes(200, (0.2, 0.1, 0.7)).unwrap(), (40, 20, 140));
        assert_eq!(split_sizes(3, (0.2, 0.1, 0.7)).unwrap(), (1, 0, 2));
        assert!(split_sizes(10, (0.5, 0.5, 0.5)).is_err());
    }

    #[test]
    fn split_names() {
        for s in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(s.to_string().parse::<Split>().unwrap(), s);
        }
    }
}
