//! Synthetic rural scenes (rough ground, lattice towers, sagging power lines,
//! vegetation blobs), near-tower label noise, on-disk datasets, the cylinder
//! template-matching baseline and the operator ablation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv::{correlate, ResponseGrid};
use crate::dataset::{
    split_sizes, voxel_samples, Dataset, Manifest, ManifestEntry, Scene, VoxelSample,
    MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::grid::{Grid3, Shape3};
use crate::kernels::stencil_center;
use crate::model::CompiledObserver;
use crate::pointcloud::{crop_around_point, save_pointcloud, PointCloud, PointFormat, VoxelGrid};
use crate::training::metrics::Metrics;
use crate::training::{init_observer, sweep_observer, train_observer, ThresholdCriterion, TrainConfig};

pub const LABEL_GROUND: u8 = 0;
pub const LABEL_TOWER: u8 = 1;
pub const LABEL_POWER_LINE: u8 = 2;
pub const LABEL_VEGETATION: u8 = 3;
pub const CLASS_NAMES: [&str; 4] = ["ground", "tower", "power_line", "vegetation"];

const NOISE_STREAM: u64 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Scene size along x and y, meters.
    pub extent: [f64; 2],
    /// Peak height of the ground undulation, meters.
    pub ground_roughness: f64,
    /// Ground points per square meter.
    pub ground_density: f64,
    pub tower_count: usize,
    /// Tower height range, meters.
    pub tower_height: [f64; 2],
    /// Largest horizontal distance of any tower point from the tower axis.
    pub tower_radius: f64,
    /// Distance between consecutive points along a lattice member, meters.
    pub lattice_spacing: f64,
    /// Vertical distance between horizontal lattice rings, meters.
    pub ring_spacing: f64,
    /// Mid-span drop of each wire, meters.
    pub line_sag: f64,
    /// Wire attachment height as a fraction of tower height.
    pub line_attach_fraction: f64,
    pub line_spacing: f64,
    pub vegetation_count: usize,
    pub vegetation_radius: [f64; 2],
    /// Vegetation points per cubic meter.
    pub vegetation_density: f64,
    /// When set, the number of tower points is chosen so that towers make up
    /// this fraction of the scene.
    pub tower_fraction: Option<f64>,
    /// Label-noise dilation radius around tower points, meters.
    pub noise_radius: f64,
    /// Fraction of eligible points relabeled as tower.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: [80.0, 80.0],
            ground_roughness: 0.5,
            ground_density: 4.0,
            tower_count: 1,
            tower_height: [20.0, 35.0],
            tower_radius: 1.5,
            lattice_spacing: 0.15,
            ring_spacing: 2.0,
            line_sag: 3.0,
            line_attach_fraction: 0.85,
            line_spacing: 0.25,
            vegetation_count: 10,
            vegetation_radius: [1.5, 4.0],
            vegetation_density: 3.0,
            tower_fraction: None,
            noise_radius: 2.0,
            noise_rate: 0.0,
            seed: 0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be > 0, got {v}")))
    }
}

fn nonneg(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be >= 0, got {v}")))
    }
}

fn range(name: &str, r: [f64; 2]) -> Result<()> {
    positive(name, r[0])?;
    if !(r[1].is_finite() && r[1] >= r[0]) {
        return Err(Error::config(format!("{name} range [{}, {}] is empty", r[0], r[1])));
    }
    Ok(())
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) || !self.extent.iter().all(|e| e.is_finite()) {
            return Err(Error::config(format!(
                "scene extent {:?} has zero area",
                self.extent
            )));
        }
        nonneg("ground_roughness", self.ground_roughness)?;
        positive("ground_density", self.ground_density)?;
        range("tower_height", self.tower_height)?;
        positive("tower_radius", self.tower_radius)?;
        positive("lattice_spacing", self.lattice_spacing)?;
        positive("ring_spacing", self.ring_spacing)?;
        nonneg("line_sag", self.line_sag)?;
        if !(self.line_attach_fraction > 0.0 && self.line_attach_fraction <= 1.0) {
            return Err(Error::config("line_attach_fraction must lie in (0, 1]"));
        }
        positive("line_spacing", self.line_spacing)?;
        range("vegetation_radius", self.vegetation_radius)?;
        nonneg("vegetation_density", self.vegetation_density)?;
        if let Some(f) = self.tower_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::config(format!("tower_fraction must lie in [0, 1), got {f}")));
            }
        }
        nonneg("noise_radius", self.noise_radius)?;
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::config(format!("noise_rate must lie in [0, 1], got {}", self.noise_rate)));
        }
        Ok(())
    }

    /// Apply one `key = value` setting; pairs are written `a,b`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let num = |v: &str| -> Result<f64> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
        };
        let count = |v: &str| -> Result<usize> {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad count `{v}` for `{key}`")))
        };
        let pair = |v: &str| -> Result<[f64; 2]> {
            match v.split(',').collect::<Vec<_>>().as_slice() {
                [a, b] => Ok([num(a)?, num(b)?]),
                [a] => {
                    let x = num(a)?;
                    Ok([x, x])
                }
                _ => Err(Error::config(format!("`{key}` expects `a,b`, got `{v}`"))),
            }
        };
        match key.as_str() {
            "extent" => self.extent = pair(value)?,
            "ground_roughness" => self.ground_roughness = num(value)?,
            "ground_density" => self.ground_density = num(value)?,
            "towers" | "tower_count" => self.tower_count = count(value)?,
            "tower_height" => self.tower_height = pair(value)?,
            "tower_radius" => self.tower_radius = num(value)?,
            "lattice_spacing" => self.lattice_spacing = num(value)?,
            "ring_spacing" => self.ring_spacing = num(value)?,
            "line_sag" => self.line_sag = num(value)?,
            "line_attach_fraction" => self.line_attach_fraction = num(value)?,
            "line_spacing" => self.line_spacing = num(value)?,
            "vegetation_count" => self.vegetation_count = count(value)?,
            "vegetation_radius" => self.vegetation_radius = pair(value)?,
            "vegetation_density" => self.vegetation_density = num(value)?,
            "tower_fraction" => {
                self.tower_fraction = match value.trim() {
                    "none" | "" => None,
                    v => Some(num(v)?),
                }
            }
            "noise_radius" => self.noise_radius = num(value)?,
            "noise_rate" => self.noise_rate = num(value)?,
            "seed" => {
                self.seed = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad seed `{value}`")))?
            }
            _ => return Err(Error::config(format!("unknown scene config key `{key}`"))),
        }
        Ok(())
    }

    /// Hex SHA-256 of the configuration without its seed, so every scene of a
    /// dataset shares it.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Placement of one generated tower.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TowerInfo {
    pub center: [f64; 2],
    pub base_z: f64,
    pub height: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScene {
    pub cloud: PointCloud,
    pub towers: Vec<TowerInfo>,
}

struct Ground {
    amp: f64,
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Ground {
    fn new(rng: &mut ChaCha8Rng, amp: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                let len = rng.gen_range(10.0..40.0);
                let dir = rng.gen_range(0.0..std::f64::consts::TAU);
                (
                    dir.cos() / len,
                    dir.sin() / len,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.3..1.0),
                )
            })
            .collect();
        Self { amp, waves }
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.3).sum();
        let s: f64 = self
            .waves
            .iter()
            .map(|&(kx, ky, ph, a)| a * (std::f64::consts::TAU * (kx * x + ky * y) + ph).sin())
            .sum();
        self.amp * s / total
    }
}

type Segment = ([f64; 3], [f64; 3]);

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn seg_len(s: &Segment) -> f64 {
    (0..3).map(|a| (s.1[a] - s.0[a]).powi(2)).sum::<f64>().sqrt()
}

/// Members of a four-legged lattice tower tapering to half its base width.
fn tower_segments(t: &TowerInfo, ring_spacing: f64, attach_fraction: f64) -> Vec<Segment> {
    let rho = |z: f64| 0.95 * t.radius * (1.0 - 0.5 * z / t.height);
    let corners = |z: f64| -> [[f64; 3]; 4] {
        let r = rho(z) / std::f64::consts::SQRT_2;
        let zz = t.base_z + z;
        let (cx, cy) = (t.center[0], t.center[1]);
        [
            [cx + r, cy + r, zz],
            [cx - r, cy + r, zz],
            [cx - r, cy - r, zz],
            [cx + r, cy - r, zz],
        ]
    };
    let n_rings = (t.height / ring_spacing).ceil().max(1.0) as usize;
    let levels: Vec<f64> = (0..=n_rings)
        .map(|i| (i as f64 * ring_spacing).min(t.height))
        .collect();
    let mut segs = Vec::new();
    for (i, &z) in levels.iter().enumerate() {
        let c = corners(z);
        for k in 0..4 {
            segs.push((c[k], c[(k + 1) % 4]));
        }
        if i + 1 < levels.len() {
            let up = corners(levels[i + 1]);
            for k in 0..4 {
                segs.push((c[k], up[k]));
                segs.push((c[k], up[(k + 1) % 4]));
                segs.push((c[(k + 1) % 4], up[k]));
            }
        }
    }
    let za = attach_fraction * t.height;
    let r = rho(za);
    segs.push((
        [t.center[0], t.center[1] - r, t.base_z + za],
        [t.center[0], t.center[1] + r, t.base_z + za],
    ));
    segs
}

fn clamp_to_radius(p: &mut [f64; 3], t: &TowerInfo) {
    let dx = p[0] - t.center[0];
    let dy = p[1] - t.center[1];
    let d = (dx * dx + dy * dy).sqrt();
    if d > t.radius {
        let s = t.radius / d;
        p[0] = t.center[0] + dx * s;
        p[1] = t.center[1] + dy * s;
    }
    p[2] = p[2].clamp(t.base_z, t.base_z + t.height);
}

fn to_f32(p: [f64; 3]) -> [f32; 3] {
    [p[0] as f32, p[1] as f32, p[2] as f32]
}

/// Generate one labeled scene. Deterministic in `config` (seed included).
pub fn generate_scene(config: &SceneConfig) -> Result<GeneratedScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let [ex, ey] = config.extent;
    let ground = Ground::new(&mut rng, config.ground_roughness);
    let mut cloud = PointCloud::default();

    // towers along x, wires running the full extent
    let n = config.tower_count;
    let towers: Vec<TowerInfo> = (0..n)
        .map(|i| {
            let x = -ex / 2.0 + (i as f64 + 0.5) * ex / n as f64 + rng.gen_range(-2.0..=2.0);
            let y = rng.gen_range(-2.0..=2.0);
            TowerInfo {
                center: [x, y],
                base_z: ground.height(x, y),
                height: rng.gen_range(config.tower_height[0]..=config.tower_height[1]),
                radius: config.tower_radius,
            }
        })
        .collect();

    let ground_n = (config.ground_density * ex * ey).round() as usize;
    for _ in 0..ground_n {
        let x = rng.gen_range(-ex / 2.0..ex / 2.0);
        let y = rng.gen_range(-ey / 2.0..ey / 2.0);
        let z = ground.height(x, y) + rng.gen_range(-0.05..0.05);
        cloud.push(to_f32([x, y, z]), LABEL_GROUND);
    }

    if !towers.is_empty() {
        for side in [-1.0, 1.0] {
            let mut anchors: Vec<[f64; 3]> = towers
                .iter()
                .map(|t| {
                    let za = config.line_attach_fraction * t.height;
                    let r = 0.95 * t.radius * (1.0 - 0.5 * config.line_attach_fraction);
                    [t.center[0], t.center[1] + side * r, t.base_z + za]
                })
                .collect();
            let first = anchors[0];
            let last = *anchors.last().unwrap();
            anchors.insert(0, [-ex / 2.0, first[1], first[2]]);
            anchors.push([ex / 2.0, last[1], last[2]]);
            for w in anchors.windows(2) {
                let (a, b) = (w[0], w[1]);
                let span = seg_len(&(a, b));
                let steps = (span / config.line_spacing).ceil().max(1.0) as usize;
                for s in 0..steps {
                    let u = (s as f64 + rng.gen_range(0.0..1.0)) / steps as f64;
                    let mut p = lerp(a, b, u);
                    p[2] -= 4.0 * config.line_sag * u * (1.0 - u);
                    cloud.push(to_f32(p), LABEL_POWER_LINE);
                }
            }
        }
    }

    for _ in 0..config.vegetation_count {
        let radius = rng.gen_range(config.vegetation_radius[0]..=config.vegetation_radius[1]);
        let mut center = [0.0; 2];
        for _ in 0..20 {
            center = [
                rng.gen_range(-ex / 2.0..ex / 2.0),
                rng.gen_range(-ey / 2.0..ey / 2.0),
            ];
            let clear = towers.iter().all(|t| {
                let d = ((center[0] - t.center[0]).powi(2) + (center[1] - t.center[1]).powi(2)).sqrt();
                d > radius + t.radius + 1.0
            });
            if clear {
                break;
            }
        }
        let cz = ground.height(center[0], center[1]) + radius * rng.gen_range(0.6..1.4);
        let volume = 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3);
        let count = (config.vegetation_density * volume).round() as usize;
        for _ in 0..count {
            let p = loop {
                let v = [
                    rng.gen_range(-1.0..=1.0),
                    rng.gen_range(-1.0..=1.0),
                    rng.gen_range(-1.0..=1.0),
                ];
                if v.iter().map(|x: &f64| x * x).sum::<f64>() <= 1.0 {
                    break v;
                }
            };
            cloud.push(
                to_f32([center[0] + radius * p[0], center[1] + radius * p[1], cz + radius * p[2]]),
                LABEL_VEGETATION,
            );
        }
    }

    let other = cloud.len();
    let per_tower: Vec<Vec<Segment>> = towers
        .iter()
        .map(|t| tower_segments(t, config.ring_spacing, config.line_attach_fraction))
        .collect();
    match config.tower_fraction {
        None => {
            for (t, segs) in towers.iter().zip(&per_tower) {
                for s in segs {
                    let steps = (seg_len(s) / config.lattice_spacing).ceil().max(1.0) as usize;
                    for k in 0..steps {
                        let mut p = lerp(s.0, s.1, (k as f64 + 0.5) / steps as f64);
                        for c in &mut p {
                            *c += rng.gen_range(-0.02..=0.02);
                        }
                        clamp_to_radius(&mut p, t);
                        cloud.push(to_f32(p), LABEL_TOWER);
                    }
                }
            }
        }
        Some(f) if !towers.is_empty() => {
            let want = (f * other as f64 / (1.0 - f)).round() as usize;
            let all: Vec<(usize, &Segment)> = per_tower
                .iter()
                .enumerate()
                .flat_map(|(i, segs)| segs.iter().map(move |s| (i, s)))
                .collect();
            let mut cum = Vec::with_capacity(all.len());
            let mut acc = 0.0;
            for (_, s) in &all {
                acc += seg_len(s);
                cum.push(acc);
            }
            for _ in 0..want {
                let u = rng.gen_range(0.0..acc);
                let j = cum.partition_point(|&c| c <= u).min(all.len() - 1);
                let (ti, s) = all[j];
                let mut p = lerp(s.0, s.1, rng.gen_range(0.0..=1.0));
                clamp_to_radius(&mut p, &towers[ti]);
                cloud.push(to_f32(p), LABEL_TOWER);
            }
        }
        Some(_) => {}
    }
    Ok(GeneratedScene { cloud, towers })
}

/// Relabel as tower exactly `round(rate · eligible)` of the non-tower points
/// lying within `radius` (3D) of some tower point, chosen by `seed`.
pub fn inject_label_noise(cloud: &PointCloud, radius: f64, rate: f64, seed: u64) -> Result<PointCloud> {
    nonneg("noise radius", radius)?;
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config(format!("noise rate must lie in [0, 1], got {rate}")));
    }
    let eligible = points_near_towers(cloud, radius);
    let k = (rate * eligible.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM);
    let mut out = cloud.clone();
    for &i in eligible.choose_multiple(&mut rng, k) {
        out.labels[i] = LABEL_TOWER;
    }
    Ok(out)
}

/// Indices of non-tower points within `radius` of any tower point, ascending.
pub fn points_near_towers(cloud: &PointCloud, radius: f64) -> Vec<usize> {
    let cell = radius.max(1e-6);
    let key = |p: &[f32; 3]| -> [i64; 3] {
        [0, 1, 2].map(|a| (f64::from(p[a]) / cell).floor() as i64)
    };
    let mut buckets: HashMap<[i64; 3], Vec<[f64; 3]>> = HashMap::new();
    for (p, &l) in cloud.points.iter().zip(&cloud.labels) {
        if l == LABEL_TOWER {
            buckets
                .entry(key(p))
                .or_default()
                .push(p.map(f64::from));
        }
    }
    if buckets.is_empty() {
        return Vec::new();
    }
    let r2 = radius * radius;
    (0..cloud.len())
        .into_par_iter()
        .filter(|&i| {
            if cloud.labels[i] == LABEL_TOWER {
                return false;
            }
            let p = cloud.points[i].map(f64::from);
            let k = key(&cloud.points[i]);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if let Some(b) = buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            if b.iter().any(|q| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>() <= r2) {
                                return true;
                            }
                        }
                    }
                }
            }
            false
        })
        .collect()
}

/// Generate `n_scenes` scenes (seed `config.seed + i`), each cropped to a disc
/// around its first tower with radius equal to that tower's height. When the
/// config asks for label noise it is applied to the train and validation
/// splits only; test labels stay clean.
pub fn generate_dataset(
    config: &SceneConfig,
    n_scenes: usize,
    fractions: (f64, f64, f64),
) -> Result<Dataset> {
    config.validate()?;
    let (n_train, n_val, _) = split_sizes(n_scenes, fractions)?;
    let scenes = (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let seed = config.seed.wrapping_add(i as u64);
            let cfg = SceneConfig {
                seed,
                ..config.clone()
            };
            let g = generate_scene(&cfg)?;
            let (cloud, radius, height) = match g.towers.first() {
                Some(t) => (
                    crop_around_point(&g.cloud, [t.center[0], t.center[1], t.base_z], t.height),
                    Some(t.radius),
                    Some(t.height),
                ),
                None => (g.cloud, None, None),
            };
            let noisy = i < n_train + n_val && config.noise_rate > 0.0;
            let cloud = if noisy {
                inject_label_noise(&cloud, config.noise_radius, config.noise_rate, seed)?
            } else {
                cloud
            };
            Ok(Scene {
                name: format!("scene_{i:04}"),
                seed,
                cloud,
                tower_radius_m: radius,
                tower_height_m: height,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset {
        target_label: LABEL_TOWER,
        ..Dataset::default()
    };
    for (i, s) in scenes.into_iter().enumerate() {
        if i < n_train {
            ds.train.push(s);
        } else if i < n_train + n_val {
            ds.val.push(s);
        } else {
            ds.test.push(s);
        }
    }
    Ok(ds)
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write a generated dataset under `out_dir` (`scenes/*.gpc` plus
/// `manifest.json`) and return the manifest.
pub fn write_dataset(config: &SceneConfig, ds: &Dataset, out_dir: &Path) -> Result<Manifest> {
    let scene_dir = out_dir.join("scenes");
    fs::create_dir_all(&scene_dir)
        .map_err(|e| Error::io(format!("creating {}", scene_dir.display()), e))?;
    let hash = config.hash();
    let mut entries = Vec::with_capacity(ds.len());
    for (split, scene) in ds.scenes() {
        let rel = format!("scenes/{}.gpc", scene.name);
        save_pointcloud(&scene.cloud, &out_dir.join(&rel), PointFormat::Binary)?;
        entries.push(ManifestEntry {
            path: rel,
            split,
            seed: scene.seed,
            config_hash: hash.clone(),
            tower_radius_m: scene.tower_radius_m,
            tower_height_m: scene.tower_height_m,
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        target_label: ds.target_label,
        base_seed: config.seed,
        config_hash: hash,
        scene_config: serde_json::to_value(config).expect("config serializes"),
        scenes: entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

pub fn build_dataset(
    config: &SceneConfig,
    n_scenes: usize,
    fractions: (f64, f64, f64),
    out_dir: &Path,
) -> Result<(Manifest, Dataset)> {
    let ds = generate_dataset(config, n_scenes, fractions)?;
    let m = write_dataset(config, &ds, out_dir)?;
    Ok((m, ds))
}

/// Point counts per class over every scene.
pub fn class_counts(ds: &Dataset) -> [usize; 4] {
    let mut c = [0; 4];
    for (_, s) in ds.scenes() {
        for &l in &s.cloud.labels {
            if let Some(slot) = c.get_mut(l as usize) {
                *slot += 1;
            }
        }
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemplateConfig {
    /// Shell radius in voxels.
    pub radius: f64,
    pub shape: Shape3,
}

/// Binary vertical cylinder shell (cells with `|d − r| ≤ 0.5` from the
/// axis), shifted to zero mean and scaled to unit L2 norm.
pub fn template_kernel(t: &TemplateConfig) -> Result<Grid3<f64>> {
    if !(t.radius.is_finite() && t.radius > 0.0) {
        return Err(Error::out_of_range("template radius", t.radius, "must be > 0"));
    }
    let c = stencil_center(t.shape);
    let shell = Grid3::from_fn(t.shape, |[_, y, x]| {
        let d = ((x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2)).sqrt();
        if (d - t.radius).abs() <= 0.5 {
            1.0
        } else {
            0.0
        }
    });
    let mean = shell.sum() / shell.len() as f64;
    let centered = shell.map(|v| v - mean);
    let norm = centered.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return Err(Error::DegenerateKernel { kind: "template" });
    }
    Ok(centered.map(|v| v / norm))
}

/// Correlation score of the normalized template at every voxel.
pub fn template_match(grid: &VoxelGrid, t: &TemplateConfig) -> Result<ResponseGrid> {
    correlate(&grid.values, &template_kernel(t)?)
}

/// Mean tower radius of `scenes` in voxels, using the mean horizontal voxel
/// size of each scene's grid.
pub fn average_tower_radius_voxels(scenes: &[Scene], shape: Shape3, target: u8) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in scenes {
        if let Some(r) = s.tower_radius_m {
            let v = s.voxelize(shape, target)?;
            let size = 0.5 * (v.grid.voxel_size[1] + v.grid.voxel_size[2]);
            total += r / size;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyDataset("scenes with tower metadata"));
    }
    Ok(total / n as f64)
}

/// Area under the precision-recall curve: thresholds at every distinct
/// score, descending; each recall increment weighted by the precision there.
/// No positives gives 0.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    if n_pos == 0 {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

/// AP of per-voxel scores pooled over the occupied voxels of `samples`.
pub fn pooled_average_precision(
    samples: &[VoxelSample],
    score: impl Fn(&VoxelSample) -> Result<ResponseGrid> + Sync,
) -> Result<f64> {
    let parts = samples
        .par_iter()
        .map(|s| {
            let g = score(s)?;
            g.ensure_shape(s.grid.shape())?;
            Ok(g.as_slice()
                .iter()
                .zip(s.labels.as_slice())
                .zip(s.grid.values.as_slice())
                .filter(|(_, &o)| o != 0.0)
                .map(|((&v, &l), _)| (v, l))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let (scores, labels): (Vec<f64>, Vec<u8>) = parts.into_iter().flatten().unzip();
    average_precision(&scores, &labels)
}

pub fn model_average_precision(compiled: &CompiledObserver, samples: &[VoxelSample]) -> Result<f64> {
    pooled_average_precision(samples, |s| compiled.forward(&s.grid))
}

pub fn template_average_precision(t: &TemplateConfig, samples: &[VoxelSample]) -> Result<f64> {
    let kernel = template_kernel(t)?;
    pooled_average_precision(samples, |s| correlate(&s.grid.values, &kernel))
}

/// Operator multisets `(cylinders, arrows, negative spheres)` in table order.
pub const ABLATION_ROWS: [(char, [usize; 3]); 7] = [
    ('A', [1, 0, 0]),
    ('B', [0, 1, 0]),
    ('C', [1, 0, 1]),
    ('D', [0, 1, 1]),
    ('E', [1, 1, 1]),
    ('F', [2, 2, 2]),
    ('G', [3, 3, 3]),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: char,
    pub counts: [usize; 3],
    /// Validation counts at the IoU-optimal threshold.
    pub metrics: Metrics,
    pub tau: f64,
    pub best_epoch: Option<usize>,
}

/// Train one observer per row with the same seed, splits and protocol.
pub fn run_ablation(ds: &Dataset, config: &TrainConfig, seed: u64) -> Result<Vec<AblationRow>> {
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::EmptyDataset("ablation train/validation"));
    }
    let train = voxel_samples(&ds.train, config.grid_shape, ds.target_label)?;
    let val = voxel_samples(&ds.val, config.grid_shape, ds.target_label)?;
    ABLATION_ROWS
        .iter()
        .map(|&(name, counts)| {
            let init = init_observer(seed, counts, config.kernel_shape)?;
            let run = train_observer(init, &train, &val, config, seed)?;
            let sweep = sweep_observer(&run.best.compile()?, &val)?;
            let (tau, metrics) = sweep.best(ThresholdCriterion::Iou);
            Ok(AblationRow {
                name,
                counts,
                metrics,
                tau,
                best_epoch: run.best_epoch,
            })
        })
        .collect()
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("model  cylinder  arrow  negsphere  precision  recall    iou    tau\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<5}  {:>8}  {:>5}  {:>9}  {:>9.4}  {:>6.4}  {:>6.4}  {:>5.2}",
            r.name,
            r.counts[0],
            r.counts[1],
            r.counts[2],
            r.metrics.precision(),
            r.metrics.recall(),
            r.metrics.iou(),
            r.tau
        );
    }
    s
}
