//! Labeled point clouds: file formats, cropping, voxelization and the
//! occupancy measurement used as model input.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::{check_shape, Grid3, Shape3};

/// Magic prefix of the binary point format.
pub const BINARY_MAGIC: &[u8; 4] = b"GPC1";
const BINARY_RECORD: usize = 13;

/// PLY vertex colors for the four confusion outcomes.
pub const COLOR_TP: [u8; 3] = [0, 200, 0];
pub const COLOR_FP: [u8; 3] = [220, 0, 0];
pub const COLOR_FN: [u8; 3] = [240, 160, 0];
pub const COLOR_TN: [u8; 3] = [150, 150, 150];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    /// `(x, y, z)` in meters, `z` up.
    pub points: Vec<[f32; 3]>,
    pub labels: Vec<u8>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>, labels: Vec<u8>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: points.len(),
                actual: labels.len(),
            });
        }
        if let Some(index) = points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, point: [f32; 3], label: u8) {
        self.points.push(point);
        self.labels.push(label);
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
        self.labels.extend_from_slice(&other.labels);
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Bytes of the binary encoding; used for hashing and saving.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.len() * BINARY_RECORD);
        out.extend_from_slice(BINARY_MAGIC);
        for (p, &l) in self.points.iter().zip(&self.labels) {
            for c in p {
                out.extend_from_slice(&c.to_le_bytes());
            }
            out.push(l);
        }
        out
    }

    pub fn from_binary(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |offset: usize, msg: &str| Error::MalformedBinary {
            path: path.to_path_buf(),
            offset,
            msg: msg.to_string(),
        };
        if bytes.len() < 4 || &bytes[..4] != BINARY_MAGIC {
            return Err(bad(0, "missing GPC1 magic"));
        }
        let body = &bytes[4..];
        if body.len() % BINARY_RECORD != 0 {
            let offset = 4 + body.len() / BINARY_RECORD * BINARY_RECORD;
            return Err(bad(offset, "truncated record"));
        }
        let n = body.len() / BINARY_RECORD;
        let mut points = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for (i, rec) in body.chunks_exact(BINARY_RECORD).enumerate() {
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
            let p = [f(0), f(1), f(2)];
            if p.iter().any(|c| !c.is_finite()) {
                return Err(bad(4 + i * BINARY_RECORD, "non-finite coordinate"));
            }
            points.push(p);
            labels.push(rec[12]);
        }
        Ok(Self { points, labels })
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut cloud = PointCloud::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::MalformedText {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", fields.len())));
            }
            let mut p = [0f32; 3];
            for (c, tok) in p.iter_mut().zip(&fields[..3]) {
                *c = tok
                    .parse::<f32>()
                    .map_err(|e| bad(format!("bad coordinate `{tok}`: {e}")))?;
                if !c.is_finite() {
                    return Err(bad(format!("non-finite coordinate `{tok}`")));
                }
            }
            let label = fields[3]
                .parse::<u8>()
                .map_err(|e| bad(format!("bad label `{}`: {e}", fields[3])))?;
            cloud.push(p, label);
        }
        Ok(cloud)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.len() * 40);
        for (p, l) in self.points.iter().zip(&self.labels) {
            s.push_str(&format!("{:.6} {:.6} {:.6} {}\n", p[0], p[1], p[2], l));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointFormat {
    Text,
    Binary,
}

impl FromStr for PointFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(PointFormat::Text),
            "binary" | "bin" | "gpc" => Ok(PointFormat::Binary),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

impl PointFormat {
    /// Guess from the file extension: `.gpc`/`.bin` are binary, anything else text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("gpc") | Some("bin") => PointFormat::Binary,
            _ => PointFormat::Text,
        }
    }
}

pub fn load_pointcloud(path: &Path, format: PointFormat) -> Result<PointCloud> {
    let ctx = || format!("reading {}", path.display());
    match format {
        PointFormat::Text => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(ctx(), e))?;
            PointCloud::from_text(&text, path)
        }
        PointFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(ctx(), e))?;
            PointCloud::from_binary(&bytes, path)
        }
    }
}

pub fn save_pointcloud(cloud: &PointCloud, path: &Path, format: PointFormat) -> Result<()> {
    let bytes = match format {
        PointFormat::Text => cloud.to_text().into_bytes(),
        PointFormat::Binary => cloud.to_binary(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Points whose horizontal distance to `center` is at most `radius`.
pub fn crop_around_point(cloud: &PointCloud, center: [f64; 3], radius: f64) -> PointCloud {
    let r2 = radius * radius;
    let mut out = PointCloud::default();
    for (p, &l) in cloud.points.iter().zip(&cloud.labels) {
        let dx = p[0] as f64 - center[0];
        let dy = p[1] as f64 - center[1];
        if dx * dx + dy * dy <= r2 {
            out.push(*p, l);
        }
    }
    out
}

/// Regular grid geometry plus a dense scalar field. All per-axis arrays are
/// in grid axis order `(z, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub values: Grid3<f64>,
}

impl VoxelGrid {
    /// Grid with unit voxels at the origin; handy for synthetic tests.
    pub fn from_values(values: Grid3<f64>) -> Self {
        Self {
            origin: [0.0; 3],
            voxel_size: [1.0; 3],
            values,
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.values.shape()
    }

    pub fn occupied_count(&self) -> usize {
        self.values.as_slice().iter().filter(|&&v| v != 0.0).count()
    }

    /// World-space center of voxel `[z, y, x]`, returned as `(x, y, z)`.
    pub fn voxel_center(&self, [z, y, x]: [usize; 3]) -> [f64; 3] {
        let c = |axis: usize, i: usize| self.origin[axis] + (i as f64 + 0.5) * self.voxel_size[axis];
        [c(2, x), c(1, y), c(0, z)]
    }
}

/// Ground-truth voxel classes paired with a [`VoxelGrid`].
pub type VoxelLabelGrid = Grid3<u8>;

/// Which voxel each point fell into, and the inverse association.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelPointMap {
    shape: Shape3,
    point_voxel: Vec<usize>,
    voxel_points: BTreeMap<usize, Vec<usize>>,
}

impl VoxelPointMap {
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    /// Flat voxel index of point `i`.
    pub fn voxel_of(&self, point: usize) -> usize {
        self.point_voxel[point]
    }

    pub fn points_in(&self, voxel: usize) -> &[usize] {
        self.voxel_points.get(&voxel).map_or(&[], Vec::as_slice)
    }

    pub fn occupied_voxels(&self) -> impl Iterator<Item = usize> + '_ {
        self.voxel_points.keys().copied()
    }

    pub fn point_count(&self) -> usize {
        self.point_voxel.len()
    }
}

/// Voxelization output.
#[derive(Clone, Debug)]
pub struct Voxelized {
    pub grid: VoxelGrid,
    pub labels: VoxelLabelGrid,
    pub map: VoxelPointMap,
}

fn axis_geometry(lo: f64, hi: f64, n: usize, fallback: f64) -> (f64, f64) {
    let extent = hi - lo;
    let size = if extent > 0.0 && n > 1 {
        extent / (n - 1) as f64
    } else if extent > 0.0 {
        extent * (1.0 + 1e-9)
    } else {
        fallback
    };
    let center = 0.5 * (lo + hi);
    (center - 0.5 * n as f64 * size, size)
}

/// Occupancy measurement of `cloud` on a grid of `shape` spanning its bounding
/// box (expanded by half a voxel per side). A voxel is labeled 1 when it holds
/// any point carrying `target_label`.
pub fn voxelize(cloud: &PointCloud, shape: Shape3, target_label: u8) -> Result<Voxelized> {
    check_shape(shape)?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    // axis 0 is z (point component 2), axis 2 is x (component 0)
    let component = [2usize, 1, 0];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.points {
        for a in 0..3 {
            let v = p[component[a]] as f64;
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    let proper: Vec<f64> = (0..3)
        .filter(|&a| hi[a] > lo[a] && shape[a] > 1)
        .map(|a| (hi[a] - lo[a]) / (shape[a] - 1) as f64)
        .collect();
    let fallback = if proper.is_empty() {
        1.0
    } else {
        proper.iter().sum::<f64>() / proper.len() as f64
    };
    let mut origin = [0.0; 3];
    let mut voxel_size = [0.0; 3];
    for a in 0..3 {
        (origin[a], voxel_size[a]) = axis_geometry(lo[a], hi[a], shape[a], fallback);
    }

    let mut values = Grid3::<f64>::zeros(shape);
    let mut labels = Grid3::<u8>::zeros(shape);
    let mut point_voxel = Vec::with_capacity(cloud.len());
    let mut voxel_points: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (p, &l)) in cloud.points.iter().zip(&cloud.labels).enumerate() {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let t = ((p[component[a]] as f64 - origin[a]) / voxel_size[a]).floor();
            idx[a] = (t.max(0.0) as usize).min(shape[a] - 1);
        }
        let flat = values.index(idx);
        values.as_mut_slice()[flat] = 1.0;
        if l == target_label {
            labels.as_mut_slice()[flat] = 1;
        }
        point_voxel.push(flat);
        voxel_points.entry(flat).or_default().push(i);
    }
    Ok(Voxelized {
        grid: VoxelGrid {
            origin,
            voxel_size,
            values,
        },
        labels,
        map: VoxelPointMap {
            shape,
            point_voxel,
            voxel_points,
        },
    })
}

/// Per-point predictions: each point inherits its voxel's mask value.
pub fn devoxelize(mask: &Grid3<u8>, map: &VoxelPointMap, cloud: &PointCloud) -> Result<Vec<u8>> {
    mask.ensure_shape(map.shape)?;
    if cloud.len() != map.point_count() {
        return Err(Error::LengthMismatch {
            expected: map.point_count(),
            actual: cloud.len(),
        });
    }
    let m = mask.as_slice();
    Ok(map.point_voxel.iter().map(|&v| m[v]).collect())
}

pub fn outcome_color(pred: bool, truth: bool) -> [u8; 3] {
    match (pred, truth) {
        (true, true) => COLOR_TP,
        (true, false) => COLOR_FP,
        (false, true) => COLOR_FN,
        (false, false) => COLOR_TN,
    }
}

/// ASCII PLY with one vertex per point, colored by confusion outcome.
pub fn save_colored_cloud(
    cloud: &PointCloud,
    predictions: &[u8],
    truth: &[u8],
    path: &Path,
) -> Result<()> {
    for len in [predictions.len(), truth.len()] {
        if len != cloud.len() {
            return Err(Error::LengthMismatch {
                expected: cloud.len(),
                actual: len,
            });
        }
    }
    let ctx = || format!("writing {}", path.display());
    let file = fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", cloud.len())?;
        for axis in ["x", "y", "z"] {
            writeln!(w, "property float {axis}")?;
        }
        for ch in ["red", "green", "blue"] {
            writeln!(w, "property uchar {ch}")?;
        }
        writeln!(w, "end_header")?;
        for ((p, &pr), &t) in cloud.points.iter().zip(predictions).zip(truth) {
            let [r, g, b] = outcome_color(pr != 0, t != 0);
            writeln!(w, "{:.6} {:.6} {:.6} {r} {g} {b}", p[0], p[1], p[2])?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(ctx(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f32, y: f32, z: f32) -> [f32; 3] {
        [x, y, z]
    }

    #[test]
    fn parses_text_records() {
        let c = PointCloud::from_text("0 0 0 1\n1 2 3 0", Path::new("t")).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.labels, vec![1, 0]);
        assert_eq!(c.points[1], p(1.0, 2.0, 3.0));
    }

    #[test]
    fn empty_text_is_empty_cloud() {
        let c = PointCloud::from_text("", Path::new("t")).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn text_comments_skipped() {
        let c = PointCloud::from_text("# header\n1 1 1 0\n\n# x\n", Path::new("t")).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn malformed_text_reports_line() {
        let err = PointCloud::from_text("0 0 0 1\n1 2 oops 0\n", Path::new("t")).unwrap_err();
        match err {
            Error::MalformedText { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        assert!(PointCloud::from_text("1 2 3\n", Path::new("t")).is_err());
        assert!(PointCloud::from_text("nan 0 0 1\n", Path::new("t")).is_err());
    }

    #[test]
    fn binary_truncation_reports_offset() {
        let mut bytes = PointCloud::new(vec![p(1., 2., 3.)], vec![4]).unwrap().to_binary();
        bytes.push(0);
        match PointCloud::from_binary(&bytes, Path::new("b")).unwrap_err() {
            Error::MalformedBinary { offset, .. } => assert_eq!(offset, 17),
            other => panic!("unexpected {other}"),
        }
        assert!(PointCloud::from_binary(b"XXXX", Path::new("b")).is_err());
    }

    #[test]
    fn unknown_format_tag() {
        assert!(matches!(
            "las".parse::<PointFormat>(),
            Err(Error::UnknownFormat(_))
        ));
    }

    #[test]
    fn crop_boundary() {
        let cloud = PointCloud::new(
            vec![p(0., 0., 5.), p(1.0, 0., 0.), p(1.0001, 0., 0.)],
            vec![0, 0, 0],
        )
        .unwrap();
        let c = crop_around_point(&cloud, [0.0, 0.0, 0.0], 1.0);
        assert_eq!(c.points, vec![p(0., 0., 5.), p(1.0, 0., 0.)]);
    }

    #[test]
    fn single_point_single_voxel() {
        let cloud = PointCloud::new(vec![p(3., 4., 5.)], vec![0]).unwrap();
        let v = voxelize(&cloud, [4, 4, 4], 1).unwrap();
        assert_eq!(v.grid.occupied_count(), 1);
        assert_eq!(v.grid.values.len() - v.grid.occupied_count(), 63);
    }

    #[test]
    fn any_point_tower_rule() {
        let cloud =
            PointCloud::new(vec![p(0., 0., 0.), p(0.01, 0., 0.), p(10., 10., 10.)], vec![0, 1, 0])
                .unwrap();
        let v = voxelize(&cloud, [2, 2, 2], 1).unwrap();
        let a = v.map.voxel_of(0);
        assert_eq!(a, v.map.voxel_of(1));
        assert_eq!(v.labels.as_slice()[a], 1);
        assert_eq!(v.labels.as_slice().iter().map(|&l| l as usize).sum::<usize>(), 1);
    }

    #[test]
    fn planar_cloud_is_not_an_error() {
        let cloud = PointCloud::new(vec![p(0., 0., 1.), p(5., 5., 1.)], vec![0, 0]).unwrap();
        let v = voxelize(&cloud, [8, 8, 8], 1).unwrap();
        assert_eq!(v.grid.occupied_count(), 2);
        assert!(v.grid.voxel_size[0] > 0.0);
    }

    #[test]
    fn empty_cloud_rejected() {
        assert!(matches!(
            voxelize(&PointCloud::default(), [4, 4, 4], 1),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn extreme_points_land_in_edge_voxels() {
        let cloud = PointCloud::new(vec![p(0., 0., 0.), p(7., 7., 7.)], vec![0, 0]).unwrap();
        let v = voxelize(&cloud, [8, 8, 8], 1).unwrap();
        assert_eq!(v.map.voxel_of(0), 0);
        assert_eq!(v.map.voxel_of(1), 8 * 8 * 8 - 1);
        assert!((v.grid.voxel_size[2] - 1.0).abs() < 1e-12);
        assert!((v.grid.origin[2] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn devoxelize_paths() {
        let cloud =
            PointCloud::new(vec![p(0., 0., 0.), p(0.1, 0., 0.), p(9., 9., 9.)], vec![1, 1, 0])
                .unwrap();
        let v = voxelize(&cloud, [4, 4, 4], 1).unwrap();
        let zero = Grid3::<u8>::zeros([4, 4, 4]);
        assert_eq!(devoxelize(&zero, &v.map, &cloud).unwrap(), vec![0, 0, 0]);
        let mut one = zero.clone();
        one.as_mut_slice()[v.map.voxel_of(0)] = 1;
        assert_eq!(devoxelize(&one, &v.map, &cloud).unwrap(), vec![1, 1, 0]);
        assert!(devoxelize(&Grid3::zeros([2, 2, 2]), &v.map, &cloud).is_err());
    }

    #[test]
    fn ply_colors_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ply");
        let cloud = PointCloud::new(vec![p(1., 2., 3.)], vec![1]).unwrap();
        save_colored_cloud(&cloud, &[1], &[1], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 1\n"));
        assert!(text.trim_end().ends_with("0 200 0"));
        save_colored_cloud(&cloud, &[1], &[0], &path).unwrap();
        assert!(fs::read_to_string(&path).unwrap().trim_end().ends_with("220 0 0"));
        assert!(save_colored_cloud(&cloud, &[1, 0], &[1], &path).is_err());
    }
}
