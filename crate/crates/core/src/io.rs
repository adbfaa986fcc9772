//! Point clouds, datasets and their on-disk formats.
//!
//! Two formats are supported:
//! - `.xyz`: UTF-8 text, one `x y z` triple per line, `#` starts a comment line.
//! - `manifest.csv`: `sample_id,path,y_1,...,y_p`, one row per sample, paths
//!   relative to the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub type Point3 = [f64; 3];

/// An unordered set of 3D measurements of one part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub sample_id: String,
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(sample_id: impl Into<String>, points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidCloud(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            sample_id: sample_id.into(),
            points,
        })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_id(mut self, sample_id: impl Into<String>) -> Self {
        self.sample_id = sample_id.into();
        self
    }

    /// Number of distinct points (bitwise comparison of coordinates).
    pub fn distinct_count(&self) -> usize {
        let mut keys: Vec<[u64; 3]> = self
            .points
            .iter()
            .map(|p| p.map(|c| if c == 0.0 { 0 } else { c.to_bits() }))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        keys.len()
    }
}

/// Point clouds paired with response rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PointCloud>,
    pub responses: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(samples: Vec<PointCloud>, responses: Vec<Vec<f64>>) -> Result<Self> {
        if samples.len() != responses.len() {
            return Err(Error::InvalidDataset(format!(
                "{} samples but {} response rows",
                samples.len(),
                responses.len()
            )));
        }
        let p = responses.first().map_or(0, Vec::len);
        for (i, row) in responses.iter().enumerate() {
            if row.len() != p {
                return Err(Error::InvalidDataset(format!(
                    "response row {i} has length {} (expected {p})",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!("response row {i} is not finite")));
            }
        }
        Ok(Self { samples, responses })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of response columns.
    pub fn response_dim(&self) -> usize {
        self.responses.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            responses: indices.iter().map(|&i| self.responses[i].clone()).collect(),
        }
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub lower: Point3,
    pub upper: Point3,
}

impl Box3 {
    pub fn extent(&self) -> Point3 {
        [0, 1, 2].map(|a| self.upper[a] - self.lower[a])
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| p[a] >= self.lower[a] && p[a] <= self.upper[a])
    }

    pub fn union(&self, other: &Box3) -> Box3 {
        Box3 {
            lower: [0, 1, 2].map(|a| self.lower[a].min(other.lower[a])),
            upper: [0, 1, 2].map(|a| self.upper[a].max(other.upper[a])),
        }
    }

    /// Grows every axis by `relative` of its extent on each side; zero-extent
    /// axes grow by `epsilon` instead.
    pub fn expanded(&self, relative: f64, epsilon: f64) -> Box3 {
        let mut out = *self;
        for a in 0..3 {
            let extent = self.upper[a] - self.lower[a];
            let pad = if extent > 0.0 { relative * extent } else { epsilon };
            out.lower[a] -= pad;
            out.upper[a] += pad;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxMargin {
    /// Fraction of each axis extent added on both sides.
    pub relative: f64,
    /// Absolute padding for axes with zero extent.
    pub epsilon: f64,
}

impl Default for BoxMargin {
    fn default() -> Self {
        Self {
            relative: 0.05,
            epsilon: 1e-6,
        }
    }
}

impl BoxMargin {
    pub fn exact() -> Self {
        Self {
            relative: 0.0,
            ..Self::default()
        }
    }
}

fn extrema(points: &[Point3]) -> Box3 {
    let mut lower = [f64::INFINITY; 3];
    let mut upper = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lower[a] = lower[a].min(p[a]);
            upper[a] = upper[a].max(p[a]);
        }
    }
    Box3 { lower, upper }
}

pub fn bounding_box(cloud: &PointCloud, margin: BoxMargin) -> Result<Box3> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(extrema(cloud.points()).expanded(margin.relative, margin.epsilon))
}

/// Bounding box of several clouds together.
pub fn bounding_box_all<'a>(
    clouds: impl IntoIterator<Item = &'a PointCloud>,
    margin: BoxMargin,
) -> Result<Box3> {
    let mut acc: Option<Box3> = None;
    for c in clouds {
        if c.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let b = extrema(c.points());
        acc = Some(match acc {
            Some(a) => a.union(&b),
            None => b,
        });
    }
    acc.map(|b| b.expanded(margin.relative, margin.epsilon))
        .ok_or(Error::EmptyCloud)
}

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("expected 3 numbers, found {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f.parse::<f64>().map_err(|e| Error::Parse {
                line: n + 1,
                message: format!("{f:?}: {e}"),
            })?;
            if !slot.is_finite() {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("non-finite value {f:?}"),
                });
            }
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    PointCloud::new("", points)
}

/// Shortest round-trip decimal form of every coordinate.
pub fn write_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 48);
    for p in cloud.points() {
        let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
    }
    out
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_xyz(&text).map(|c| c.with_id(id))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Loads `manifest.csv` and every cloud it references.
pub fn read_manifest(path: &Path) -> Result<Dataset> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "sample_id" || &headers[1] != "path" {
        return Err(Error::InvalidDataset(format!(
            "{}: header must start with sample_id,path",
            path.display()
        )));
    }
    let mut samples = Vec::new();
    let mut responses = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cloud = read_xyz(&base.join(&record[1]))?.with_id(&record[0]);
        let ys = record
            .iter()
            .skip(2)
            .map(|v| {
                v.parse::<f64>().map_err(|e| Error::Parse {
                    line: row + 2,
                    message: format!("response {v:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(cloud);
        responses.push(ys);
    }
    Dataset::new(samples, responses)
}

/// Writes `dir/manifest.csv` plus `dir/clouds/<sample_id>.xyz`. Returns the manifest path.
pub fn write_manifest(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("clouds")).map_err(io_err(dir))?;
    let manifest = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest)?;
    let mut header = vec!["sample_id".to_string(), "path".to_string()];
    header.extend((1..=dataset.response_dim()).map(|k| format!("y_{k}")));
    writer.write_record(&header)?;
    for (cloud, ys) in dataset.samples.iter().zip(&dataset.responses) {
        let rel = format!("clouds/{}.xyz", cloud.sample_id);
        write_file(&dir.join(&rel), &write_xyz(cloud))?;
        let mut row = vec![cloud.sample_id.clone(), rel];
        row.extend(ys.iter().map(|v| v.to_string()));
        writer.write_record(&row)?;
    }
    writer.flush().map_err(io_err(&manifest))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| [0; 3].map(|_| rng.random_range(-1e3..1e3) * rng.random::<f64>()))
            .collect();
        PointCloud::new("r", pts).unwrap()
    }

    #[test]
    fn parses_points_and_comments() {
        let c = parse_xyz("0 0 0\n1 2 3").unwrap();
        assert_eq!(c.points(), &[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        let c = parse_xyz("# header\n0.5 0.5 0.5").unwrap();
        assert_eq!(c.points(), &[[0.5; 3]]);
    }

    #[test]
    fn reports_line_numbers() {
        match parse_xyz("0 0 0\n# c\n1 2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        match parse_xyz("1 2 x") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_xyz("# only\n\n"), Err(Error::EmptyCloud)));
    }

    #[test]
    fn writes_origin() {
        let c = PointCloud::new("o", vec![[0.0; 3]]).unwrap();
        assert_eq!(write_xyz(&c), "0 0 0\n");
    }

    #[test]
    fn round_trips_large_clouds() {
        for (n, seed) in [(1000, 1), (10_000, 2)] {
            let c = random_cloud(n, seed);
            let back = parse_xyz(&write_xyz(&c)).unwrap();
            assert_eq!(back.points(), c.points());
        }
    }

    #[test]
    fn box_of_unit_cube_corners() {
        let corners = (0..8)
            .map(|b| [(b & 1) as f64, ((b >> 1) & 1) as f64, ((b >> 2) & 1) as f64])
            .collect();
        let c = PointCloud::new("cube", corners).unwrap();
        let b = bounding_box(&c, BoxMargin::exact()).unwrap();
        assert_eq!(b.lower, [0.0; 3]);
        assert_eq!(b.upper, [1.0; 3]);
    }

    #[test]
    fn degenerate_box_gets_epsilon() {
        let c = PointCloud::new("p", vec![[1.0, 2.0, 3.0]]).unwrap();
        let b = bounding_box(&c, BoxMargin::exact()).unwrap();
        for a in 0..3 {
            assert!(b.lower[a] < c.points()[0][a] && b.upper[a] > c.points()[0][a]);
            assert!((b.upper[a] - b.lower[a] - 2e-6).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_clouds_rejected() {
        assert!(matches!(PointCloud::new("e", vec![]), Err(Error::EmptyCloud)));
        assert!(PointCloud::new("n", vec![[f64::NAN, 0.0, 0.0]]).is_err());
        assert!(Dataset::new(vec![random_cloud(3, 0)], vec![]).is_err());
        assert!(Dataset::new(vec![random_cloud(3, 0)], vec![vec![f64::INFINITY]]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(
            vec![random_cloud(5, 3).with_id("a"), random_cloud(7, 4).with_id("b")],
            vec![vec![1.5, -2.0], vec![0.25, 3.0]],
        )
        .unwrap();
        let path = write_manifest(dir.path(), &ds).unwrap();
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("sample_id,path,y_1,y_2\n"));
        assert_eq!(read_manifest(&path).unwrap(), ds);
    }

    proptest! {
        #[test]
        fn xyz_inverse_pair(pts in prop::collection::vec(prop::array::uniform3(-1e12f64..1e12), 1..50)) {
            let c = PointCloud::new("p", pts).unwrap();
            let back = parse_xyz(&write_xyz(&c)).unwrap();
            prop_assert_eq!(back.points(), c.points());
        }

        #[test]
        fn box_contains_all_points(
            pts in prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 1..60),
            margin in 0.0f64..0.3,
        ) {
            let c = PointCloud::new("p", pts).unwrap();
            let b = bounding_box(&c, BoxMargin { relative: margin, epsilon: 1e-6 }).unwrap();
            prop_assert!(c.points().iter().all(|p| b.contains(p)));
            let exact = bounding_box(&c, BoxMargin::exact()).unwrap();
            for a in 0..3 {
                let lo = c.points().iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
                let hi = c.points().iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    prop_assert_eq!(exact.lower[a], lo);
                    prop_assert_eq!(exact.upper[a], hi);
                }
            }
        }
    }
}
