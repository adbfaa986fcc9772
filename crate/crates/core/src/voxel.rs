//! Binary occupancy tensors on axis-aligned grids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::io::{bounding_box, write_file, Box3, BoxMargin, Point3, PointCloud};

pub type VoxelIndex = [usize; 3];

/// Default cap on any grid dimension during refinement.
pub const DEFAULT_MAX_DIM: usize = 1024;
pub const DEFAULT_INITIAL_DIMS: [usize; 3] = [100, 100, 100];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(rename = "box")]
    pub bounds: Box3,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(bounds: Box3, dims: [usize; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("grid dims must be >= 1, got {dims:?}")));
        }
        let extent = bounds.extent();
        if extent.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::Config(format!("grid box has non-positive extent {extent:?}")));
        }
        Ok(Self { bounds, dims })
    }

    pub fn edge(&self) -> [f64; 3] {
        let e = self.bounds.extent();
        [0, 1, 2].map(|a| e[a] / self.dims[a] as f64)
    }

    pub fn voxel_count(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    pub fn contains_index(&self, idx: &VoxelIndex) -> bool {
        (0..3).all(|a| idx[a] < self.dims[a])
    }

    pub fn voxel_center(&self, idx: &VoxelIndex) -> Point3 {
        let edge = self.edge();
        [0, 1, 2].map(|a| self.bounds.lower[a] + (idx[a] as f64 + 0.5) * edge[a])
    }

    /// Bin of a coordinate on one axis; `None` when outside `[lower, upper]`.
    /// Bins are half-open except the topmost, which is closed on its upper face.
    fn bin(&self, axis: usize, c: f64) -> Option<usize> {
        let lo = self.bounds.lower[axis];
        let hi = self.bounds.upper[axis];
        if !(c >= lo && c <= hi) {
            return None;
        }
        let d = self.dims[axis];
        let raw = ((c - lo) / (hi - lo) * d as f64).floor();
        let mut a = (raw.max(0.0) as usize).min(d - 1);
        // The division can round across an edge; settle against the edges themselves.
        while a + 1 < d && c >= self.edge_position(axis, a + 1) {
            a += 1;
        }
        while a > 0 && c < self.edge_position(axis, a) {
            a -= 1;
        }
        Some(a)
    }

    /// Lower face of bin `a` on one axis.
    pub fn edge_position(&self, axis: usize, a: usize) -> f64 {
        let lo = self.bounds.lower[axis];
        let hi = self.bounds.upper[axis];
        lo + (hi - lo) * (a as f64 / self.dims[axis] as f64)
    }

    fn bin_clamped(&self, axis: usize, c: f64) -> usize {
        let lo = self.bounds.lower[axis];
        let hi = self.bounds.upper[axis];
        self.bin(axis, c.clamp(lo, hi)).unwrap_or(0)
    }

    pub fn index_of(&self, p: &Point3) -> Option<VoxelIndex> {
        Some([self.bin(0, p[0])?, self.bin(1, p[1])?, self.bin(2, p[2])?])
    }
}

/// Sparse set of occupied voxels, kept sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryVoxelTensor {
    pub grid: GridSpec,
    occupied: Vec<VoxelIndex>,
}

impl BinaryVoxelTensor {
    pub fn from_indices(grid: GridSpec, mut occupied: Vec<VoxelIndex>) -> Result<Self> {
        if let Some(bad) = occupied.iter().find(|i| !grid.contains_index(i)) {
            return Err(Error::InvalidIndex(format!("{bad:?} outside dims {:?}", grid.dims)));
        }
        occupied.sort_unstable();
        occupied.dedup();
        Ok(Self { grid, occupied })
    }

    pub fn occupied(&self) -> &[VoxelIndex] {
        &self.occupied
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_occupied(&self, idx: &VoxelIndex) -> bool {
        self.occupied.binary_search(idx).is_ok()
    }
}

pub fn voxelize(cloud: &PointCloud, grid: &GridSpec) -> Result<BinaryVoxelTensor> {
    let mut occupied = Vec::with_capacity(cloud.len());
    for (index, p) in cloud.points().iter().enumerate() {
        let idx = grid.index_of(p).ok_or(Error::OutOfRange { index, point: *p })?;
        occupied.push(idx);
    }
    occupied.sort_unstable();
    occupied.dedup();
    Ok(BinaryVoxelTensor {
        grid: *grid,
        occupied,
    })
}

/// Like [`voxelize`], but points outside the box land in the nearest boundary voxel.
/// Used for held-out samples voxelized on a grid derived from training data.
pub fn voxelize_clamped(cloud: &PointCloud, grid: &GridSpec) -> BinaryVoxelTensor {
    let mut occupied: Vec<VoxelIndex> = cloud
        .points()
        .iter()
        .map(|p| [0, 1, 2].map(|a| grid.bin_clamped(a, p[a])))
        .collect();
    occupied.sort_unstable();
    occupied.dedup();
    BinaryVoxelTensor {
        grid: *grid,
        occupied,
    }
}

/// Grid refinement with the cloud's own bounding box (default 5% margin).
pub fn select_grid(cloud: &PointCloud, initial_dims: [usize; 3], max_dim: usize) -> Result<GridSpec> {
    let bounds = bounding_box(cloud, BoxMargin::default())?;
    select_grid_in(cloud, bounds, initial_dims, max_dim)
}

/// Doubles every dimension, starting from `initial_dims`, until each distinct
/// point sits in its own voxel or a dimension would exceed `max_dim`.
pub fn select_grid_in(
    cloud: &PointCloud,
    bounds: Box3,
    initial_dims: [usize; 3],
    max_dim: usize,
) -> Result<GridSpec> {
    if initial_dims.iter().any(|&d| d == 0) {
        return Err(Error::Config("initial grid dims must be >= 1".into()));
    }
    if max_dim < *initial_dims.iter().max().unwrap() {
        return Err(Error::Config(format!(
            "max_dim {max_dim} is below the initial dims {initial_dims:?}"
        )));
    }
    let target = cloud.distinct_count();
    let mut grid = GridSpec::new(bounds, initial_dims)?;
    loop {
        let occupied = voxelize_clamped(cloud, &grid).occupied_count();
        if occupied >= target {
            return Ok(grid);
        }
        let next = grid.dims.map(|d| d * 2);
        if next.iter().any(|&d| d > max_dim) {
            return Ok(grid);
        }
        grid.dims = next;
    }
}

pub fn write_grid_json(path: &Path, grid: &GridSpec) -> Result<()> {
    write_file(path, &serde_json::to_string_pretty(grid)?)
}

pub fn read_grid_json(path: &Path) -> Result<GridSpec> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let grid: GridSpec = serde_json::from_str(&text)?;
    GridSpec::new(grid.bounds, grid.dims)
}

/// `i,j,k` CSV of the occupied set.
pub fn write_tensor_csv(path: &Path, tensor: &BinaryVoxelTensor) -> Result<()> {
    let mut out = String::from("i,j,k\n");
    for [i, j, k] in tensor.occupied() {
        out.push_str(&format!("{i},{j},{k}\n"));
    }
    write_file(path, &out)
}

pub fn read_tensor_csv(path: &Path, grid: GridSpec) -> Result<BinaryVoxelTensor> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut occupied = Vec::new();
    for record in reader.deserialize::<(usize, usize, usize)>() {
        let (i, j, k) = record?;
        occupied.push([i, j, k]);
    }
    BinaryVoxelTensor::from_indices(grid, occupied)
}
