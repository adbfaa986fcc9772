//! Balanced sampling of sparse occupancy tensors.
//!
//! Every occupied voxel is kept as a `b = 1` entry. An equal number of empty
//! voxels is drawn from the 26-connected shell around the occupied set, so the
//! zeros trace the surface boundary, and any remaining capacity is filled with
//! empty voxels drawn uniformly from the whole grid.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_file;
use crate::voxel::{BinaryVoxelTensor, GridSpec, VoxelIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: VoxelIndex,
    pub bit: u8,
}

/// Fixed-length sequence of occupied and empty voxel entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedSample {
    pub grid: GridSpec,
    pub entries: Vec<SampleEntry>,
}

impl BalancedSample {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.entries.iter().filter(|e| e.bit == 1).count()
    }
}

/// Where each zero entry of a [`BalancedSample`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroPhase {
    Shell,
    ShellDeficit,
    Fill,
}

/// `M_r = 2 · max_i M_i`.
pub fn compute_mr(counts: &[usize]) -> Result<usize> {
    match counts.iter().max() {
        None => Err(Error::Config("no occupancy counts given".into())),
        Some(&0) => Err(Error::Config("occupancy counts must be positive".into())),
        Some(&m) => Ok(2 * m),
    }
}

/// Unoccupied voxels at Chebyshev distance 1 from the occupied set, sorted.
pub fn shell(tensor: &BinaryVoxelTensor) -> Vec<VoxelIndex> {
    let dims = tensor.grid.dims;
    let mut out = BTreeSet::new();
    for idx in tensor.occupied() {
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                for dk in -1i64..=1 {
                    if di == 0 && dj == 0 && dk == 0 {
                        continue;
                    }
                    let n = [idx[0] as i64 + di, idx[1] as i64 + dj, idx[2] as i64 + dk];
                    if (0..3).any(|a| n[a] < 0 || n[a] >= dims[a] as i64) {
                        continue;
                    }
                    let n = n.map(|c| c as usize);
                    if !tensor.is_occupied(&n) {
                        out.insert(n);
                    }
                }
            }
        }
    }
    out.into_iter().collect()
}

pub fn balanced_sample(tensor: &BinaryVoxelTensor, m_r: usize, seed: u64) -> Result<BalancedSample> {
    balanced_sample_traced(tensor, m_r, seed).map(|(s, _)| s)
}

/// [`balanced_sample`] plus the phase that produced each zero entry, in entry order.
pub fn balanced_sample_traced(
    tensor: &BinaryVoxelTensor,
    m_r: usize,
    seed: u64,
) -> Result<(BalancedSample, Vec<ZeroPhase>)> {
    let ones = tensor.occupied_count();
    if ones == 0 {
        return Err(Error::Infeasible("tensor has no occupied voxels".into()));
    }
    if m_r < 2 * ones {
        return Err(Error::Capacity { m_r, occupied: ones });
    }
    let zeros_needed = (m_r - ones) as u64;
    let zeros_available = tensor.grid.voxel_count() - ones as u64;
    if zeros_available < zeros_needed {
        return Err(Error::Infeasible(format!(
            "{zeros_needed} empty voxels requested but only {zeros_available} exist"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries: Vec<SampleEntry> = tensor
        .occupied()
        .iter()
        .map(|&index| SampleEntry { index, bit: 1 })
        .collect();
    let mut phases = Vec::with_capacity(m_r - ones);
    let mut chosen: BTreeSet<VoxelIndex> = BTreeSet::new();

    let candidates = shell(tensor);
    if candidates.len() >= ones {
        for i in index::sample(&mut rng, candidates.len(), ones) {
            chosen.insert(candidates[i]);
            entries.push(SampleEntry {
                index: candidates[i],
                bit: 0,
            });
            phases.push(ZeroPhase::Shell);
        }
    } else {
        for &c in &candidates {
            chosen.insert(c);
            entries.push(SampleEntry { index: c, bit: 0 });
            phases.push(ZeroPhase::Shell);
        }
        let deficit = ones - candidates.len();
        for idx in draw_empty(tensor, &chosen, deficit, &mut rng) {
            chosen.insert(idx);
            entries.push(SampleEntry { index: idx, bit: 0 });
            phases.push(ZeroPhase::ShellDeficit);
        }
    }

    let fill = m_r - 2 * ones;
    for idx in draw_empty(tensor, &chosen, fill, &mut rng) {
        chosen.insert(idx);
        entries.push(SampleEntry { index: idx, bit: 0 });
        phases.push(ZeroPhase::Fill);
    }

    Ok((
        BalancedSample {
            grid: tensor.grid,
            entries,
        },
        phases,
    ))
}

/// Uniform draws of distinct empty voxels not already in `taken`.
fn draw_empty(
    tensor: &BinaryVoxelTensor,
    taken: &BTreeSet<VoxelIndex>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<VoxelIndex> {
    if count == 0 {
        return Vec::new();
    }
    let dims = tensor.grid.dims;
    let total = tensor.grid.voxel_count();
    let free = total - tensor.occupied_count() as u64 - taken.len() as u64;
    let unflatten = |f: u64| -> VoxelIndex {
        let k = f % dims[2] as u64;
        let j = (f / dims[2] as u64) % dims[1] as u64;
        let i = f / (dims[1] as u64 * dims[2] as u64);
        [i as usize, j as usize, k as usize]
    };

    // Dense grids: enumerate the free voxels and sample among them.
    if free < 4 * count as u64 || total <= 1 << 16 {
        let pool: Vec<VoxelIndex> = (0..total)
            .map(unflatten)
            .filter(|v| !tensor.is_occupied(v) && !taken.contains(v))
            .collect();
        return index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i])
            .collect();
    }

    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v = unflatten(rng.random_range(0..total));
        if tensor.is_occupied(&v) || taken.contains(&v) || !seen.insert(v) {
            continue;
        }
        out.push(v);
    }
    out
}

/// `i,j,k,b` CSV with `M_r` rows.
pub fn write_sample_csv(path: &Path, sample: &BalancedSample) -> Result<()> {
    let mut out = String::from("i,j,k,b\n");
    for e in &sample.entries {
        out.push_str(&format!("{},{},{},{}\n", e.index[0], e.index[1], e.index[2], e.bit));
    }
    write_file(path, &out)
}

pub fn read_sample_csv(path: &Path, grid: GridSpec) -> Result<BalancedSample> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut entries = Vec::new();
    for record in reader.deserialize::<(usize, usize, usize, u8)>() {
        let (i, j, k, b) = record?;
        if b > 1 || !grid.contains_index(&[i, j, k]) {
            return Err(Error::InvalidIndex(format!("entry ({i},{j},{k},{b})")));
        }
        entries.push(SampleEntry { index: [i, j, k], bit: b });
    }
    Ok(BalancedSample { grid, entries })
}
