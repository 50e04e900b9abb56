//! Sparse voxel grid storage.
//!
//! Values live at voxel centers of an `R³` lattice spanning a cubic world box.
//! Occupied voxels are kept as a strictly ascending list of linear indices
//! `((i·R)+j)·R+k` with parallel value arrays. A bit mask with per-word prefix
//! popcounts maps a linear index to its slot in the value arrays in O(1).
//!
//! Interpolation is trilinear between the 8 nearest voxel centers. Unoccupied
//! and out-of-lattice neighbors contribute zero. Activations are applied after
//! interpolation: `max(σ_raw, 0)` for density and the logistic function per
//! color channel.

use std::fmt::Debug;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Largest supported lattice resolution per axis.
pub const MAX_RESOLUTION: u32 = 1024;

/// Slot marker for a stencil corner without stored values.
pub const EMPTY_SLOT: u32 = u32::MAX;

/// Storage precision of grid values. All arithmetic happens in `f64`.
pub trait Scalar: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[inline]
pub fn activate_density(raw: f64) -> f64 {
    raw.max(0.0)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`sigmoid`]; the input is clamped away from 0 and 1.
pub fn logit(c: f64) -> f64 {
    let c = c.clamp(1e-6, 1.0 - 1e-6);
    (c / (1.0 - c)).ln()
}

/// Axis-aligned cubic world box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 6]", try_from = "[f64; 6]")]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds::cube(1.0)
    }
}

impl Bounds {
    /// `[-half, half]³`.
    pub fn cube(half: f64) -> Self {
        Bounds {
            min: Vec3::repeat(-half),
            max: Vec3::repeat(half),
        }
    }

    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = Bounds { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.max - self.min;
        if !(e.iter().all(|v| v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!("degenerate bounds {:?}", self)));
        }
        let tol = 1e-9 * e.x.abs().max(1.0);
        if (e.x - e.y).abs() > tol || (e.x - e.z).abs() > tol {
            return Err(Error::invalid("grid bounds must be a cube"));
        }
        Ok(())
    }

    pub fn extent(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.min.x, self.min.y, self.min.z, self.max.x, self.max.y, self.max.z,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Result<Self> {
        Bounds::new(Vec3::new(a[0], a[1], a[2]), Vec3::new(a[3], a[4], a[5]))
    }
}

impl From<Bounds> for [f64; 6] {
    fn from(b: Bounds) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 6]> for Bounds {
    type Error = Error;

    fn try_from(a: [f64; 6]) -> Result<Self> {
        Bounds::from_array(a)
    }
}

#[inline]
fn floor_i64(u: f64) -> i64 {
    let f = u as i64;
    if (f as f64) > u {
        f - 1
    } else {
        f
    }
}

fn check_resolution(resolution: u32) -> Result<()> {
    if resolution < 8 || !resolution.is_power_of_two() {
        return Err(Error::invalid(format!(
            "resolution must be a power of two >= 8, got {resolution}"
        )));
    }
    if resolution > MAX_RESOLUTION {
        return Err(Error::invalid(format!(
            "resolution {resolution} exceeds the index space (max {MAX_RESOLUTION})"
        )));
    }
    Ok(())
}

/// One bit per lattice cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyMask {
    resolution: u32,
    bits: Vec<u64>,
}

impl OccupancyMask {
    pub fn empty(resolution: u32) -> Self {
        let cells = (resolution as u64).pow(3);
        OccupancyMask {
            resolution,
            bits: vec![0; cells.div_ceil(64) as usize],
        }
    }

    pub fn full(resolution: u32) -> Self {
        let mut m = Self::empty(resolution);
        let cells = m.cell_count();
        for (w, word) in m.bits.iter_mut().enumerate() {
            let lo = w as u64 * 64;
            let n = (cells - lo).min(64);
            *word = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
        }
        m
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn cell_count(&self) -> u64 {
        (self.resolution as u64).pow(3)
    }

    #[inline]
    pub fn contains(&self, index: u64) -> bool {
        (self.bits[(index >> 6) as usize] >> (index & 63)) & 1 == 1
    }

    #[inline]
    pub fn insert(&mut self, index: u64) {
        self.bits[(index >> 6) as usize] |= 1 << (index & 63);
    }

    #[inline]
    pub fn remove(&mut self, index: u64) {
        self.bits[(index >> 6) as usize] &= !(1 << (index & 63));
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn empty_count(&self) -> u64 {
        self.cell_count() - self.count()
    }

    /// Fraction of empty lattice cells.
    pub fn sparsity(&self) -> f64 {
        self.empty_count() as f64 / self.cell_count() as f64
    }

    pub fn union_with(&mut self, other: &OccupancyMask) -> Result<()> {
        if other.resolution != self.resolution {
            return Err(Error::invalid("mask resolution mismatch"));
        }
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    pub fn is_subset_of(&self, other: &OccupancyMask) -> bool {
        self.resolution == other.resolution
            && self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }

    /// Occupied linear indices in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        self.bits.iter().enumerate().flat_map(|(w, &word)| {
            let mut rest = word;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let b = rest.trailing_zeros() as u64;
                rest &= rest - 1;
                Some(w as u64 * 64 + b)
            })
        })
    }

    fn words(&self) -> &[u64] {
        &self.bits
    }
}

/// Interpolated pre-activation values at a point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrilinearSample {
    pub sigma_raw: f64,
    pub sh0: [f64; 3],
}

/// The 8 interpolation corners of a point. Corner `c` has lattice offset
/// `((c>>2)&1, (c>>1)&1, c&1)` from the lower corner.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub slots: [u32; 8],
    pub weights: [f64; 8],
}

impl Stencil {
    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(|&s| s == EMPTY_SLOT)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelGrid<T: Scalar = f32> {
    resolution: u32,
    bounds: Bounds,
    voxel_size: f64,
    mask: OccupancyMask,
    rank: Vec<u32>,
    indices: Vec<u64>,
    density: Vec<T>,
    sh0: Vec<[T; 3]>,
}

/// Cell width of a fine skip block.
pub const BLOCK: u32 = 4;
/// Fine blocks per coarse block along each axis.
const COARSEN: u32 = 4;

/// Blocks in which every sample is skipped: no voxel within one cell of the
/// block has raw density reaching half the skip threshold, so any stencil
/// there interpolates to below it. Two levels, `BLOCK`³ cells and a coarser
/// level on top. Only valid for the values the map was built from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipBlocks {
    fine: BlockLevel,
    coarse: BlockLevel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct BlockLevel {
    /// Cells per block edge.
    side: u32,
    per_axis: u32,
    live: Vec<bool>,
}

impl BlockLevel {
    #[inline]
    fn at(&self, cell: [u32; 3]) -> ([u32; 3], bool) {
        let b = cell.map(|c| c / self.side);
        let n = self.per_axis as usize;
        (b, self.live[(b[0] as usize * n + b[1] as usize) * n + b[2] as usize])
    }
}

impl SkipBlocks {
    /// Live fine blocks.
    pub fn live_count(&self) -> usize {
        self.fine.live.iter().filter(|&&l| l).count()
    }

    /// Fine blocks in the lattice.
    pub fn block_count(&self) -> usize {
        self.fine.live.len()
    }
}

impl<T: Scalar> SparseVoxelGrid<T> {
    /// Every lattice cell occupied with the given values.
    pub fn new_dense(resolution: u32, bounds: Bounds, fill_sigma: f64, fill_sh: [f64; 3]) -> Result<Self> {
        check_resolution(resolution)?;
        bounds.validate()?;
        let n = (resolution as u64).pow(3) as usize;
        let sh = fill_sh.map(T::from_f64);
        Self::from_sorted_parts(
            resolution,
            bounds,
            (0..n as u64).collect(),
            vec![T::from_f64(fill_sigma); n],
            vec![sh; n],
        )
    }

    pub fn empty(resolution: u32, bounds: Bounds) -> Result<Self> {
        Self::from_sorted_parts(resolution, bounds, Vec::new(), Vec::new(), Vec::new())
    }

    /// Builds a grid from parallel arrays; `indices` must be strictly ascending.
    pub fn from_sorted_parts(
        resolution: u32,
        bounds: Bounds,
        indices: Vec<u64>,
        density: Vec<T>,
        sh0: Vec<[T; 3]>,
    ) -> Result<Self> {
        check_resolution(resolution)?;
        bounds.validate()?;
        if indices.len() != density.len() || indices.len() != sh0.len() {
            return Err(Error::invalid("index and value arrays differ in length"));
        }
        let cells = (resolution as u64).pow(3);
        let mut mask = OccupancyMask::empty(resolution);
        let mut prev: Option<u64> = None;
        for &idx in &indices {
            if idx >= cells {
                return Err(Error::invalid(format!("voxel index {idx} outside lattice")));
            }
            if prev.is_some_and(|p| p >= idx) {
                return Err(Error::invalid("voxel indices must be strictly ascending"));
            }
            prev = Some(idx);
            mask.insert(idx);
        }
        let rank = build_rank(mask.words());
        Ok(SparseVoxelGrid {
            resolution,
            bounds,
            voxel_size: bounds.extent() / resolution as f64,
            mask,
            rank,
            indices,
            density,
            sh0,
        })
    }

    /// Builds a grid from unordered `(linear index, σ_raw, sh0)` records.
    pub fn from_voxels(
        resolution: u32,
        bounds: Bounds,
        voxels: impl IntoIterator<Item = (u64, f64, [f64; 3])>,
    ) -> Result<Self> {
        let mut v: Vec<_> = voxels.into_iter().collect();
        v.sort_by_key(|r| r.0);
        if v.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid("duplicate voxel index"));
        }
        let indices = v.iter().map(|r| r.0).collect();
        let density = v.iter().map(|r| T::from_f64(r.1)).collect();
        let sh0 = v.iter().map(|r| r.2.map(T::from_f64)).collect();
        Self::from_sorted_parts(resolution, bounds, indices, density, sh0)
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    /// Edge length of one voxel, `extent / R`.
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn occupancy(&self) -> &OccupancyMask {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn cell_count(&self) -> u64 {
        self.mask.cell_count()
    }

    pub fn sparsity(&self) -> f64 {
        self.mask.sparsity()
    }

    pub fn indices(&self) -> &[u64] {
        &self.indices
    }

    pub fn density(&self) -> &[T] {
        &self.density
    }

    pub fn density_mut(&mut self) -> &mut [T] {
        &mut self.density
    }

    pub fn sh0(&self) -> &[[T; 3]] {
        &self.sh0
    }

    pub fn sh0_mut(&mut self) -> &mut [[T; 3]] {
        &mut self.sh0
    }

    #[inline]
    pub fn linear_index(&self, i: u32, j: u32, k: u32) -> u64 {
        let r = self.resolution as u64;
        ((i as u64 * r) + j as u64) * r + k as u64
    }

    #[inline]
    pub fn lattice_coords(&self, index: u64) -> [u32; 3] {
        let r = self.resolution as u64;
        [(index / (r * r)) as u32, ((index / r) % r) as u32, (index % r) as u32]
    }

    pub fn cell_center(&self, i: u32, j: u32, k: u32) -> Vec3 {
        self.bounds.min + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    /// Lattice cell containing `p`, if inside the bounds.
    pub fn cell_of_point(&self, p: &Vec3) -> Option<[u32; 3]> {
        if !self.bounds.contains(p) {
            return None;
        }
        let r = self.resolution as i64;
        let mut c = [0u32; 3];
        for a in 0..3 {
            let u = floor_i64((p[a] - self.bounds.min[a]) / self.voxel_size);
            c[a] = u.clamp(0, r - 1) as u32;
        }
        Some(c)
    }

    /// Skip map for the current values and threshold `sigma_skip`.
    pub fn skip_blocks(&self, sigma_skip: f64) -> SkipBlocks {
        let r = self.resolution as u64;
        let n = (self.resolution / BLOCK) as usize;
        let mut live = vec![false; n.pow(3)];
        for (&idx, v) in self.indices.iter().zip(&self.density) {
            if activate_density(v.to_f64()) < 0.5 * sigma_skip {
                continue;
            }
            let c = [idx / (r * r), (idx / r) % r, idx % r];
            let lo = c.map(|x| (x.saturating_sub(1) / BLOCK as u64) as usize);
            let hi = c.map(|x| ((x + 1).min(r - 1) / BLOCK as u64) as usize);
            for bi in lo[0]..=hi[0] {
                for bj in lo[1]..=hi[1] {
                    for bk in lo[2]..=hi[2] {
                        live[(bi * n + bj) * n + bk] = true;
                    }
                }
            }
        }
        let f = COARSEN.min(n as u32) as usize;
        let m = n / f;
        let mut coarse = vec![false; m.pow(3)];
        for bi in 0..n {
            for bj in 0..n {
                for bk in 0..n {
                    if live[(bi * n + bj) * n + bk] {
                        coarse[((bi / f) * m + bj / f) * m + bk / f] = true;
                    }
                }
            }
        }
        SkipBlocks {
            fine: BlockLevel {
                side: BLOCK,
                per_axis: n as u32,
                live,
            },
            coarse: BlockLevel {
                side: BLOCK * f as u32,
                per_axis: m as u32,
                live: coarse,
            },
        }
    }

    /// The largest block of `blocks` containing `p` that is dead, or else
    /// the live fine block, with its world-space box; `None` outside the
    /// bounds.
    #[inline]
    pub fn skip_block(&self, blocks: &SkipBlocks, p: &Vec3) -> Option<(bool, Vec3, Vec3)> {
        let cell = self.cell_of_point(p)?;
        let (b, side, live) = match blocks.coarse.at(cell) {
            (b, false) => (b, blocks.coarse.side, false),
            _ => {
                let (b, live) = blocks.fine.at(cell);
                (b, blocks.fine.side, live)
            }
        };
        let w = side as f64 * self.voxel_size;
        let lo = self.bounds.min + Vec3::new(b[0] as f64, b[1] as f64, b[2] as f64) * w;
        Some((live, lo, lo + Vec3::repeat(w)))
    }

    /// Value-array slot of a linear index, if occupied.
    #[inline]
    pub fn slot(&self, index: u64) -> Option<usize> {
        let w = (index >> 6) as usize;
        let word = self.mask.bits[w];
        let b = index & 63;
        if (word >> b) & 1 == 0 {
            return None;
        }
        let below = word & ((1u64 << b) - 1);
        Some(self.rank[w] as usize + below.count_ones() as usize)
    }

    pub fn slot_at(&self, i: u32, j: u32, k: u32) -> Option<usize> {
        self.slot(self.linear_index(i, j, k))
    }

    #[inline]
    pub fn sigma_raw(&self, slot: usize) -> f64 {
        self.density[slot].to_f64()
    }

    #[inline]
    pub fn sh(&self, slot: usize) -> [f64; 3] {
        self.sh0[slot].map(T::to_f64)
    }

    /// Trilinear corners and weights of `p`; `None` outside the bounds.
    #[inline]
    pub fn stencil(&self, p: &Vec3) -> Option<Stencil> {
        if !self.bounds.contains(p) {
            return None;
        }
        let r = self.resolution as i64;
        let mut base = [0i64; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let u = (p[a] - self.bounds.min[a]) / self.voxel_size - 0.5;
            base[a] = floor_i64(u);
            frac[a] = u - base[a] as f64;
        }
        let mut slots = [EMPTY_SLOT; 8];
        let mut weights = [0.0; 8];
        for c in 0..8 {
            let off = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
            let mut w = 1.0;
            let mut inside = true;
            let mut idx = [0i64; 3];
            for a in 0..3 {
                idx[a] = base[a] + off[a] as i64;
                inside &= idx[a] >= 0 && idx[a] < r;
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            weights[c] = w;
            if inside {
                let lin = ((idx[0] * r) + idx[1]) * r + idx[2];
                if let Some(s) = self.slot(lin as u64) {
                    slots[c] = s as u32;
                }
            }
        }
        Some(Stencil { slots, weights })
    }

    #[inline]
    pub fn interpolate_sigma(&self, st: &Stencil) -> f64 {
        let mut s = 0.0;
        for c in 0..8 {
            if st.slots[c] != EMPTY_SLOT {
                s += st.weights[c] * self.density[st.slots[c] as usize].to_f64();
            }
        }
        s
    }

    #[inline]
    pub fn interpolate_sh(&self, st: &Stencil) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..8 {
            if st.slots[c] != EMPTY_SLOT {
                let v = &self.sh0[st.slots[c] as usize];
                for ch in 0..3 {
                    out[ch] += st.weights[c] * v[ch].to_f64();
                }
            }
        }
        out
    }

    /// Pre-activation density and color at `p`; zero outside the bounds.
    pub fn sample_trilinear(&self, p: &Vec3) -> TrilinearSample {
        match self.stencil(p) {
            Some(st) => TrilinearSample {
                sigma_raw: self.interpolate_sigma(&st),
                sh0: self.interpolate_sh(&st),
            },
            None => TrilinearSample::default(),
        }
    }

    /// Removes voxels whose activated density is `<= tau_sigma`. With
    /// `require_neighbors`, a voxel is only removed when all 26 voxels around
    /// it are also at or below the threshold, so every stencil that reads a
    /// removed voxel interpolates only sub-threshold values.
    pub fn prune_by_density(&self, tau_sigma: f64, require_neighbors: bool) -> Self {
        let dense = |lin: u64| {
            self.slot(lin)
                .is_some_and(|s| activate_density(self.sigma_raw(s)) > tau_sigma)
        };
        let r = self.resolution as i64;
        let keep: Vec<bool> = self
            .indices
            .iter()
            .map(|&lin| {
                if dense(lin) {
                    return true;
                }
                if !require_neighbors {
                    return false;
                }
                let [i, j, k] = self.lattice_coords(lin).map(|v| v as i64);
                NEIGHBORS26.iter().any(|d| {
                    let (a, b, c) = (i + d[0], j + d[1], k + d[2]);
                    (0..r).contains(&a)
                        && (0..r).contains(&b)
                        && (0..r).contains(&c)
                        && dense((((a * r) + b) * r + c) as u64)
                })
            })
            .collect();
        self.filter_slots(|s| keep[s])
    }

    /// Keeps only voxels that are also set in `mask`.
    pub fn retain_mask(&self, mask: &OccupancyMask) -> Result<Self> {
        if mask.resolution() != self.resolution {
            return Err(Error::invalid("mask resolution does not match grid"));
        }
        Ok(self.filter_slots(|s| mask.contains(self.indices[s])))
    }

    fn filter_slots(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        let mut indices = Vec::new();
        let mut density = Vec::new();
        let mut sh0 = Vec::new();
        for s in 0..self.indices.len() {
            if keep(s) {
                indices.push(self.indices[s]);
                density.push(self.density[s]);
                sh0.push(self.sh0[s]);
            }
        }
        Self::from_sorted_parts(self.resolution, self.bounds, indices, density, sh0)
            .expect("subset of a valid grid is valid")
    }

    /// Doubles the resolution. Every occupied voxel spawns its 8 children.
    ///
    /// Child values are trilinear interpolations of the parent grid at the
    /// child centers, normalized over occupied parent neighbors, then shifted
    /// so the 8 children of a parent average to the parent's value. This keeps
    /// constant and affine fields exact and makes resampling the result at the
    /// old voxel centers return the old values.
    pub fn upsample2x(&self) -> Result<Self> {
        let new_res = self
            .resolution
            .checked_mul(2)
            .filter(|r| *r <= MAX_RESOLUTION)
            .ok_or_else(|| Error::invalid("upsampled resolution exceeds the index space"))?;
        let r = self.resolution as i64;
        let nr = new_res as u64;
        let mut voxels = Vec::with_capacity(self.len() * 8);
        for (slot, &lin) in self.indices.iter().enumerate() {
            let [i, j, k] = self.lattice_coords(lin).map(|v| v as i64);
            let parent = [
                self.sigma_raw(slot),
                self.sh0[slot][0].to_f64(),
                self.sh0[slot][1].to_f64(),
                self.sh0[slot][2].to_f64(),
            ];
            let mut children = [[0.0f64; 4]; 8];
            for (c, child) in children.iter_mut().enumerate() {
                let off = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
                // Child center sits at parent offset -0.25 or +0.25 per axis.
                let mut base = [0i64; 3];
                let mut frac = [0f64; 3];
                for a in 0..3 {
                    let (b, f) = if off[a] == 0 { (-1, 0.75) } else { (0, 0.25) };
                    base[a] = [i, j, k][a] + b;
                    frac[a] = f;
                }
                let mut acc = [0.0; 4];
                let mut wsum = 0.0;
                for n in 0..8 {
                    let d = [(n >> 2) & 1, (n >> 1) & 1, n & 1];
                    let q = [base[0] + d[0] as i64, base[1] + d[1] as i64, base[2] + d[2] as i64];
                    if q.iter().any(|v| *v < 0 || *v >= r) {
                        continue;
                    }
                    let Some(s) = self.slot((((q[0] * r) + q[1]) * r + q[2]) as u64) else {
                        continue;
                    };
                    let mut w = 1.0;
                    for a in 0..3 {
                        w *= if d[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                    }
                    wsum += w;
                    acc[0] += w * self.sigma_raw(s);
                    for ch in 0..3 {
                        acc[1 + ch] += w * self.sh0[s][ch].to_f64();
                    }
                }
                for (o, a) in child.iter_mut().zip(acc) {
                    *o = a / wsum;
                }
            }
            for ch in 0..4 {
                let mean = children.iter().map(|c| c[ch]).sum::<f64>() / 8.0;
                let shift = parent[ch] - mean;
                for child in children.iter_mut() {
                    child[ch] += shift;
                }
            }
            for (c, child) in children.iter().enumerate() {
                let ci = (2 * i) as u64 + ((c >> 2) & 1) as u64;
                let cj = (2 * j) as u64 + ((c >> 1) & 1) as u64;
                let ck = (2 * k) as u64 + (c & 1) as u64;
                voxels.push(((ci * nr + cj) * nr + ck, child[0], [child[1], child[2], child[3]]));
            }
        }
        SparseVoxelGrid::from_voxels(new_res, self.bounds, voxels)
    }

    /// Converts the storage precision.
    pub fn cast<U: Scalar>(&self) -> SparseVoxelGrid<U> {
        SparseVoxelGrid {
            resolution: self.resolution,
            bounds: self.bounds,
            voxel_size: self.voxel_size,
            mask: self.mask.clone(),
            rank: self.rank.clone(),
            indices: self.indices.clone(),
            density: self.density.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            sh0: self.sh0.iter().map(|v| v.map(|x| U::from_f64(x.to_f64()))).collect(),
        }
    }
}

const NEIGHBORS26: [[i64; 3]; 26] = {
    let mut out = [[0i64; 3]; 26];
    let mut n = 0;
    let mut c = 0;
    while c < 27 {
        if c != 13 {
            out[n] = [c / 9 - 1, (c / 3) % 3 - 1, c % 3 - 1];
            n += 1;
        }
        c += 1;
    }
    out
};

fn build_rank(words: &[u64]) -> Vec<u32> {
    let mut rank = Vec::with_capacity(words.len());
    let mut acc = 0u32;
    for w in words {
        rank.push(acc);
        acc += w.count_ones();
    }
    rank
}
