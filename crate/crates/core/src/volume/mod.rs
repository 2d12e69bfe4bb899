//! CT volumes, binary masks and the 2D primitives the rest of the pipeline
//! builds on: HU normalization, rater consensus, boundary extraction and
//! connected-region labeling.
//!
//! Volumes are stored slice-major: index `(z, r, c)` maps to
//! `(z * rows + r) * cols + c`. Masks share the grid of the volume they
//! annotate; no resampling happens anywhere in this module.

mod io;

pub use io::{
    load_mask, load_nodule_record, load_volume, resolve_relative, save_mask, save_nodule_record,
    save_volume, Characteristics, NoduleRecord,
};

use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("truncated payload {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("payload length does not match header shape {path}: expected {expected} bytes, found {found}")]
    PayloadMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Grid dimensions as (slices, rows, cols).
pub type Shape = (usize, usize, usize);

/// Voxel spacing in millimeters along (z, y, x).
pub type SpacingMm = (f64, f64, f64);

/// Position of one voxel: slice, then in-plane row and column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VoxelIndex {
    pub slice: usize,
    pub row: usize,
    pub col: usize,
}

impl VoxelIndex {
    pub fn new(slice: usize, row: usize, col: usize) -> Self {
        Self { slice, row, col }
    }
}

fn check_shape_spacing(shape: Shape, spacing: SpacingMm) -> Result<(), VolumeError> {
    let (s, r, c) = shape;
    if s == 0 || r == 0 || c == 0 {
        return Err(VolumeError::InvalidArgument(format!(
            "empty shape {shape:?}"
        )));
    }
    for v in [spacing.0, spacing.1, spacing.2] {
        if !(v.is_finite() && v > 0.0) {
            return Err(VolumeError::InvalidArgument(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
    }
    Ok(())
}

/// A CT volume in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    shape: Shape,
    spacing_mm: SpacingMm,
    data: Vec<i16>,
}

impl CtVolume {
    /// Builds a volume from slice-major voxel data.
    pub fn from_data(
        shape: Shape,
        spacing_mm: SpacingMm,
        data: Vec<i16>,
    ) -> Result<Self, VolumeError> {
        check_shape_spacing(shape, spacing_mm)?;
        let expected = shape.0 * shape.1 * shape.2;
        if data.len() != expected {
            return Err(VolumeError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} voxels, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            spacing_mm,
            data,
        })
    }

    /// Uniform volume, useful as a canvas for synthetic data.
    pub fn filled(shape: Shape, spacing_mm: SpacingMm, value: i16) -> Result<Self, VolumeError> {
        let n = shape.0 * shape.1 * shape.2;
        Self::from_data(shape, spacing_mm, vec![value; n])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn spacing_mm(&self) -> SpacingMm {
        self.spacing_mm
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i16] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, z: usize, r: usize, c: usize) -> usize {
        (z * self.shape.1 + r) * self.shape.2 + c
    }

    #[inline]
    pub fn get(&self, z: usize, r: usize, c: usize) -> i16 {
        self.data[self.index(z, r, c)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, r: usize, c: usize, v: i16) {
        let i = self.index(z, r, c);
        self.data[i] = v;
    }
}

/// A volume rescaled to `[0, 1]` by [`normalize_hu`]. Same grid and spacing
/// as its source.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedVolume {
    shape: Shape,
    spacing_mm: SpacingMm,
    data: Vec<f32>,
}

impl NormalizedVolume {
    pub fn from_data(
        shape: Shape,
        spacing_mm: SpacingMm,
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        check_shape_spacing(shape, spacing_mm)?;
        let expected = shape.0 * shape.1 * shape.2;
        if data.len() != expected {
            return Err(VolumeError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} voxels, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VolumeError::InvalidArgument(format!(
                "normalized voxel {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            shape,
            spacing_mm,
            data,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn spacing_mm(&self) -> SpacingMm {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, z: usize, r: usize, c: usize) -> f32 {
        self.data[(z * self.shape.1 + r) * self.shape.2 + c]
    }

    /// One slice as a read-only 2D view.
    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.shape.1 * self.shape.2;
        &self.data[z * n..(z + 1) * n]
    }
}

/// The HU window mapped onto `[0, 1]` by [`normalize_hu`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HuWindow {
    pub lo: i16,
    pub hi: i16,
}

impl Default for HuWindow {
    /// The lung window used throughout the pipeline.
    fn default() -> Self {
        Self { lo: -1000, hi: 400 }
    }
}

/// Clamps to `[lo, hi]` and rescales linearly so `lo` maps to 0 and `hi`
/// maps to 1. Requires `lo < hi`.
pub fn normalize_hu(vol: &CtVolume, window: HuWindow) -> Result<NormalizedVolume, VolumeError> {
    if window.lo >= window.hi {
        return Err(VolumeError::InvalidArgument(format!(
            "window lo {} must be below hi {}",
            window.lo, window.hi
        )));
    }
    let lo = window.lo as f32;
    let span = window.hi as f32 - lo;
    let data = vol
        .data
        .iter()
        .map(|&v| ((v as f32).clamp(lo, window.hi as f32) - lo) / span)
        .collect();
    NormalizedVolume::from_data(vol.shape, vol.spacing_mm, data)
}

/// A binary mask registered to a volume grid. Voxels are stored as 0/1 bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask3D {
    shape: Shape,
    spacing_mm: SpacingMm,
    data: Vec<u8>,
}

impl BinaryMask3D {
    pub fn empty(shape: Shape, spacing_mm: SpacingMm) -> Result<Self, VolumeError> {
        check_shape_spacing(shape, spacing_mm)?;
        let n = shape.0 * shape.1 * shape.2;
        Ok(Self {
            shape,
            spacing_mm,
            data: vec![0; n],
        })
    }

    pub fn from_data(
        shape: Shape,
        spacing_mm: SpacingMm,
        data: Vec<u8>,
    ) -> Result<Self, VolumeError> {
        check_shape_spacing(shape, spacing_mm)?;
        let expected = shape.0 * shape.1 * shape.2;
        if data.len() != expected {
            return Err(VolumeError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} voxels, got {}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(VolumeError::InvalidArgument(
                "mask voxels must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            shape,
            spacing_mm,
            data,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn spacing_mm(&self) -> SpacingMm {
        self.spacing_mm
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, z: usize, r: usize, c: usize) -> bool {
        self.data[(z * self.shape.1 + r) * self.shape.2 + c] != 0
    }

    #[inline]
    pub fn set(&mut self, z: usize, r: usize, c: usize, on: bool) {
        let i = (z * self.shape.1 + r) * self.shape.2 + c;
        self.data[i] = on as u8;
    }

    /// Number of foreground voxels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// One slice as a read-only 2D view.
    pub fn slice(&self, z: usize) -> MaskSlice<'_> {
        let n = self.shape.1 * self.shape.2;
        MaskSlice {
            rows: self.shape.1,
            cols: self.shape.2,
            data: &self.data[z * n..(z + 1) * n],
        }
    }

    /// Replaces slice `z` with the given foreground voxels, clearing the rest
    /// of the slice.
    pub fn write_slice(&mut self, z: usize, voxels: &[(usize, usize)]) {
        let n = self.shape.1 * self.shape.2;
        self.data[z * n..(z + 1) * n].fill(0);
        for &(r, c) in voxels {
            self.set(z, r, c, true);
        }
    }

    /// Foreground voxels in slice-major scan order.
    pub fn foreground(&self) -> Vec<VoxelIndex> {
        let mut out = Vec::new();
        for z in 0..self.shape.0 {
            for r in 0..self.shape.1 {
                for c in 0..self.shape.2 {
                    if self.get(z, r, c) {
                        out.push(VoxelIndex::new(z, r, c));
                    }
                }
            }
        }
        out
    }

    /// Slice indices that contain at least one foreground voxel.
    pub fn occupied_slices(&self) -> Vec<usize> {
        (0..self.shape.0)
            .filter(|&z| self.slice(z).data.iter().any(|&v| v != 0))
            .collect()
    }
}

/// Read-only 2D view over one mask slice.
#[derive(Debug, Clone, Copy)]
pub struct MaskSlice<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [u8],
}

impl<'a> MaskSlice<'a> {
    pub fn from_raw(rows: usize, cols: usize, data: &'a [u8]) -> Self {
        assert_eq!(data.len(), rows * cols, "slice data length");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Majority vote across rater masks: a voxel is foreground when at least
/// `ceil(n / 2)` of the `n` raters mark it, so an exact half counts in.
/// Requires at least two masks, all on the same grid.
pub fn consensus_mask(masks: &[BinaryMask3D]) -> Result<BinaryMask3D, VolumeError> {
    if masks.len() < 2 {
        return Err(VolumeError::InvalidArgument(format!(
            "consensus needs at least 2 masks, got {}",
            masks.len()
        )));
    }
    let shape = masks[0].shape;
    let spacing = masks[0].spacing_mm;
    for m in &masks[1..] {
        if m.shape != shape {
            return Err(VolumeError::ShapeMismatch(format!(
                "consensus input shapes differ: {:?} vs {shape:?}",
                m.shape
            )));
        }
    }
    let quorum = masks.len().div_ceil(2);
    let n = shape.0 * shape.1 * shape.2;
    let mut data = vec![0u8; n];
    for (i, out) in data.iter_mut().enumerate() {
        let votes = masks.iter().filter(|m| m.data[i] != 0).count();
        *out = (votes >= quorum) as u8;
    }
    BinaryMask3D::from_data(shape, spacing, data)
}

/// Foreground voxels with at least one background 4-neighbor; positions
/// outside the slice count as background. Returned in row-major scan order.
pub fn boundary_voxels_2d(slice: MaskSlice<'_>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..slice.rows {
        for c in 0..slice.cols {
            if !slice.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r == slice.rows - 1
                || c == slice.cols - 1
                || !slice.get(r - 1, c)
                || !slice.get(r + 1, c)
                || !slice.get(r, c - 1)
                || !slice.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// One 8-connected foreground component of a slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Region2d {
    /// Member voxels in row-major order.
    pub voxels: Vec<(usize, usize)>,
    /// Mean (row, col) of the members.
    pub centroid: (f64, f64),
}

impl Region2d {
    pub fn area(&self) -> usize {
        self.voxels.len()
    }

    /// Number of voxels shared with another voxel set.
    pub fn intersection_area(&self, other: &[(usize, usize)]) -> usize {
        let set: std::collections::HashSet<_> = other.iter().copied().collect();
        self.voxels.iter().filter(|v| set.contains(v)).count()
    }
}

/// 8-connected components of a slice, ordered by descending area, then by
/// centroid row, then centroid column.
pub fn connected_regions_2d(slice: MaskSlice<'_>) -> Vec<Region2d> {
    let mut seen = vec![false; slice.rows * slice.cols];
    let mut regions = Vec::new();
    for r0 in 0..slice.rows {
        for c0 in 0..slice.cols {
            if !slice.get(r0, c0) || seen[r0 * slice.cols + c0] {
                continue;
            }
            let mut voxels = Vec::new();
            let mut queue = std::collections::VecDeque::new();
            seen[r0 * slice.cols + c0] = true;
            queue.push_back((r0, c0));
            while let Some((r, c)) = queue.pop_front() {
                voxels.push((r, c));
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= slice.rows as i64 || nc >= slice.cols as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if slice.get(nr, nc) && !seen[nr * slice.cols + nc] {
                            seen[nr * slice.cols + nc] = true;
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            voxels.sort_unstable();
            let n = voxels.len() as f64;
            let centroid = (
                voxels.iter().map(|&(r, _)| r as f64).sum::<f64>() / n,
                voxels.iter().map(|&(_, c)| c as f64).sum::<f64>() / n,
            );
            regions.push(Region2d { voxels, centroid });
        }
    }
    regions.sort_by(|a, b| {
        b.area()
            .cmp(&a.area())
            .then(a.centroid.0.total_cmp(&b.centroid.0))
            .then(a.centroid.1.total_cmp(&b.centroid.1))
    });
    regions
}
