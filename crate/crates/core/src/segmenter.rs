//! Semi-automatic inference: classify every voxel of a seed box on one
//! slice, keep a single connected region per slice, and propagate the same
//! box to neighboring slices until the overlap with the previously accepted
//! slice falls below the stop ratio.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::scalar::Scalar;
use crate::net::tensor::Tensor;
use crate::net::{DbResNet, NetError};
use crate::patch::{extract_pair, PatchError, PatchSpec};
use crate::volume::{
    connected_regions_2d, BinaryMask3D, MaskSlice, NormalizedVolume, Region2d, VolumeError,
    VoxelIndex,
};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("invalid seed box: {0}")]
    Seed(String),
    #[error("invalid propagation config: {0}")]
    Config(String),
    #[error("mask has no foreground, no region to select")]
    EmptyMask,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// A starting slice plus an inclusive 2D bounding box, both in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedBox {
    pub slice: usize,
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl SeedBox {
    pub fn validate(&self, shape: (usize, usize, usize)) -> Result<(), SegmentError> {
        if self.row_min > self.row_max || self.col_min > self.col_max {
            return Err(SegmentError::Seed(format!(
                "degenerate box rows {}..={} cols {}..={}",
                self.row_min, self.row_max, self.col_min, self.col_max
            )));
        }
        if self.slice >= shape.0 || self.row_max >= shape.1 || self.col_max >= shape.2 {
            return Err(SegmentError::Seed(format!(
                "box {self:?} outside volume of shape {shape:?}"
            )));
        }
        Ok(())
    }

    /// `(row, col)` center of the box.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.row_min + self.row_max) as f64 / 2.0,
            (self.col_min + self.col_max) as f64 / 2.0,
        )
    }

    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row_min..=self.row_max).contains(&r) && (self.col_min..=self.col_max).contains(&c)
    }

    /// Box voxels in row-major order.
    pub fn voxels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.area());
        for r in self.row_min..=self.row_max {
            for c in self.col_min..=self.col_max {
                out.push((r, c));
            }
        }
        out
    }
}

impl fmt::Display for SeedBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.slice, self.row_min, self.col_min, self.row_max, self.col_max
        )
    }
}

impl FromStr for SeedBox {
    type Err = SegmentError;

    /// Parses `slice,row_min,col_min,row_max,col_max`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<_> = s.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(SegmentError::Seed(format!(
                "expected slice,row_min,col_min,row_max,col_max, got {s:?}"
            )));
        }
        let mut v = [0usize; 5];
        for (dst, part) in v.iter_mut().zip(&parts) {
            *dst = part
                .parse()
                .map_err(|e| SegmentError::Seed(format!("bad component {part:?}: {e}")))?;
        }
        Ok(Self {
            slice: v[0],
            row_min: v[1],
            col_min: v[2],
            row_max: v[3],
            col_max: v[4],
        })
    }
}

/// Propagation knobs. `threshold` cuts the per-voxel probability;
/// `stop_ratio` is the fraction of the previous slice's area below which a
/// direction stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationConfig {
    pub threshold: f64,
    pub stop_ratio: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            stop_ratio: 0.30,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<(), SegmentError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(SegmentError::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.stop_ratio) {
            return Err(SegmentError::Config(format!(
                "stop_ratio {} outside [0, 1]",
                self.stop_ratio
            )));
        }
        Ok(())
    }
}

/// Owned single-slice binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceMaskBuf {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl SliceMaskBuf {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_voxels(rows: usize, cols: usize, voxels: &[(usize, usize)]) -> Self {
        let mut m = Self::empty(rows, cols);
        for &(r, c) in voxels {
            m.set(r, c, true);
        }
        m
    }

    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.data[r * self.cols + c] = on as u8;
    }

    pub fn view(&self) -> MaskSlice<'_> {
        MaskSlice::from_raw(self.rows, self.cols, &self.data)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Produces the nodule probability for each listed voxel of one slice.
pub trait SliceClassifier {
    fn probabilities(
        &mut self,
        vol: &NormalizedVolume,
        slice: usize,
        voxels: &[(usize, usize)],
    ) -> Result<Vec<f64>, SegmentError>;
}

/// [`SliceClassifier`] backed by a trained network: extracts the patch pair
/// for every voxel and runs batched inference-mode forwards.
pub struct NetworkClassifier<'a, S: Scalar> {
    net: &'a mut DbResNet<S>,
    spec: PatchSpec,
    batch_size: usize,
}

impl<'a, S: Scalar> NetworkClassifier<'a, S> {
    pub fn new(
        net: &'a mut DbResNet<S>,
        spec: PatchSpec,
        batch_size: usize,
    ) -> Result<Self, SegmentError> {
        spec.validate()?;
        if spec.view_size != net.config.input_size {
            return Err(SegmentError::Config(format!(
                "patch side {} does not match network input {}",
                spec.view_size, net.config.input_size
            )));
        }
        Ok(Self {
            net,
            spec,
            batch_size: batch_size.max(1),
        })
    }
}

impl<S: Scalar> SliceClassifier for NetworkClassifier<'_, S> {
    fn probabilities(
        &mut self,
        vol: &NormalizedVolume,
        slice: usize,
        voxels: &[(usize, usize)],
    ) -> Result<Vec<f64>, SegmentError> {
        let size = self.spec.view_size;
        let mut out = Vec::with_capacity(voxels.len());
        for chunk in voxels.chunks(self.batch_size) {
            let n = chunk.len();
            let mut a = Tensor::zeros(n, 3, size, size);
            let mut b = Tensor::zeros(n, 3, size, size);
            for (s, &(r, c)) in chunk.iter().enumerate() {
                let (mv, ms) = extract_pair(vol, VoxelIndex::new(slice, r, c), &self.spec)?;
                for (dst, &v) in a.sample_mut(s).iter_mut().zip(mv.0.data()) {
                    *dst = S::from_f64(v);
                }
                for (dst, &v) in b.sample_mut(s).iter_mut().zip(ms.0.data()) {
                    *dst = S::from_f64(v);
                }
            }
            let probs = self.net.forward(&a, &b, false)?;
            out.extend((0..n).map(|s| probs[s * 2 + 1].to_f64()));
        }
        Ok(out)
    }
}

/// Probabilities and thresholded mask of one slice's box window.
#[derive(Debug, Clone)]
pub struct SliceClassification {
    /// One probability per box voxel, row-major over the box.
    pub probabilities: Vec<f64>,
    /// Foreground = probability >= threshold; covers the full slice grid but
    /// is nonzero only inside the box.
    pub mask: SliceMaskBuf,
}

/// Classifies every voxel of `seed_box` on slice `slice`.
pub fn classify_slice(
    classifier: &mut dyn SliceClassifier,
    vol: &NormalizedVolume,
    slice: usize,
    seed_box: &SeedBox,
    threshold: f64,
) -> Result<SliceClassification, SegmentError> {
    let shape = vol.shape();
    SeedBox { slice, ..*seed_box }.validate(shape)?;
    let voxels = seed_box.voxels();
    let probabilities = classifier.probabilities(vol, slice, &voxels)?;
    if probabilities.len() != voxels.len() {
        return Err(SegmentError::Config(format!(
            "classifier returned {} probabilities for {} voxels",
            probabilities.len(),
            voxels.len()
        )));
    }
    let mut mask = SliceMaskBuf::empty(shape.1, shape.2);
    for (&(r, c), &p) in voxels.iter().zip(&probabilities) {
        if p >= threshold {
            mask.set(r, c, true);
        }
    }
    Ok(SliceClassification {
        probabilities,
        mask,
    })
}

/// Scan-order key of a region: its first voxel in row-major order.
fn scan_key(region: &Region2d, cols: usize) -> usize {
    let (r, c) = region.voxels[0];
    r * cols + c
}

fn pick_by_distance(regions: Vec<Region2d>, center: (f64, f64), cols: usize) -> Region2d {
    regions
        .into_iter()
        .min_by(|a, b| {
            let d = |reg: &Region2d| {
                let (r, c) = reg.centroid;
                (r - center.0).powi(2) + (c - center.1).powi(2)
            };
            d(a).partial_cmp(&d(b))
                .unwrap()
                .then(b.area().cmp(&a.area()))
                .then(scan_key(a, cols).cmp(&scan_key(b, cols)))
        })
        .unwrap()
}

/// The connected region whose centroid lies closest to the box center;
/// ties go to the larger region, then to scan order.
pub fn select_region_start(
    mask: MaskSlice<'_>,
    seed_box: &SeedBox,
) -> Result<Region2d, SegmentError> {
    let regions = connected_regions_2d(mask);
    if regions.is_empty() {
        return Err(SegmentError::EmptyMask);
    }
    let cols = mask.cols;
    Ok(pick_by_distance(regions, seed_box.center(), cols))
}

fn jaccard(region: &Region2d, prev: MaskSlice<'_>, prev_area: usize) -> f64 {
    let inter = region
        .voxels
        .iter()
        .filter(|&&(r, c)| prev.get(r, c))
        .count();
    let union = region.area() + prev_area - inter;
    inter as f64 / union as f64
}

/// The connected region with the largest Jaccard overlap against the
/// previous slice's mask; ties go to the larger region, then to scan order.
/// When no region overlaps at all, falls back to the box-center rule.
pub fn select_region_follow(
    mask: MaskSlice<'_>,
    prev: MaskSlice<'_>,
    seed_box: &SeedBox,
) -> Result<Region2d, SegmentError> {
    let regions = connected_regions_2d(mask);
    if regions.is_empty() {
        return Err(SegmentError::EmptyMask);
    }
    let prev_area = prev.count();
    let cols = mask.cols;
    let best = regions
        .into_iter()
        .max_by(|a, b| {
            jaccard(a, prev, prev_area)
                .partial_cmp(&jaccard(b, prev, prev_area))
                .unwrap()
                .then(a.area().cmp(&b.area()))
                .then(scan_key(b, cols).cmp(&scan_key(a, cols)))
        })
        .unwrap();
    if jaccard(&best, prev, prev_area) == 0.0 {
        return select_region_start(mask, seed_box);
    }
    Ok(best)
}

/// Why one propagation direction (or the whole run) ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Reached the first or last slice of the volume.
    VolumeEdge,
    /// Thresholding produced no foreground in the box.
    EmptyMask,
    /// Intersection with the previous slice fell below the stop ratio.
    LowOverlap,
    /// The starting slice itself had no foreground.
    EmptyStart,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StopReason::VolumeEdge => "volume-edge",
            StopReason::EmptyMask => "empty-mask",
            StopReason::LowOverlap => "low-overlap",
            StopReason::EmptyStart => "empty-start",
        };
        f.write_str(s)
    }
}

/// One visited slice. `overlap_ratio` is the intersection with the
/// previously accepted slice divided by that slice's area; the starting
/// slice reports 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub slice: usize,
    pub area: usize,
    pub overlap_ratio: f64,
    pub accepted: bool,
}

/// Full record of a propagation run, ordered by slice index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationTrace {
    pub seed: SeedBox,
    pub threshold: f64,
    pub stop_ratio: f64,
    pub steps: Vec<TraceStep>,
    /// Stop reason walking toward slice 0.
    pub stop_backward: StopReason,
    /// Stop reason walking toward the last slice.
    pub stop_forward: StopReason,
}

#[derive(Debug)]
pub struct SegmentationResult {
    pub mask: BinaryMask3D,
    pub trace: PropagationTrace,
}

impl SegmentationResult {
    /// Slices that contributed foreground, ascending.
    pub fn accepted_slices(&self) -> Vec<usize> {
        self.trace
            .steps
            .iter()
            .filter(|s| s.accepted)
            .map(|s| s.slice)
            .collect()
    }
}

struct Walk<'a> {
    vol: &'a NormalizedVolume,
    seed: &'a SeedBox,
    cfg: &'a PropagationConfig,
    mask: BinaryMask3D,
    steps: Vec<TraceStep>,
}

impl Walk<'_> {
    /// Visits slices in iterator order, accepting while the overlap rule
    /// holds. `prev` starts as the accepted starting-slice region.
    fn run(
        &mut self,
        classifier: &mut dyn SliceClassifier,
        slices: impl Iterator<Item = usize>,
        mut prev: SliceMaskBuf,
        mut prev_area: usize,
    ) -> Result<StopReason, SegmentError> {
        let (_, rows, cols) = self.vol.shape();
        for z in slices {
            let c = classify_slice(classifier, self.vol, z, self.seed, self.cfg.threshold)?;
            if c.mask.count() == 0 {
                self.steps.push(TraceStep {
                    slice: z,
                    area: 0,
                    overlap_ratio: 0.0,
                    accepted: false,
                });
                return Ok(StopReason::EmptyMask);
            }
            let region = select_region_follow(c.mask.view(), prev.view(), self.seed)?;
            let inter = region
                .voxels
                .iter()
                .filter(|&&(r, c)| prev.view().get(r, c))
                .count();
            let ratio = inter as f64 / prev_area as f64;
            if (inter as f64) < self.cfg.stop_ratio * prev_area as f64 {
                self.steps.push(TraceStep {
                    slice: z,
                    area: region.area(),
                    overlap_ratio: ratio,
                    accepted: false,
                });
                return Ok(StopReason::LowOverlap);
            }
            self.mask.write_slice(z, &region.voxels);
            self.steps.push(TraceStep {
                slice: z,
                area: region.area(),
                overlap_ratio: ratio,
                accepted: true,
            });
            prev_area = region.area();
            prev = SliceMaskBuf::from_voxels(rows, cols, &region.voxels);
        }
        Ok(StopReason::VolumeEdge)
    }
}

/// Segments the starting slice, then walks outward in both z-directions
/// applying the same box. A direction stops at the volume edge, on an empty
/// mask, or when the intersection with the previously accepted slice drops
/// strictly below `stop_ratio` times that slice's area; the failing slice
/// is excluded.
pub fn propagate(
    classifier: &mut dyn SliceClassifier,
    vol: &NormalizedVolume,
    seed: &SeedBox,
    cfg: &PropagationConfig,
) -> Result<SegmentationResult, SegmentError> {
    cfg.validate()?;
    seed.validate(vol.shape())?;
    let (slices, rows, cols) = vol.shape();
    let empty_trace = |steps| PropagationTrace {
        seed: *seed,
        threshold: cfg.threshold,
        stop_ratio: cfg.stop_ratio,
        steps,
        stop_backward: StopReason::EmptyStart,
        stop_forward: StopReason::EmptyStart,
    };

    let start = classify_slice(classifier, vol, seed.slice, seed, cfg.threshold)?;
    if start.mask.count() == 0 {
        let steps = vec![TraceStep {
            slice: seed.slice,
            area: 0,
            overlap_ratio: 0.0,
            accepted: false,
        }];
        return Ok(SegmentationResult {
            mask: BinaryMask3D::empty(vol.shape(), vol.spacing_mm())?,
            trace: empty_trace(steps),
        });
    }
    let start_region = select_region_start(start.mask.view(), seed)?;
    let start_mask = SliceMaskBuf::from_voxels(rows, cols, &start_region.voxels);
    let start_area = start_region.area();

    let mut walk = Walk {
        vol,
        seed,
        cfg,
        mask: BinaryMask3D::empty(vol.shape(), vol.spacing_mm())?,
        steps: vec![TraceStep {
            slice: seed.slice,
            area: start_area,
            overlap_ratio: 1.0,
            accepted: true,
        }],
    };
    walk.mask.write_slice(seed.slice, &start_region.voxels);

    let stop_forward = walk.run(
        classifier,
        seed.slice + 1..slices,
        start_mask.clone(),
        start_area,
    )?;
    let stop_backward = walk.run(classifier, (0..seed.slice).rev(), start_mask, start_area)?;
    walk.steps.sort_by_key(|s| s.slice);

    Ok(SegmentationResult {
        mask: walk.mask,
        trace: PropagationTrace {
            seed: *seed,
            threshold: cfg.threshold,
            stop_ratio: cfg.stop_ratio,
            steps: walk.steps,
            stop_backward,
            stop_forward,
        },
    })
}
