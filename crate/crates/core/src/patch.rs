//! Patch extraction around a voxel: a through-plane stack of neighboring
//! slices (multi-view) and a pyramid of in-plane crops rescaled to a common
//! size (multi-scale).
//!
//! Windows that run past the volume are filled by replicate padding, so a
//! patch is defined for every voxel of the volume. Crops are rescaled with
//! a not-a-knot cubic spline under the corner-aligned mapping
//! `src = dst * (n - 1) / (m - 1)`, which reproduces polynomials up to
//! degree 3 along each axis.

use crate::volume::{NormalizedVolume, VoxelIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("voxel {0:?} outside volume of shape {1:?}")]
    OutOfVolume(VoxelIndex, (usize, usize, usize)),
    #[error("invalid patch spec: {0}")]
    InvalidSpec(String),
}

/// Geometry of the extracted patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    /// Side of every patch channel; odd so the voxel sits on a unique
    /// center.
    pub view_size: usize,
    /// In-plane crop sides for the multi-scale channels, coarse to fine.
    /// The last one equals `view_size` and is passed through unscaled.
    pub scale_sizes: [usize; 3],
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            view_size: 35,
            scale_sizes: [65, 50, 35],
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<(), PatchError> {
        if self.view_size % 2 == 0 || self.view_size < 3 {
            return Err(PatchError::InvalidSpec(format!(
                "view size must be odd and at least 3, got {}",
                self.view_size
            )));
        }
        if !(self.scale_sizes[0] >= self.scale_sizes[1]
            && self.scale_sizes[1] >= self.scale_sizes[2])
        {
            return Err(PatchError::InvalidSpec(format!(
                "scale sizes must be descending, got {:?}",
                self.scale_sizes
            )));
        }
        if self.scale_sizes[2] != self.view_size {
            return Err(PatchError::InvalidSpec(format!(
                "finest scale {} must equal view size {}",
                self.scale_sizes[2], self.view_size
            )));
        }
        Ok(())
    }

    /// Center index of a patch channel, `(view_size - 1) / 2`.
    pub fn center(&self) -> usize {
        (self.view_size - 1) / 2
    }
}

/// Three same-sized channels stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchChannels {
    size: usize,
    data: Vec<f64>,
}

impl PatchChannels {
    fn new(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; 3 * size * size],
        }
    }

    /// Wraps raw channel-major values; `data` must hold `3 * size * size`.
    pub fn from_data(size: usize, data: Vec<f64>) -> Result<Self, PatchError> {
        if size == 0 || data.len() != 3 * size * size {
            return Err(PatchError::InvalidSpec(format!(
                "payload of {} values does not fill 3 channels of side {}",
                data.len(),
                size
            )));
        }
        Ok(Self { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Channel-major values, length `3 * size * size`.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, ch: usize, r: usize, c: usize) -> f64 {
        self.data[(ch * self.size + r) * self.size + c]
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.data[ch * n..(ch + 1) * n]
    }

    fn channel_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = self.size * self.size;
        &mut self.data[ch * n..(ch + 1) * n]
    }
}

/// Channels 0..=2 hold slices `z - 1`, `z`, `z + 1` over one in-plane
/// window, replicated at volume ends.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewPatch(pub PatchChannels);

/// Channels 0..=2 hold the coarse-to-fine in-plane crops of slice `z`,
/// each rescaled to the view size.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScalePatch(pub PatchChannels);

fn check_voxel(vol: &NormalizedVolume, voxel: VoxelIndex) -> Result<(), PatchError> {
    let shape = vol.shape();
    if voxel.slice >= shape.0 || voxel.row >= shape.1 || voxel.col >= shape.2 {
        return Err(PatchError::OutOfVolume(voxel, shape));
    }
    Ok(())
}

#[inline]
fn clamp_idx(v: i64, len: usize) -> usize {
    v.clamp(0, len as i64 - 1) as usize
}

/// Copies a `side`-sized window of slice `z` centered on `(row, col)` with
/// replicate padding. The center convention puts the voxel at index
/// `(side - 1) / 2` along each axis, so even windows extend one voxel
/// further on the high side.
fn crop_slice(vol: &NormalizedVolume, z: usize, row: usize, col: usize, side: usize) -> Vec<f64> {
    let (_, rows, cols) = vol.shape();
    let slice = vol.slice(z);
    let half = (side as i64 - 1) / 2;
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side as i64 {
        let r = clamp_idx(row as i64 - half + i, rows);
        for j in 0..side as i64 {
            let c = clamp_idx(col as i64 - half + j, cols);
            out.push(slice[r * cols + c] as f64);
        }
    }
    out
}

/// Extracts the three-slice stack around a voxel.
pub fn extract_multiview(
    vol: &NormalizedVolume,
    voxel: VoxelIndex,
    spec: &PatchSpec,
) -> Result<MultiViewPatch, PatchError> {
    spec.validate()?;
    check_voxel(vol, voxel)?;
    let slices = vol.shape().0;
    let mut patch = PatchChannels::new(spec.view_size);
    for (ch, dz) in (-1i64..=1).enumerate() {
        let z = clamp_idx(voxel.slice as i64 + dz, slices);
        let window = crop_slice(vol, z, voxel.row, voxel.col, spec.view_size);
        patch.channel_mut(ch).copy_from_slice(&window);
    }
    Ok(MultiViewPatch(patch))
}

/// Extracts the crop pyramid around a voxel and rescales every crop to the
/// view size. Values are clamped back to `[0, 1]` because spline
/// resampling can overshoot.
pub fn extract_multiscale(
    vol: &NormalizedVolume,
    voxel: VoxelIndex,
    spec: &PatchSpec,
) -> Result<MultiScalePatch, PatchError> {
    spec.validate()?;
    check_voxel(vol, voxel)?;
    let mut patch = PatchChannels::new(spec.view_size);
    for (ch, &side) in spec.scale_sizes.iter().enumerate() {
        let crop = crop_slice(vol, voxel.slice, voxel.row, voxel.col, side);
        let scaled = rescale_2d(&crop, side, spec.view_size)
            .map_err(|e| PatchError::InvalidSpec(e.to_string()))?;
        let out = patch.channel_mut(ch);
        for (dst, v) in out.iter_mut().zip(scaled) {
            *dst = v.clamp(0.0, 1.0);
        }
    }
    Ok(MultiScalePatch(patch))
}

/// Both patches for one voxel.
pub fn extract_pair(
    vol: &NormalizedVolume,
    voxel: VoxelIndex,
    spec: &PatchSpec,
) -> Result<(MultiViewPatch, MultiScalePatch), PatchError> {
    Ok((
        extract_multiview(vol, voxel, spec)?,
        extract_multiscale(vol, voxel, spec)?,
    ))
}

/// Resamples a square `n x n` grid to `m x m` with a separable not-a-knot
/// cubic spline under the corner-aligned mapping
/// `src = dst * (n - 1) / (m - 1)`. When `m == n` the input is returned
/// unchanged.
pub fn rescale_2d(src: &[f64], n: usize, m: usize) -> Result<Vec<f64>, PatchError> {
    if src.len() != n * n {
        return Err(PatchError::InvalidSpec(format!(
            "source length {} does not match side {n}",
            src.len()
        )));
    }
    if n == 0 || m < 2 {
        return Err(PatchError::InvalidSpec(format!(
            "need source side > 0 and target side >= 2, got {n} -> {m}"
        )));
    }
    if m == n {
        return Ok(src.to_vec());
    }
    // Rows first: n rows of length n become n rows of length m.
    let mut mid = vec![0.0; n * m];
    let mut row_buf = vec![0.0; n];
    for r in 0..n {
        row_buf.copy_from_slice(&src[r * n..(r + 1) * n]);
        let resampled = spline_resample(&row_buf, m);
        mid[r * m..(r + 1) * m].copy_from_slice(&resampled);
    }
    // Then columns.
    let mut out = vec![0.0; m * m];
    let mut col_buf = vec![0.0; n];
    for c in 0..m {
        for r in 0..n {
            col_buf[r] = mid[r * m + c];
        }
        let resampled = spline_resample(&col_buf, m);
        for r in 0..m {
            out[r * m + c] = resampled[r];
        }
    }
    Ok(out)
}

/// Resamples `y` (knots at 0..n-1) onto `m` corner-aligned positions.
fn spline_resample(y: &[f64], m: usize) -> Vec<f64> {
    let n = y.len();
    let step = (n as f64 - 1.0) / (m as f64 - 1.0);
    match n {
        1 => vec![y[0]; m],
        2 => (0..m)
            .map(|j| {
                let t = j as f64 * step;
                y[0] * (1.0 - t) + y[1] * t
            })
            .collect(),
        3 => {
            // Unique parabola through the three knots.
            (0..m)
                .map(|j| {
                    let t = j as f64 * step;
                    y[0] * (t - 1.0) * (t - 2.0) / 2.0 - y[1] * t * (t - 2.0)
                        + y[2] * t * (t - 1.0) / 2.0
                })
                .collect()
        }
        _ => {
            let m2 = second_derivatives_not_a_knot(y);
            (0..m)
                .map(|j| {
                    let t = j as f64 * step;
                    let i = (t.floor() as usize).min(n - 2);
                    let s = t - i as f64;
                    let u = 1.0 - s;
                    y[i] * u
                        + y[i + 1] * s
                        + m2[i] / 6.0 * (u * u * u - u)
                        + m2[i + 1] / 6.0 * (s * s * s - s)
                })
                .collect()
        }
    }
}

/// Second derivatives of the not-a-knot cubic spline on a unit grid,
/// `n >= 4`. Not-a-knot forces a single cubic across the first two and the
/// last two intervals, which collapses the boundary equations to
/// `6 * m[1] = r[1]` and `6 * m[n-2] = r[n-2]`; the rest is a standard
/// tridiagonal solve.
fn second_derivatives_not_a_knot(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let r = |i: usize| 6.0 * (y[i + 1] - 2.0 * y[i] + y[i - 1]);
    let mut m = vec![0.0; n];
    m[1] = r(1) / 6.0;
    m[n - 2] = r(n - 2) / 6.0;
    let unknowns = n - 4;
    if unknowns > 0 {
        // Thomas algorithm over m[2..=n-3].
        let mut diag = vec![4.0; unknowns];
        let mut rhs: Vec<f64> = (2..n - 2).map(|i| r(i)).collect();
        rhs[0] -= m[1];
        rhs[unknowns - 1] -= m[n - 2];
        for i in 1..unknowns {
            let w = 1.0 / diag[i - 1];
            diag[i] -= w;
            rhs[i] -= w * rhs[i - 1];
        }
        m[n - 3] = rhs[unknowns - 1] / diag[unknowns - 1];
        for i in (0..unknowns - 1).rev() {
            m[i + 2] = (rhs[i] - m[i + 3]) / diag[i];
        }
    }
    m[0] = 2.0 * m[1] - m[2];
    m[n - 1] = 2.0 * m[n - 2] - m[n - 3];
    m
}
