//! Boundary-weighted training sample planning.
//!
//! Voxel classification around nodules is extremely imbalanced: a nodule of
//! radius `r` voxels occupies `pi * r^2` of a slice of area `S`, roughly
//! 1:370 for common scan geometry. Planning therefore samples, per slice,
//! every nodule boundary voxel plus an equal number of interior voxels
//! (capped by the interior size), and pairs them with the same number of
//! background voxels, half drawn from a band hugging the boundary and half
//! from the rest of the slice. Nodules under a diameter threshold are taken
//! whole.

use crate::util::fnv1a64 as fnv1a;
use crate::volume::{boundary_voxels_2d, BinaryMask3D, MaskSlice, VoxelIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("slice area {area} does not exceed nodule area {nodule_area}")]
    ImbalanceDomain { area: f64, nodule_area: f64 },
    #[error("i/o on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
}

/// How nodule-labeled voxels are chosen on a slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SamplingStrategy {
    /// All boundary voxels plus an equal number of interior voxels.
    BoundaryWeighted,
    /// A flat fraction of the foreground, kept as a comparison mode for
    /// ablation runs.
    UniformFraction { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Nodules thinner than this are sampled whole.
    pub small_diameter_mm: f64,
    /// Width of the near-background band outside the boundary, in voxels.
    pub band_voxels: f64,
    /// Fraction of background samples drawn from the band; the rest come
    /// from the remaining slice.
    pub near_fraction: f64,
    pub seed: u64,
    /// Cap on the total manifest size; `None` keeps every planned sample.
    pub max_total_samples: Option<usize>,
    pub strategy: SamplingStrategy,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            small_diameter_mm: 6.0,
            band_voxels: 10.0,
            near_fraction: 0.5,
            seed: 0,
            max_total_samples: None,
            strategy: SamplingStrategy::BoundaryWeighted,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.small_diameter_mm > 0.0) {
            return Err(SamplerError::InvalidConfig(format!(
                "small-nodule diameter must be positive, got {}",
                self.small_diameter_mm
            )));
        }
        if !(self.band_voxels >= 1.0) {
            return Err(SamplerError::InvalidConfig(format!(
                "band width must be at least 1 voxel, got {}",
                self.band_voxels
            )));
        }
        if !(0.0..=1.0).contains(&self.near_fraction) {
            return Err(SamplerError::InvalidConfig(format!(
                "near fraction must lie in [0, 1], got {}",
                self.near_fraction
            )));
        }
        if let SamplingStrategy::UniformFraction { fraction } = self.strategy {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(SamplerError::InvalidConfig(format!(
                    "uniform fraction must lie in (0, 1], got {fraction}"
                )));
            }
        }
        Ok(())
    }
}

/// Nodule-to-background voxel ratio on a slice: `(S - pi r^2) / (pi r^2)`.
/// Requires the slice area to exceed the nodule area.
pub fn estimate_imbalance(r: f64, s: f64) -> Result<f64, SamplerError> {
    let nodule_area = std::f64::consts::PI * r * r;
    if !(r > 0.0) || s <= nodule_area {
        return Err(SamplerError::ImbalanceDomain {
            area: s,
            nodule_area,
        });
    }
    Ok((s - nodule_area) / nodule_area)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleLabel {
    Background,
    Nodule,
}

impl SampleLabel {
    pub fn as_index(self) -> usize {
        match self {
            SampleLabel::Background => 0,
            SampleLabel::Nodule => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleTag {
    Boundary,
    Interior,
    Near,
    Far,
}

impl fmt::Display for SampleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SampleTag::Boundary => "boundary",
            SampleTag::Interior => "interior",
            SampleTag::Near => "near",
            SampleTag::Far => "far",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub volume_id: String,
    pub voxel: VoxelIndex,
    pub label: SampleLabel,
    pub tag: SampleTag,
}

/// The planned training set: one entry per (volume, voxel) pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleManifest {
    pub entries: Vec<ManifestEntry>,
}

impl SampleManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let nodule = self
            .entries
            .iter()
            .filter(|e| e.label == SampleLabel::Nodule)
            .count();
        (nodule, self.entries.len() - nodule)
    }

    /// One line per sample: `volume_id z y x label tag`.
    pub fn save(&self, path: &Path) -> Result<(), SamplerError> {
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.volume_id,
                e.voxel.slice,
                e.voxel.row,
                e.voxel.col,
                e.label.as_index(),
                e.tag
            ));
        }
        std::fs::write(path, text).map_err(|source| SamplerError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SamplerError> {
        let text = std::fs::read_to_string(path).map_err(|source| SamplerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| SamplerError::MalformedManifest {
                line: i + 1,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(bad("expected 6 tab-separated fields"));
            }
            let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
            let label = match fields[4] {
                "0" => SampleLabel::Background,
                "1" => SampleLabel::Nodule,
                _ => return Err(bad("label must be 0 or 1")),
            };
            let tag = match fields[5] {
                "boundary" => SampleTag::Boundary,
                "interior" => SampleTag::Interior,
                "near" => SampleTag::Near,
                "far" => SampleTag::Far,
                _ => return Err(bad("unknown tag")),
            };
            entries.push(ManifestEntry {
                volume_id: fields[0].to_string(),
                voxel: VoxelIndex::new(parse(fields[1])?, parse(fields[2])?, parse(fields[3])?),
                label,
                tag,
            });
        }
        Ok(Self { entries })
    }
}

/// One nodule to plan samples for.
pub struct SamplingCase<'a> {
    pub volume_id: String,
    pub mask: &'a BinaryMask3D,
    pub diameter_mm: f64,
}

/// Outcome of planning: the manifest plus the slices whose background pool
/// could not cover the request.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub manifest: SampleManifest,
    pub short_background: Vec<(String, usize)>,
}

/// Draws `k` distinct elements by partial Fisher-Yates shuffle.
fn draw<T: Copy>(pool: &mut [T], k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let k = k.min(pool.len());
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool[..k].to_vec()
}

/// Plans one slice. Returns the entries and whether the background pool ran
/// short (in which case everything available was taken).
pub fn plan_slice_samples(
    volume_id: &str,
    slice: MaskSlice<'_>,
    slice_index: usize,
    diameter_mm: f64,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<ManifestEntry>, bool) {
    let boundary = boundary_voxels_2d(slice);
    if boundary.is_empty() {
        return (Vec::new(), false);
    }
    let boundary_set: std::collections::HashSet<(usize, usize)> =
        boundary.iter().copied().collect();
    let mut foreground = Vec::new();
    let mut interior = Vec::new();
    for r in 0..slice.rows {
        for c in 0..slice.cols {
            if slice.get(r, c) {
                foreground.push((r, c));
                if !boundary_set.contains(&(r, c)) {
                    interior.push((r, c));
                }
            }
        }
    }

    let mut entries = Vec::new();
    fn push(
        entries: &mut Vec<ManifestEntry>,
        volume_id: &str,
        slice_index: usize,
        voxels: &[(usize, usize)],
        label: SampleLabel,
        tag: SampleTag,
    ) {
        for &(r, c) in voxels {
            entries.push(ManifestEntry {
                volume_id: volume_id.to_string(),
                voxel: VoxelIndex::new(slice_index, r, c),
                label,
                tag,
            });
        }
    }

    let small = diameter_mm < cfg.small_diameter_mm;
    match cfg.strategy {
        _ if small => {
            // Sub-threshold nodule: take every foreground voxel.
            for &(r, c) in &foreground {
                let tag = if boundary_set.contains(&(r, c)) {
                    SampleTag::Boundary
                } else {
                    SampleTag::Interior
                };
                push(&mut entries, volume_id, slice_index, &[(r, c)], SampleLabel::Nodule, tag);
            }
        }
        SamplingStrategy::BoundaryWeighted => {
            push(&mut entries, volume_id, slice_index, &boundary, SampleLabel::Nodule, SampleTag::Boundary);
            let fill = boundary.len().min(interior.len());
            let picked = draw(&mut interior, fill, rng);
            push(&mut entries, volume_id, slice_index, &picked, SampleLabel::Nodule, SampleTag::Interior);
        }
        SamplingStrategy::UniformFraction { fraction } => {
            let count = ((foreground.len() as f64 * fraction).round() as usize)
                .clamp(1, foreground.len());
            let picked = draw(&mut foreground.clone(), count, rng);
            for &(r, c) in &picked {
                let tag = if boundary_set.contains(&(r, c)) {
                    SampleTag::Boundary
                } else {
                    SampleTag::Interior
                };
                push(&mut entries, volume_id, slice_index, &[(r, c)], SampleLabel::Nodule, tag);
            }
        }
    }
    let nodule_count = entries.len();

    // Background pools: the band hugging the boundary, and everything else.
    let band_sq = cfg.band_voxels * cfg.band_voxels;
    let mut near = Vec::new();
    let mut far = Vec::new();
    for r in 0..slice.rows {
        for c in 0..slice.cols {
            if slice.get(r, c) {
                continue;
            }
            let mut in_band = false;
            for &(br, bc) in &boundary {
                let dr = r as f64 - br as f64;
                let dc = c as f64 - bc as f64;
                if dr * dr + dc * dc <= band_sq {
                    in_band = true;
                    break;
                }
            }
            if in_band {
                near.push((r, c));
            } else {
                far.push((r, c));
            }
        }
    }

    let near_want = (nodule_count as f64 * cfg.near_fraction).round() as usize;
    let far_want = nodule_count - near_want.min(nodule_count);
    let mut near_take = near_want.min(near.len());
    let mut far_take = far_want.min(far.len());
    // Pools backfill each other before the plan is declared short.
    far_take = (far_take + (near_want - near_take)).min(far.len());
    near_take = (near_take + (far_want + near_want - near_take - far_take)).min(near.len());
    let short = near_take + far_take < nodule_count;

    let picked_near = draw(&mut near, near_take, rng);
    push(&mut entries, volume_id, slice_index, &picked_near, SampleLabel::Background, SampleTag::Near);
    let picked_far = draw(&mut far, far_take, rng);
    push(&mut entries, volume_id, slice_index, &picked_far, SampleLabel::Background, SampleTag::Far);

    (entries, short)
}

fn slice_rng(cfg_seed: u64, volume_id: &str, slice: usize) -> ChaCha8Rng {
    let h = fnv1a(volume_id.as_bytes()) ^ (slice as u64).wrapping_mul(0x9e3779b97f4a7c15);
    ChaCha8Rng::seed_from_u64(cfg_seed ^ h)
}

/// Plans the whole dataset: per-slice plans concatenated in
/// (volume, slice, row, col) order, then stratified down to the sample cap
/// while keeping exact label balance and per-volume proportions.
pub fn plan_dataset(cases: &[SamplingCase<'_>], cfg: &SamplerConfig) -> Result<PlanOutcome, SamplerError> {
    cfg.validate()?;
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut short_background = Vec::new();
    for case in cases {
        for z in case.mask.occupied_slices() {
            let mut rng = slice_rng(cfg.seed, &case.volume_id, z);
            let (slice_entries, short) = plan_slice_samples(
                &case.volume_id,
                case.mask.slice(z),
                z,
                case.diameter_mm,
                cfg,
                &mut rng,
            );
            if short {
                short_background.push((case.volume_id.clone(), z));
            }
            entries.extend(slice_entries);
        }
    }
    entries.sort_by(|a, b| {
        (&a.volume_id, a.voxel.slice, a.voxel.row, a.voxel.col).cmp(&(
            &b.volume_id,
            b.voxel.slice,
            b.voxel.row,
            b.voxel.col,
        ))
    });

    if let Some(cap) = cfg.max_total_samples {
        if entries.len() > cap {
            entries = downsample(entries, cap, cfg.seed);
        }
    }
    Ok(PlanOutcome {
        manifest: SampleManifest { entries },
        short_background,
    })
}

/// Keeps `cap / 2` entries of each label, apportioning per-volume quotas by
/// largest remainder so every volume keeps within one sample of its exact
/// proportional share.
fn downsample(entries: Vec<ManifestEntry>, cap: usize, seed: u64) -> Vec<ManifestEntry> {
    let per_label = cap / 2;
    let mut by_volume: BTreeMap<String, [Vec<ManifestEntry>; 2]> = BTreeMap::new();
    for e in entries {
        let bucket = by_volume.entry(e.volume_id.clone()).or_default();
        bucket[e.label.as_index()].push(e);
    }

    let mut kept = Vec::new();
    for label in [SampleLabel::Background, SampleLabel::Nodule] {
        let idx = label.as_index();
        let total: usize = by_volume.values().map(|b| b[idx].len()).sum();
        let target = per_label.min(total);
        // Largest-remainder apportionment over volumes (BTreeMap order).
        let mut quotas: Vec<(String, usize, f64)> = by_volume
            .iter()
            .map(|(id, b)| {
                let exact = b[idx].len() as f64 * target as f64 / total as f64;
                (id.clone(), exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let assigned: usize = quotas.iter().map(|q| q.1).sum();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| {
            quotas[b]
                .2
                .partial_cmp(&quotas[a].2)
                .unwrap()
                .then(quotas[a].0.cmp(&quotas[b].0))
        });
        for &i in order.iter().take(target - assigned) {
            quotas[i].1 += 1;
        }
        for (id, quota, _) in quotas {
            let pool = &mut by_volume.get_mut(&id).unwrap()[idx];
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ fnv1a(id.as_bytes()) ^ (idx as u64) << 32);
            pool.shuffle(&mut rng);
            kept.extend(pool.drain(..).take(quota));
        }
    }
    kept.sort_by(|a, b| {
        (&a.volume_id, a.voxel.slice, a.voxel.row, a.voxel.col).cmp(&(
            &b.volume_id,
            b.voxel.slice,
            b.voxel.row,
            b.voxel.col,
        ))
    });
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::BinaryMask3D;

    /// Disk of radius `rad` (inclusive) rasterized at the slice center.
    fn disk_mask(side: usize, rad: f64) -> BinaryMask3D {
        let mut mask = BinaryMask3D::empty((1, side, side), (1.0, 1.0, 1.0)).unwrap();
        let c0 = (side / 2) as f64;
        for r in 0..side {
            for c in 0..side {
                let (dr, dc) = (r as f64 - c0, c as f64 - c0);
                if dr * dr + dc * dc <= rad * rad {
                    mask.set(0, r, c, true);
                }
            }
        }
        mask
    }

    #[test]
    fn imbalance_matches_scan_geometry() {
        let v = estimate_imbalance(15.0, 512.0 * 512.0).unwrap();
        assert!((369.0..=371.0).contains(&v));
        assert_eq!(v.round(), 370.0);
        let equal = estimate_imbalance(10.0, 2.0 * std::f64::consts::PI * 100.0).unwrap();
        assert!((equal - 1.0).abs() < 1e-12);
        let r10 = estimate_imbalance(10.0, 512.0 * 512.0).unwrap();
        assert!((r10 - 833.4).abs() < 0.05);
    }

    #[test]
    fn imbalance_rejects_nodule_filling_the_slice() {
        assert!(estimate_imbalance(100.0, 100.0).is_err());
        assert!(estimate_imbalance(-1.0, 1e6).is_err());
    }

    #[test]
    fn disk_plan_takes_all_boundary_plus_matched_interior() {
        let mask = disk_mask(64, 5.0);
        let slice = mask.slice(0);
        // Rasterization oracle for the disk: 81 voxels, 28 on the boundary.
        assert_eq!(slice.count(), 81);
        let boundary = crate::volume::boundary_voxels_2d(slice);
        assert_eq!(boundary.len(), 28);

        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (entries, short) = plan_slice_samples("v0", slice, 0, 10.0, &cfg, &mut rng);
        assert!(!short);
        let nodule: Vec<_> = entries
            .iter()
            .filter(|e| e.label == SampleLabel::Nodule)
            .collect();
        let background: Vec<_> = entries
            .iter()
            .filter(|e| e.label == SampleLabel::Background)
            .collect();
        assert_eq!(nodule.len(), 56);
        assert_eq!(background.len(), 56);
        assert_eq!(
            nodule.iter().filter(|e| e.tag == SampleTag::Boundary).count(),
            28
        );
        assert_eq!(
            background.iter().filter(|e| e.tag == SampleTag::Near).count(),
            28
        );

        // Every boundary voxel is present and all labels agree with the mask.
        for &(r, c) in &boundary {
            assert!(nodule
                .iter()
                .any(|e| e.voxel.row == r && e.voxel.col == c));
        }
        for e in &entries {
            assert_eq!(
                slice.get(e.voxel.row, e.voxel.col),
                e.label == SampleLabel::Nodule
            );
        }
        // No duplicate voxels.
        let mut seen = std::collections::HashSet::new();
        assert!(entries.iter().all(|e| seen.insert(e.voxel)));
    }

    #[test]
    fn one_voxel_nodule_yields_one_pair() {
        let mut mask = BinaryMask3D::empty((1, 16, 16), (1.0, 1.0, 1.0)).unwrap();
        mask.set(0, 8, 8, true);
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (entries, _) = plan_slice_samples("v0", mask.slice(0), 0, 10.0, &cfg, &mut rng);
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].label, SampleLabel::Nodule);
        assert_eq!(entries[1].label, SampleLabel::Background);
    }

    #[test]
    fn small_nodules_are_taken_whole() {
        let mask = disk_mask(64, 5.0);
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (entries, _) = plan_slice_samples("v0", mask.slice(0), 0, 4.0, &cfg, &mut rng);
        let nodule = entries
            .iter()
            .filter(|e| e.label == SampleLabel::Nodule)
            .count();
        assert_eq!(nodule, 81);
    }

    #[test]
    fn uniform_fraction_mode_takes_a_flat_share() {
        let mask = disk_mask(64, 5.0);
        let cfg = SamplerConfig {
            strategy: SamplingStrategy::UniformFraction { fraction: 0.4 },
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (entries, _) = plan_slice_samples("v0", mask.slice(0), 0, 10.0, &cfg, &mut rng);
        let nodule = entries
            .iter()
            .filter(|e| e.label == SampleLabel::Nodule)
            .count();
        assert_eq!(nodule, 32); // round(0.4 * 81)
    }

    #[test]
    fn plans_are_seed_deterministic() {
        let mask = disk_mask(48, 6.5);
        let case = || SamplingCase {
            volume_id: "case7".into(),
            mask: &mask,
            diameter_mm: 13.0,
        };
        let cfg = SamplerConfig::default();
        let a = plan_dataset(&[case()], &cfg).unwrap();
        let b = plan_dataset(&[case()], &cfg).unwrap();
        assert_eq!(a, b);
        let other = plan_dataset(
            &[case()],
            &SamplerConfig {
                seed: 99,
                ..cfg
            },
        )
        .unwrap();
        assert_ne!(a.manifest, other.manifest);
        // Different seeds still balance exactly.
        let (n, b_) = other.manifest.label_counts();
        assert_eq!(n, b_);
    }

    #[test]
    fn dataset_cap_keeps_balance_and_proportions() {
        let big = disk_mask(64, 9.0);
        let small = disk_mask(64, 4.0);
        let cases = vec![
            SamplingCase {
                volume_id: "a".into(),
                mask: &big,
                diameter_mm: 18.0,
            },
            SamplingCase {
                volume_id: "b".into(),
                mask: &small,
                diameter_mm: 8.0,
            },
        ];
        let uncapped = plan_dataset(&cases, &SamplerConfig::default()).unwrap();
        let cap = 100;
        let capped = plan_dataset(
            &cases,
            &SamplerConfig {
                max_total_samples: Some(cap),
                ..SamplerConfig::default()
            },
        )
        .unwrap();
        let (n, b) = capped.manifest.label_counts();
        assert_eq!(n, 50);
        assert_eq!(b, 50);

        for id in ["a", "b"] {
            let full: Vec<_> = uncapped
                .manifest
                .entries
                .iter()
                .filter(|e| e.volume_id == id && e.label == SampleLabel::Nodule)
                .collect();
            let kept = capped
                .manifest
                .entries
                .iter()
                .filter(|e| e.volume_id == id && e.label == SampleLabel::Nodule)
                .count();
            let uncapped_nodules = uncapped
                .manifest
                .entries
                .iter()
                .filter(|e| e.label == SampleLabel::Nodule)
                .count();
            let exact = full.len() as f64 * 50.0 / uncapped_nodules as f64;
            assert!(
                (kept as f64 - exact).abs() <= 1.0,
                "{id}: kept {kept}, exact share {exact}"
            );
        }
    }

    #[test]
    fn short_background_pools_are_flagged() {
        // 5x5 slice almost filled by a square nodule: background pool of 9
        // cannot match 16 nodule samples.
        let mut mask = BinaryMask3D::empty((1, 5, 5), (1.0, 1.0, 1.0)).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                mask.set(0, r, c, true);
            }
        }
        let outcome = plan_dataset(
            &[SamplingCase {
                volume_id: "tight".into(),
                mask: &mask,
                diameter_mm: 4.0,
            }],
            &SamplerConfig::default(),
        )
        .unwrap();
        assert_eq!(outcome.short_background, vec![("tight".to_string(), 0)]);
        let (n, b) = outcome.manifest.label_counts();
        assert_eq!(n, 16);
        assert_eq!(b, 9);
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let mask = disk_mask(32, 4.0);
        let outcome = plan_dataset(
            &[SamplingCase {
                volume_id: "rt".into(),
                mask: &mask,
                diameter_mm: 8.0,
            }],
            &SamplerConfig::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        outcome.manifest.save(&path).unwrap();
        assert_eq!(SampleManifest::load(&path).unwrap(), outcome.manifest);
    }

    #[test]
    fn manifest_load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        std::fs::write(&path, "a\t1\t2\n").unwrap();
        assert!(matches!(
            SampleManifest::load(&path),
            Err(SamplerError::MalformedManifest { line: 1, .. })
        ));
        std::fs::write(&path, "a\t1\t2\t3\t7\tboundary\n").unwrap();
        assert!(SampleManifest::load(&path).is_err());
    }
}
