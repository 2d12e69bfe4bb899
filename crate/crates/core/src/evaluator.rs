//! Segmentation metrics and reports: overlap ratios on voxel sets, average
//! surface distance in millimeters, aggregate statistics, characteristic
//! grouping tables, rater consistency matrices, and DSC histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{
    boundary_voxels_2d, BinaryMask3D, NoduleRecord, SpacingMm, VolumeError, VoxelIndex,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

fn check_shapes(gt: &BinaryMask3D, seg: &BinaryMask3D) -> Result<(), EvalError> {
    if gt.shape() != seg.shape() {
        return Err(EvalError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            gt.shape(),
            seg.shape()
        )));
    }
    Ok(())
}

fn overlap_counts(gt: &BinaryMask3D, seg: &BinaryMask3D) -> (usize, usize, usize) {
    let inter = gt
        .data()
        .iter()
        .zip(seg.data())
        .filter(|(a, b)| **a != 0 && **b != 0)
        .count();
    (gt.count(), seg.count(), inter)
}

/// Dice similarity coefficient `2 V(Gt and Seg) / (V(Gt) + V(Seg))`.
/// Undefined when both masks are empty.
pub fn dsc(gt: &BinaryMask3D, seg: &BinaryMask3D) -> Result<f64, EvalError> {
    check_shapes(gt, seg)?;
    let (vg, vs, inter) = overlap_counts(gt, seg);
    if vg + vs == 0 {
        return Err(EvalError::Undefined("dsc of two empty masks".into()));
    }
    Ok(2.0 * inter as f64 / (vg + vs) as f64)
}

/// Sensitivity `V(Gt and Seg) / V(Gt)`. Undefined for an empty reference.
pub fn sen(gt: &BinaryMask3D, seg: &BinaryMask3D) -> Result<f64, EvalError> {
    check_shapes(gt, seg)?;
    let (vg, _, inter) = overlap_counts(gt, seg);
    if vg == 0 {
        return Err(EvalError::Undefined("sen with an empty reference".into()));
    }
    Ok(inter as f64 / vg as f64)
}

/// Positive predictive value `V(Gt and Seg) / V(Seg)`. Undefined for an
/// empty prediction.
pub fn ppv(gt: &BinaryMask3D, seg: &BinaryMask3D) -> Result<f64, EvalError> {
    check_shapes(gt, seg)?;
    let (_, vs, inter) = overlap_counts(gt, seg);
    if vs == 0 {
        return Err(EvalError::Undefined("ppv with an empty prediction".into()));
    }
    Ok(inter as f64 / vs as f64)
}

/// Surface voxels of a mask: per-slice 2D boundary voxels plus every
/// foreground voxel exposed through-plane (background or out-of-volume
/// neighbor along z). Returned in (slice, row, col) order.
pub fn surface_voxels(mask: &BinaryMask3D) -> Vec<VoxelIndex> {
    let (slices, rows, cols) = mask.shape();
    let mut out = Vec::new();
    for z in 0..slices {
        let plane = mask.slice(z);
        let mut on_plane = vec![false; rows * cols];
        for (r, c) in boundary_voxels_2d(plane) {
            on_plane[r * cols + c] = true;
        }
        for r in 0..rows {
            for c in 0..cols {
                if !plane.get(r, c) {
                    continue;
                }
                let exposed = on_plane[r * cols + c]
                    || z == 0
                    || z == slices - 1
                    || !mask.get(z - 1, r, c)
                    || !mask.get(z + 1, r, c);
                if exposed {
                    out.push(VoxelIndex::new(z, r, c));
                }
            }
        }
    }
    out
}

/// Mean over `src` of the distance to the nearest voxel of `dst`, in mm.
/// Scans destination slices outward from each source slice and stops once
/// the slice offset alone exceeds the best distance found.
fn directed_surface_mean(
    src: &[VoxelIndex],
    dst_by_slice: &[Vec<(usize, usize)>],
    spacing: SpacingMm,
) -> f64 {
    let (sz, sr, sc) = spacing;
    let last = dst_by_slice.len() as i64 - 1;
    let mut sum = 0.0;
    for v in src {
        let z0 = v.slice as i64;
        let mut best = f64::INFINITY;
        let mut dz = 0i64;
        loop {
            let below = z0 - dz;
            let above = z0 + dz;
            if below < 0 && above > last {
                break;
            }
            let dz_mm2 = (dz as f64 * sz).powi(2);
            if dz_mm2 >= best {
                break;
            }
            let mut scan = |z: i64| {
                for &(r, c) in &dst_by_slice[z as usize] {
                    let dr = (r as f64 - v.row as f64) * sr;
                    let dc = (c as f64 - v.col as f64) * sc;
                    let d2 = dz_mm2 + dr * dr + dc * dc;
                    if d2 < best {
                        best = d2;
                    }
                }
            };
            if below >= 0 {
                scan(below);
            }
            if dz > 0 && above <= last {
                scan(above);
            }
            dz += 1;
        }
        sum += best.sqrt();
    }
    sum / src.len() as f64
}

fn group_by_slice(voxels: &[VoxelIndex], slices: usize) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![Vec::new(); slices];
    for v in voxels {
        out[v.slice].push((v.row, v.col));
    }
    out
}

/// Average surface distance: the symmetric mean of the two directed
/// surface-to-surface means, in millimeters under `spacing`. Requires
/// both masks nonempty.
pub fn asd(gt: &BinaryMask3D, seg: &BinaryMask3D, spacing: SpacingMm) -> Result<f64, EvalError> {
    check_shapes(gt, seg)?;
    if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
        return Err(EvalError::InvalidArgument(format!(
            "spacing {spacing:?} must be positive"
        )));
    }
    if gt.count() == 0 || seg.count() == 0 {
        return Err(EvalError::Undefined("asd with an empty mask".into()));
    }
    let slices = gt.shape().0;
    let gs = surface_voxels(gt);
    let ss = surface_voxels(seg);
    let g_rows = group_by_slice(&gs, slices);
    let s_rows = group_by_slice(&ss, slices);
    let fwd = directed_surface_mean(&gs, &s_rows, spacing);
    let back = directed_surface_mean(&ss, &g_rows, spacing);
    Ok((fwd + back) / 2.0)
}

/// Mean and population standard deviation of a sample.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregate of one metric over the defined nodules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

fn summarize(values: &[f64]) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let (mean, std) = mean_std(values);
    Some(MetricSummary {
        mean,
        std,
        count: values.len(),
    })
}

/// Metrics of one nodule; a `None` metric was undefined and the reason is
/// in `flags`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleMetrics {
    pub id: String,
    pub dsc: Option<f64>,
    pub asd_mm: Option<f64>,
    pub sen: Option<f64>,
    pub ppv: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Per-nodule metrics plus mean/std aggregates over the defined values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nodules: Vec<NoduleMetrics>,
    pub dsc: Option<MetricSummary>,
    pub asd_mm: Option<MetricSummary>,
    pub sen: Option<MetricSummary>,
    pub ppv: Option<MetricSummary>,
}

/// One prediction aligned with its reference mask.
pub struct EvalCase<'a> {
    pub id: String,
    pub gt: &'a BinaryMask3D,
    pub seg: &'a BinaryMask3D,
}

/// Evaluates every case. Undefined metrics are flagged on their nodule and
/// excluded from the aggregates; mismatched shapes are fatal.
pub fn evaluate_set(cases: &[EvalCase<'_>]) -> Result<MetricReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::InvalidArgument("no cases to evaluate".into()));
    }
    let mut nodules = Vec::with_capacity(cases.len());
    let (mut dscs, mut asds, mut sens, mut ppvs) = (vec![], vec![], vec![], vec![]);
    for case in cases {
        check_shapes(case.gt, case.seg)?;
        let mut flags = Vec::new();
        let mut keep = |name: &str, r: Result<f64, EvalError>, sink: &mut Vec<f64>| match r {
            Ok(v) => {
                sink.push(v);
                Some(v)
            }
            Err(EvalError::Undefined(why)) => {
                flags.push(format!("{name}: {why}"));
                None
            }
            Err(_) => unreachable!("shapes were checked"),
        };
        let spacing = case.gt.spacing_mm();
        let nodule = NoduleMetrics {
            id: case.id.clone(),
            dsc: keep("dsc", dsc(case.gt, case.seg), &mut dscs),
            asd_mm: keep("asd", asd(case.gt, case.seg, spacing), &mut asds),
            sen: keep("sen", sen(case.gt, case.seg), &mut sens),
            ppv: keep("ppv", ppv(case.gt, case.seg), &mut ppvs),
            flags,
        };
        nodules.push(nodule);
    }
    Ok(MetricReport {
        nodules,
        dsc: summarize(&dscs),
        asd_mm: summarize(&asds),
        sen: summarize(&sens),
        ppv: summarize(&ppvs),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "-".into(),
    }
}

impl MetricReport {
    /// Aligned text table: one row per nodule, then mean/std/count rows.
    pub fn to_text(&self) -> String {
        let id_w = self
            .nodules
            .iter()
            .map(|n| n.id.len())
            .chain(["nodule".len()])
            .max()
            .unwrap();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<id_w$}  {:>8}  {:>8}  {:>8}  {:>8}",
            "nodule", "dsc", "asd_mm", "sen", "ppv"
        );
        for n in &self.nodules {
            let _ = writeln!(
                out,
                "{:<id_w$}  {:>8}  {:>8}  {:>8}  {:>8}",
                n.id,
                fmt_opt(n.dsc),
                fmt_opt(n.asd_mm),
                fmt_opt(n.sen),
                fmt_opt(n.ppv)
            );
            for f in &n.flags {
                let _ = writeln!(out, "{:<id_w$}  note: {f}", "");
            }
        }
        let row = |label: &str, pick: &dyn Fn(&MetricSummary) -> String| {
            let cell = |s: &Option<MetricSummary>| match s {
                Some(s) => pick(s),
                None => "-".into(),
            };
            format!(
                "{:<id_w$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
                label,
                cell(&self.dsc),
                cell(&self.asd_mm),
                cell(&self.sen),
                cell(&self.ppv)
            )
        };
        out.push_str(&row("mean", &|s| format!("{:.4}", s.mean)));
        out.push_str(&row("std", &|s| format!("{:.4}", s.std)));
        out.push_str(&row("count", &|s| s.count.to_string()));
        out
    }
}

/// One grouping bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub key: String,
    pub count: usize,
    pub mean_dsc: f64,
    pub std_dsc: f64,
}

/// DSC broken down by rounded characteristic score, pleural attachment,
/// and the 6 mm diameter threshold. Every breakdown covers each nodule
/// exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingReport {
    pub characteristics: BTreeMap<String, Vec<GroupRow>>,
    pub attachment: Vec<GroupRow>,
    pub diameter: Vec<GroupRow>,
}

/// Diameter bucket edge in millimeters.
pub const DIAMETER_SPLIT_MM: f64 = 6.0;

fn rows_from_buckets(buckets: BTreeMap<String, Vec<f64>>) -> Vec<GroupRow> {
    buckets
        .into_iter()
        .map(|(key, values)| {
            let (mean_dsc, std_dsc) = mean_std(&values);
            GroupRow {
                key,
                count: values.len(),
                mean_dsc,
                std_dsc,
            }
        })
        .collect()
}

/// Groups per-nodule DSC values by the records' scores. `records` and
/// `dscs` are aligned by index.
pub fn group_report(records: &[NoduleRecord], dscs: &[f64]) -> Result<GroupingReport, EvalError> {
    if records.is_empty() || records.len() != dscs.len() {
        return Err(EvalError::InvalidArgument(format!(
            "{} records against {} dsc values",
            records.len(),
            dscs.len()
        )));
    }
    let score_fields: [(&str, fn(&NoduleRecord) -> f64); 9] = [
        ("subtlety", |r| r.characteristics.subtlety),
        ("internal_structure", |r| r.characteristics.internal_structure),
        ("calcification", |r| r.characteristics.calcification),
        ("sphericity", |r| r.characteristics.sphericity),
        ("margin", |r| r.characteristics.margin),
        ("lobulation", |r| r.characteristics.lobulation),
        ("spiculation", |r| r.characteristics.spiculation),
        ("texture", |r| r.characteristics.texture),
        ("malignancy", |r| r.characteristics.malignancy),
    ];
    let mut characteristics = BTreeMap::new();
    for (name, get) in score_fields {
        let mut buckets: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (r, &d) in records.iter().zip(dscs) {
            let key = format!("{}", get(r).round() as i64);
            buckets.entry(key).or_default().push(d);
        }
        characteristics.insert(name.to_string(), rows_from_buckets(buckets));
    }
    let mut attach: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut diam: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (r, &d) in records.iter().zip(dscs) {
        let a = match r.attached {
            Some(true) => "attached",
            Some(false) => "non-attached",
            None => "unknown",
        };
        attach.entry(a.into()).or_default().push(d);
        let bucket = if r.characteristics.diameter_mm < DIAMETER_SPLIT_MM {
            format!("<{DIAMETER_SPLIT_MM}mm")
        } else {
            format!(">={DIAMETER_SPLIT_MM}mm")
        };
        diam.entry(bucket).or_default().push(d);
    }
    Ok(GroupingReport {
        characteristics,
        attachment: rows_from_buckets(attach),
        diameter: rows_from_buckets(diam),
    })
}

impl GroupingReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20}  {:<12}  {:>5}  {:>8}  {:>8}",
            "grouping", "key", "n", "mean_dsc", "std_dsc"
        );
        let mut section = |name: &str, rows: &[GroupRow]| {
            for row in rows {
                let _ = writeln!(
                    out,
                    "{:<20}  {:<12}  {:>5}  {:>8.4}  {:>8.4}",
                    name, row.key, row.count, row.mean_dsc, row.std_dsc
                );
            }
        };
        for (name, rows) in &self.characteristics {
            section(name, rows);
        }
        section("attachment", &self.attachment);
        section("diameter", &self.diameter);
        out
    }
}

/// One named set of masks, aligned by nodule across sources.
pub struct ConsistencySource<'a> {
    pub name: String,
    pub masks: Vec<&'a BinaryMask3D>,
}

/// Mean pairwise DSC between mask sources. `values[i][j]` averages over
/// the nodules where the pair is defined; the diagonal is omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMatrix {
    pub sources: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn consistency_matrix(
    sources: &[ConsistencySource<'_>],
) -> Result<ConsistencyMatrix, EvalError> {
    if sources.len() < 2 {
        return Err(EvalError::InvalidArgument(
            "consistency needs at least two sources".into(),
        ));
    }
    let nodules = sources[0].masks.len();
    if nodules == 0 || sources.iter().any(|s| s.masks.len() != nodules) {
        return Err(EvalError::InvalidArgument(
            "sources must align on a nonempty nodule list".into(),
        ));
    }
    let n = sources.len();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let mut pair = Vec::new();
            for k in 0..nodules {
                match dsc(sources[i].masks[k], sources[j].masks[k]) {
                    Ok(v) => pair.push(v),
                    Err(EvalError::Undefined(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            let mean = (!pair.is_empty()).then(|| mean_std(&pair).0);
            values[i][j] = mean;
            values[j][i] = mean;
        }
    }
    Ok(ConsistencyMatrix {
        sources: sources.iter().map(|s| s.name.clone()).collect(),
        values,
    })
}

impl ConsistencyMatrix {
    pub fn to_text(&self) -> String {
        let w = self
            .sources
            .iter()
            .map(|s| s.len())
            .chain([8])
            .max()
            .unwrap();
        let mut out = String::new();
        let _ = write!(out, "{:<w$}", "");
        for s in &self.sources {
            let _ = write!(out, "  {s:>w$}");
        }
        out.push('\n');
        for (i, s) in self.sources.iter().enumerate() {
            let _ = write!(out, "{s:<w$}");
            for j in 0..self.sources.len() {
                let _ = write!(out, "  {:>w$}", fmt_opt(self.values[i][j]));
            }
            out.push('\n');
        }
        out
    }
}

/// One histogram bin over `[left, right)`; the last bin includes 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Histogram of DSC values over `[0, 1]` with `bins` equal-width bins.
pub fn dsc_histogram(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>, EvalError> {
    if bins == 0 {
        return Err(EvalError::InvalidArgument("bins must be positive".into()));
    }
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            left: i as f64 / bins as f64,
            right: (i + 1) as f64 / bins as f64,
            count: 0,
        })
        .collect();
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(EvalError::InvalidArgument(format!(
                "dsc value {v} outside [0, 1]"
            )));
        }
        let idx = ((v * bins as f64) as usize).min(bins - 1);
        out[idx].count += 1;
    }
    Ok(out)
}

/// `bin_left,bin_right,count` lines with a header row.
pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut out = String::from("bin_left,bin_right,count\n");
    for b in bins {
        let _ = writeln!(out, "{},{},{}", b.left, b.right, b.count);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Characteristics;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(shape: (usize, usize, usize), voxels: &[(usize, usize, usize)]) -> BinaryMask3D {
        let mut m = BinaryMask3D::empty(shape, (1.0, 1.0, 1.0)).unwrap();
        for &(z, r, c) in voxels {
            m.set(z, r, c, true);
        }
        m
    }

    fn mask_from_bits(shape: (usize, usize, usize), bits: &[bool]) -> BinaryMask3D {
        let data = bits.iter().map(|&b| b as u8).collect();
        BinaryMask3D::from_data(shape, (1.0, 1.0, 1.0), data).unwrap()
    }

    #[test]
    fn dsc_matches_hand_cases() {
        let shape = (2, 4, 4);
        let a = mask(shape, &[(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let b = mask(shape, &[(1, 3, 3)]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        let c = mask(shape, &[(0, 0, 0), (0, 0, 1), (1, 2, 2), (1, 2, 3)]);
        assert_eq!(dsc(&a, &c).unwrap(), 0.5);

        let empty = mask(shape, &[]);
        assert!(matches!(
            dsc(&empty, &empty),
            Err(EvalError::Undefined(_))
        ));
        assert_eq!(dsc(&a, &empty).unwrap(), 0.0);
        let other = mask((2, 4, 5), &[]);
        assert!(matches!(
            dsc(&a, &other),
            Err(EvalError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn sen_and_ppv_match_hand_cases() {
        let shape = (1, 8, 8);
        let gt: Vec<_> = (0..10).map(|i| (0, i / 8, i % 8)).collect();
        let seg: Vec<_> = (6..11).map(|i| (0, i / 8, i % 8)).collect();
        let gt = mask(shape, &gt);
        let seg = mask(shape, &seg);
        // gt covers cells 0..10, seg covers 6..11: overlap 4.
        assert_eq!(sen(&gt, &seg).unwrap(), 0.4);
        assert_eq!(ppv(&gt, &seg).unwrap(), 0.8);

        let superset = mask(shape, &(0..12).map(|i| (0, i / 8, i % 8)).collect::<Vec<_>>());
        assert_eq!(sen(&gt, &superset).unwrap(), 1.0);
        let subset = mask(shape, &[(0, 0, 0), (0, 0, 1)]);
        assert_eq!(ppv(&gt, &subset).unwrap(), 1.0);

        let empty = mask(shape, &[]);
        assert!(matches!(sen(&empty, &seg), Err(EvalError::Undefined(_))));
        assert!(matches!(ppv(&gt, &empty), Err(EvalError::Undefined(_))));
    }

    #[test]
    fn surface_of_solid_cube_excludes_core() {
        let shape = (3, 3, 3);
        let all: Vec<_> = (0..27).map(|i| (i / 9, (i / 3) % 3, i % 3)).collect();
        let cube = mask(shape, &all);
        let surf = surface_voxels(&cube);
        assert_eq!(surf.len(), 26);
        assert!(!surf.contains(&VoxelIndex::new(1, 1, 1)));

        let plate = mask((1, 3, 3), &(0..9).map(|i| (0, i / 3, i % 3)).collect::<Vec<_>>());
        assert_eq!(surface_voxels(&plate).len(), 9);
    }

    #[test]
    fn asd_matches_hand_cases() {
        let shape = (1, 5, 5);
        let a = mask(shape, &[(0, 2, 0)]);
        let b = mask(shape, &[(0, 2, 3)]);
        let spacing = (1.0, 1.0, 1.0);
        assert_eq!(asd(&a, &a, spacing).unwrap(), 0.0);
        assert_eq!(asd(&a, &b, spacing).unwrap(), 3.0);
        // Column spacing scales the distance.
        assert!((asd(&a, &b, (1.0, 1.0, 0.7)).unwrap() - 2.1).abs() < 1e-12);

        let empty = mask(shape, &[]);
        assert!(matches!(
            asd(&a, &empty, spacing),
            Err(EvalError::Undefined(_))
        ));
        assert!(asd(&a, &b, (0.0, 1.0, 1.0)).is_err());
    }

    /// All-pairs nearest-surface oracle.
    fn asd_oracle(gt: &BinaryMask3D, seg: &BinaryMask3D, spacing: SpacingMm) -> f64 {
        let gs = surface_voxels(gt);
        let ss = surface_voxels(seg);
        let directed = |from: &[VoxelIndex], to: &[VoxelIndex]| {
            let mut sum = 0.0;
            for a in from {
                let mut best = f64::INFINITY;
                for b in to {
                    let dz = (a.slice as f64 - b.slice as f64) * spacing.0;
                    let dr = (a.row as f64 - b.row as f64) * spacing.1;
                    let dc = (a.col as f64 - b.col as f64) * spacing.2;
                    best = best.min(dz * dz + dr * dr + dc * dc);
                }
                sum += best.sqrt();
            }
            sum / from.len() as f64
        };
        (directed(&gs, &ss) + directed(&ss, &gs)) / 2.0
    }

    #[test]
    fn asd_agrees_with_all_pairs_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for trial in 0..25 {
            let shape = (
                rng.random_range(1..=8),
                rng.random_range(1..=8),
                rng.random_range(1..=8),
            );
            let n = shape.0 * shape.1 * shape.2;
            let spacing = (
                rng.random_range(0.4..2.5),
                rng.random_range(0.4..2.5),
                rng.random_range(0.4..2.5),
            );
            let draw = |rng: &mut ChaCha8Rng| {
                let bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.35)).collect();
                bits
            };
            let mut a = draw(&mut rng);
            let mut b = draw(&mut rng);
            // Guarantee nonempty masks.
            a[0] = true;
            b[n - 1] = true;
            let ma = BinaryMask3D::from_data(shape, spacing, a.iter().map(|&x| x as u8).collect())
                .unwrap();
            let mb = BinaryMask3D::from_data(shape, spacing, b.iter().map(|&x| x as u8).collect())
                .unwrap();
            let fast = asd(&ma, &mb, spacing).unwrap();
            let slow = asd_oracle(&ma, &mb, spacing);
            assert!(
                (fast - slow).abs() <= 1e-9,
                "trial {trial}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn asd_is_symmetric_and_scales_with_spacing() {
        let shape = (3, 6, 6);
        let a = mask(shape, &[(0, 1, 1), (1, 2, 2), (1, 2, 3), (2, 3, 3)]);
        let b = mask(shape, &[(0, 4, 4), (1, 4, 1), (2, 0, 5)]);
        let spacing = (1.25, 0.7, 0.7);
        let ab = asd(&a, &b, spacing).unwrap();
        let ba = asd(&b, &a, spacing).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
        let doubled = asd(&a, &b, (2.5, 1.4, 1.4)).unwrap();
        assert!((doubled - 2.0 * ab).abs() < 1e-12);
    }

    #[test]
    fn mean_std_uses_population_convention() {
        let (mean, std) = mean_std(&[0.6, 0.8, 1.0]);
        assert!((mean - 0.8).abs() < 1e-12);
        assert!((std - (0.08f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((std - 0.1633).abs() < 5e-5);
        let (m1, s1) = mean_std(&[0.42]);
        assert_eq!((m1, s1), (0.42, 0.0));
    }

    #[test]
    fn evaluate_set_aggregates_and_flags() {
        let shape = (1, 4, 4);
        let gt = mask(shape, &[(0, 1, 1), (0, 1, 2), (0, 2, 1), (0, 2, 2)]);
        let seg = mask(shape, &[(0, 1, 1), (0, 1, 2)]);
        let empty = mask(shape, &[]);
        let cases = vec![
            EvalCase {
                id: "n1".into(),
                gt: &gt,
                seg: &gt,
            },
            EvalCase {
                id: "n2".into(),
                gt: &gt,
                seg: &seg,
            },
            EvalCase {
                id: "n3".into(),
                gt: &empty,
                seg: &empty,
            },
        ];
        let report = evaluate_set(&cases).unwrap();
        assert_eq!(report.nodules.len(), 3);
        assert_eq!(report.nodules[0].dsc, Some(1.0));
        // dsc(n2) = 2*2/(4+2) = 2/3.
        assert!((report.nodules[1].dsc.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.nodules[1].sen, Some(0.5));
        assert_eq!(report.nodules[1].ppv, Some(1.0));
        assert!(report.nodules[2].dsc.is_none());
        assert_eq!(report.nodules[2].flags.len(), 4);
        let dsum = report.dsc.unwrap();
        assert_eq!(dsum.count, 2);
        assert!((dsum.mean - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);

        let single = evaluate_set(&cases[..1]).unwrap();
        let s = single.dsc.unwrap();
        assert_eq!((s.mean, s.std, s.count), (1.0, 0.0, 1));

        let text = report.to_text();
        assert!(text.contains("nodule"));
        assert!(text.lines().count() >= 6);
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    fn record(id: &str, malignancy: f64, diameter: f64, attached: Option<bool>) -> NoduleRecord {
        NoduleRecord {
            id: id.into(),
            rater_masks: vec![],
            characteristics: Characteristics {
                diameter_mm: diameter,
                subtlety: 3.0,
                internal_structure: 1.0,
                calcification: 6.0,
                sphericity: 4.0,
                margin: 4.0,
                lobulation: 2.0,
                spiculation: 2.0,
                texture: 5.0,
                malignancy,
            },
            attached,
        }
    }

    #[test]
    fn grouping_buckets_cover_every_nodule() {
        let records = vec![
            record("a", 3.2, 4.0, Some(false)),
            record("b", 2.8, 9.0, Some(true)),
            record("c", 1.2, 5.0, None),
            record("d", 4.9, 12.0, Some(false)),
        ];
        let dscs = [0.8, 0.6, 0.9, 0.7];
        let report = group_report(&records, &dscs).unwrap();

        for (name, rows) in &report.characteristics {
            let total: usize = rows.iter().map(|r| r.count).sum();
            assert_eq!(total, 4, "{name}");
        }
        let malig = &report.characteristics["malignancy"];
        let keys: Vec<_> = malig.iter().map(|r| r.key.as_str()).collect();
        assert_eq!(keys, ["1", "3", "5"]);
        let three = malig.iter().find(|r| r.key == "3").unwrap();
        assert_eq!(three.count, 2);
        assert!((three.mean_dsc - 0.7).abs() < 1e-12);

        assert_eq!(report.attachment.iter().map(|r| r.count).sum::<usize>(), 4);
        assert_eq!(report.diameter.iter().map(|r| r.count).sum::<usize>(), 4);
        let small = report.diameter.iter().find(|r| r.key == "<6mm").unwrap();
        assert_eq!(small.count, 2);
        assert!((small.mean_dsc - 0.85).abs() < 1e-12);

        let text = report.to_text();
        assert!(text.contains("malignancy"));
        assert!(text.contains("<6mm"));

        assert!(group_report(&records, &dscs[..2]).is_err());
    }

    #[test]
    fn consistency_matrix_is_symmetric_with_omitted_diagonal() {
        let shape = (1, 4, 4);
        let m1 = mask(shape, &[(0, 0, 0), (0, 0, 1)]);
        let m2 = mask(shape, &[(0, 0, 0)]);
        let m3 = mask(shape, &[(0, 3, 3)]);
        let sources = vec![
            ConsistencySource {
                name: "r1".into(),
                masks: vec![&m1, &m2],
            },
            ConsistencySource {
                name: "r2".into(),
                masks: vec![&m1, &m2],
            },
            ConsistencySource {
                name: "model".into(),
                masks: vec![&m2, &m3],
            },
        ];
        let cm = consistency_matrix(&sources).unwrap();
        assert_eq!(cm.sources, ["r1", "r2", "model"]);
        for i in 0..3 {
            assert!(cm.values[i][i].is_none());
            for j in 0..3 {
                assert_eq!(cm.values[i][j], cm.values[j][i]);
            }
        }
        // Identical sources agree perfectly.
        assert_eq!(cm.values[0][1], Some(1.0));
        // r1 vs model: dsc(m1, m2) = 2/3, dsc(m2, m3) = 0.
        assert!((cm.values[0][2].unwrap() - 1.0 / 3.0).abs() < 1e-12);

        let text = cm.to_text();
        assert!(text.contains("model"));

        assert!(consistency_matrix(&sources[..1]).is_err());
    }

    #[test]
    fn histogram_counts_and_edges() {
        let bins = dsc_histogram(&[0.05, 0.15, 0.95, 1.0], 10).unwrap();
        assert_eq!(bins.len(), 10);
        assert_eq!(bins[0].count, 1);
        assert_eq!(bins[1].count, 1);
        assert_eq!(bins[9].count, 2, "1.0 joins the last bin");
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(bins[0].left, 0.0);
        assert_eq!(bins[9].right, 1.0);

        assert!(dsc_histogram(&[0.5], 0).is_err());
        assert!(dsc_histogram(&[1.2], 10).is_err());

        let csv = histogram_csv(&bins);
        assert!(csv.starts_with("bin_left,bin_right,count\n"));
        assert_eq!(csv.lines().count(), 11);
    }

    fn arb_mask_pair() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
        let n = 3 * 3 * 3;
        (
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(any::<bool>(), n),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn dsc_is_symmetric_and_detects_equality((a, b) in arb_mask_pair()) {
            let shape = (3, 3, 3);
            let ma = mask_from_bits(shape, &a);
            let mb = mask_from_bits(shape, &b);
            match (dsc(&ma, &mb), dsc(&mb, &ma)) {
                (Ok(x), Ok(y)) => {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                    prop_assert!((0.0..=1.0).contains(&x));
                    let disjoint = a.iter().zip(&b).all(|(p, q)| !(*p && *q));
                    prop_assert_eq!(x == 0.0, disjoint);
                    prop_assert_eq!(x == 1.0, a == b);
                }
                (Err(_), Err(_)) => {
                    prop_assert!(a.iter().all(|v| !v) && b.iter().all(|v| !v));
                }
                _ => prop_assert!(false, "asymmetric failure"),
            }
        }

        #[test]
        fn sen_of_gt_seg_equals_ppv_of_seg_gt((a, b) in arb_mask_pair()) {
            let shape = (3, 3, 3);
            let ma = mask_from_bits(shape, &a);
            let mb = mask_from_bits(shape, &b);
            match (sen(&ma, &mb), ppv(&mb, &ma)) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x.to_bits(), y.to_bits()),
                (Err(_), Err(_)) => prop_assert!(ma.count() == 0),
                _ => prop_assert!(false, "duality broken"),
            }
        }

        #[test]
        fn shared_permutations_leave_overlap_metrics_unchanged(
            (a, b) in arb_mask_pair(),
            seed in any::<u64>(),
        ) {
            let shape = (3, 3, 3);
            let n = a.len();
            let mut order: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let permute = |bits: &[bool]| {
                let moved: Vec<bool> = order.iter().map(|&i| bits[i]).collect();
                mask_from_bits(shape, &moved)
            };
            let (ma, mb) = (mask_from_bits(shape, &a), mask_from_bits(shape, &b));
            let (pa, pb) = (permute(&a), permute(&b));
            match (dsc(&ma, &mb), dsc(&pa, &pb)) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x.to_bits(), y.to_bits()),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "permutation changed definedness"),
            }
            match (sen(&ma, &mb), sen(&pa, &pb)) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x.to_bits(), y.to_bits()),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "permutation changed definedness"),
            }
        }

        #[test]
        fn histogram_counts_sum_to_input_len(
            values in proptest::collection::vec(0.0f64..=1.0, 0..40),
            bins in 1usize..20,
        ) {
            let hist = dsc_histogram(&values, bins).unwrap();
            prop_assert_eq!(hist.len(), bins);
            prop_assert_eq!(hist.iter().map(|b| b.count).sum::<usize>(), values.len());
        }
    }
}
