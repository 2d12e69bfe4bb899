//! Synthetic CT phantoms: ellipsoidal nodules of six structural types
//! rendered into noisy HU volumes, plus simulated rater masks whose
//! consensus recovers the truth. Generation is a pure function of the spec,
//! seed included, so every artifact is reproducible.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmenter::SeedBox;
use crate::volume::{
    consensus_mask, BinaryMask3D, Characteristics, CtVolume, NoduleRecord, Shape, SpacingMm,
    VolumeError,
};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("nodule does not fit: {0}")]
    DoesNotFit(String),
    #[error("invalid rater jitter: {0}")]
    Jitter(String),
    #[error("empty mask cannot seed rater simulation")]
    EmptyMask,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// The six structural nodule types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoduleType {
    Isolated,
    Juxtapleural,
    #[serde(rename = "ggo")]
    GroundGlass,
    Cavitary,
    Calcified,
    Small,
}

impl NoduleType {
    pub const ALL: [NoduleType; 6] = [
        NoduleType::Isolated,
        NoduleType::Juxtapleural,
        NoduleType::GroundGlass,
        NoduleType::Cavitary,
        NoduleType::Calcified,
        NoduleType::Small,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            NoduleType::Isolated => "isolated",
            NoduleType::Juxtapleural => "juxtapleural",
            NoduleType::GroundGlass => "ggo",
            NoduleType::Cavitary => "cavitary",
            NoduleType::Calcified => "calcified",
            NoduleType::Small => "small",
        }
    }
}

impl std::fmt::Display for NoduleType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.slug())
    }
}

/// Everything needed to synthesize one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub nodule_type: NoduleType,
    pub diameter_mm: f64,
    /// Background lung parenchyma.
    pub lung_hu: f64,
    /// Solid nodule tissue; the pleural wall uses the same level.
    pub soft_hu: f64,
    /// Calcified nodule tissue.
    pub calcified_hu: f64,
    /// Ground-glass contrast as a fraction of the isolated contrast.
    pub ggo_ratio: f64,
    pub noise_std_hu: f64,
    pub spacing_mm: SpacingMm,
    pub shape: Shape,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            nodule_type: NoduleType::Isolated,
            diameter_mm: 10.0,
            lung_hu: -800.0,
            soft_hu: 40.0,
            calcified_hu: 700.0,
            ggo_ratio: 0.25,
            noise_std_hu: 10.0,
            spacing_mm: (1.0, 0.7, 0.7),
            shape: (24, 64, 64),
            seed: 1,
        }
    }
}

/// Largest relative eccentricity applied per axis.
const ECCENTRICITY: f64 = 0.03;

/// Ground-glass nodules may not exceed this fraction of the solid contrast.
pub const GGO_MAX_RATIO: f64 = 0.25;

/// Minimum HU step of calcification above soft tissue.
pub const CALCIFIED_MIN_DELTA_HU: f64 = 600.0;

/// Diameter bound of the "small" type, millimeters.
pub const SMALL_DIAMETER_MM: f64 = 6.0;

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Spec(m));
        if !(self.diameter_mm > 0.0) {
            return bad(format!("diameter {} must be positive", self.diameter_mm));
        }
        if self.shape.0 == 0 || self.shape.1 == 0 || self.shape.2 == 0 {
            return bad(format!("degenerate shape {:?}", self.shape));
        }
        let (sz, sr, sc) = self.spacing_mm;
        if !(sz > 0.0 && sr > 0.0 && sc > 0.0) {
            return bad(format!("spacing {:?} must be positive", self.spacing_mm));
        }
        let extent = (self.shape.0 as f64 * sz)
            .min(self.shape.1 as f64 * sr)
            .min(self.shape.2 as f64 * sc);
        if self.diameter_mm >= extent {
            return Err(PhantomError::DoesNotFit(format!(
                "diameter {} mm versus minimum extent {extent} mm",
                self.diameter_mm
            )));
        }
        if self.nodule_type == NoduleType::Small && self.diameter_mm >= SMALL_DIAMETER_MM {
            return bad(format!(
                "small type requires diameter < {SMALL_DIAMETER_MM} mm, got {}",
                self.diameter_mm
            ));
        }
        if self.noise_std_hu < 0.0 {
            return bad(format!("noise std {} must be >= 0", self.noise_std_hu));
        }
        if !(self.ggo_ratio > 0.0 && self.ggo_ratio <= GGO_MAX_RATIO) {
            return bad(format!(
                "ggo_ratio {} outside (0, {GGO_MAX_RATIO}]",
                self.ggo_ratio
            ));
        }
        if self.soft_hu <= self.lung_hu {
            return bad("soft tissue must sit above lung background".into());
        }
        if self.calcified_hu - self.soft_hu < CALCIFIED_MIN_DELTA_HU {
            return bad(format!(
                "calcified level must exceed soft tissue by {CALCIFIED_MIN_DELTA_HU} HU"
            ));
        }
        Ok(())
    }

    /// Nodule HU level implied by the type.
    pub fn nodule_hu(&self) -> f64 {
        match self.nodule_type {
            NoduleType::GroundGlass => self.lung_hu + self.ggo_ratio * (self.soft_hu - self.lung_hu),
            NoduleType::Calcified => self.calcified_hu,
            _ => self.soft_hu,
        }
    }
}

/// One synthesized case: scan, truth, simulated annotations, metadata and
/// the seed box an operator would draw.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub spec: PhantomSpec,
    pub volume: CtVolume,
    pub truth: BinaryMask3D,
    pub raters: Vec<BinaryMask3D>,
    /// `rater_masks` paths stay empty until the case is saved.
    pub record: NoduleRecord,
    pub seed_box: SeedBox,
}

struct Ellipsoid {
    /// Continuous center in voxel coordinates.
    center: (f64, f64, f64),
    /// Per-axis radii in voxel units.
    radii: (f64, f64, f64),
}

impl Ellipsoid {
    fn contains(&self, z: usize, r: usize, c: usize, scale: f64) -> bool {
        let dz = (z as f64 - self.center.0) / (self.radii.0 * scale);
        let dr = (r as f64 - self.center.1) / (self.radii.1 * scale);
        let dc = (c as f64 - self.center.2) / (self.radii.2 * scale);
        dz * dz + dr * dr + dc * dc <= 1.0
    }
}

fn place_ellipsoid(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Ellipsoid, PhantomError> {
    let (sz, sr, sc) = spec.spacing_mm;
    let half = spec.diameter_mm / 2.0;
    let ecc = |rng: &mut ChaCha8Rng| 1.0 + rng.random_range(-ECCENTRICITY..=ECCENTRICITY);
    let radii = (
        half * ecc(rng) / sz,
        half * ecc(rng) / sr,
        half * ecc(rng) / sc,
    );
    let dims = (
        spec.shape.0 as f64,
        spec.shape.1 as f64,
        spec.shape.2 as f64,
    );
    let pick = |rng: &mut ChaCha8Rng, radius: f64, dim: f64, axis: &str| {
        // Keep the ellipsoid interior with one clear background voxel.
        let lo = radius + 1.5;
        let hi = dim - 1.0 - radius - 1.5;
        if lo >= hi {
            return Err(PhantomError::DoesNotFit(format!(
                "axis {axis}: radius {radius:.2} voxels in {dim} voxels"
            )));
        }
        Ok(rng.random_range(lo..hi))
    };
    let center = (
        pick(rng, radii.0, dims.0, "z")?,
        pick(rng, radii.1, dims.1, "row")?,
        pick(rng, radii.2, dims.2, "col")?,
    );
    Ok(Ellipsoid { center, radii })
}

fn rasterize(shape: Shape, spacing: SpacingMm, e: &Ellipsoid) -> Result<BinaryMask3D, PhantomError> {
    let mut mask = BinaryMask3D::empty(shape, spacing)?;
    for z in 0..shape.0 {
        for r in 0..shape.1 {
            for c in 0..shape.2 {
                if e.contains(z, r, c, 1.0) {
                    mask.set(z, r, c, true);
                }
            }
        }
    }
    Ok(mask)
}

/// Seed box: the slice of largest footprint, its bounding box padded by 3
/// voxels and clamped to the slice.
fn seed_box_for(mask: &BinaryMask3D) -> SeedBox {
    let (_, rows, cols) = mask.shape();
    let best = mask
        .occupied_slices()
        .into_iter()
        .max_by_key(|&z| mask.slice(z).count())
        .expect("nonempty mask");
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (rows, 0, cols, 0);
    let plane = mask.slice(best);
    for r in 0..rows {
        for c in 0..cols {
            if plane.get(r, c) {
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
            }
        }
    }
    const PAD: usize = 3;
    SeedBox {
        slice: best,
        row_min: rmin.saturating_sub(PAD),
        col_min: cmin.saturating_sub(PAD),
        row_max: (rmax + PAD).min(rows - 1),
        col_max: (cmax + PAD).min(cols - 1),
    }
}

fn synthesize_record(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> NoduleRecord {
    let t = spec.nodule_type;
    let mut base = |v: f64| -> f64 {
        // Jitter below half a step, so scores round back to their base.
        v + rng.random_range(-0.4..=0.4)
    };
    let ggo = t == NoduleType::GroundGlass;
    let characteristics = Characteristics {
        diameter_mm: spec.diameter_mm,
        subtlety: base(if ggo || t == NoduleType::Small { 2.0 } else { 4.0 }),
        internal_structure: base(1.0),
        calcification: base(if t == NoduleType::Calcified { 1.0 } else { 6.0 }),
        sphericity: base(4.0),
        margin: base(if ggo { 2.0 } else { 4.0 }),
        lobulation: base(1.0),
        spiculation: base(1.0),
        texture: base(if ggo { 1.0 } else { 5.0 }),
        malignancy: base(3.0),
    };
    NoduleRecord {
        id: format!("{}-{}", t.slug(), spec.seed),
        rater_masks: vec![],
        characteristics,
        attached: Some(t == NoduleType::Juxtapleural),
    }
}

/// Builds one phantom case from the spec with the default rater jitter.
pub fn generate(spec: &PhantomSpec) -> Result<PhantomCase, PhantomError> {
    generate_with(spec, &RaterJitter::default())
}

/// Builds one phantom case from the spec. Identical specs and jitter produce
/// identical cases, bit for bit.
pub fn generate_with(spec: &PhantomSpec, jitter: &RaterJitter) -> Result<PhantomCase, PhantomError> {
    spec.validate()?;
    jitter.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ellipsoid = place_ellipsoid(spec, &mut rng)?;
    let truth = rasterize(spec.shape, spec.spacing_mm, &ellipsoid)?;
    if truth.count() == 0 {
        return Err(PhantomError::DoesNotFit(
            "rasterization produced no voxels".into(),
        ));
    }

    let (slices, rows, cols) = spec.shape;
    let mut hu = vec![spec.lung_hu; slices * rows * cols];
    let nodule_hu = spec.nodule_hu();
    for (i, v) in hu.iter_mut().enumerate() {
        if truth.data()[i] != 0 {
            *v = nodule_hu;
        }
    }

    if spec.nodule_type == NoduleType::Cavitary {
        for z in 0..slices {
            for r in 0..rows {
                for c in 0..cols {
                    if ellipsoid.contains(z, r, c, 0.5) {
                        hu[(z * rows + r) * cols + c] = spec.lung_hu;
                    }
                }
            }
        }
    }

    if spec.nodule_type == NoduleType::Juxtapleural {
        // Planar wall starting right past the nodule's widest column.
        let wall_col = truth
            .foreground()
            .iter()
            .map(|v| v.col)
            .max()
            .expect("nonempty mask")
            + 1;
        for z in 0..slices {
            for r in 0..rows {
                for c in wall_col..cols {
                    hu[(z * rows + r) * cols + c] = spec.soft_hu;
                }
            }
        }
    }

    if spec.noise_std_hu > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std_hu)
            .map_err(|e| PhantomError::Spec(format!("noise distribution: {e}")))?;
        for v in hu.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let data: Vec<i16> = hu
        .into_iter()
        .map(|v| v.round().clamp(-1024.0, 3071.0) as i16)
        .collect();
    let volume = CtVolume::from_data(spec.shape, spec.spacing_mm, data)?;

    let rater_seed: u64 = rng.random();
    let raters = simulate_raters(&truth, jitter, rater_seed)?;
    let record = synthesize_record(spec, &mut rng);
    let seed_box = seed_box_for(&truth);
    Ok(PhantomCase {
        spec: spec.clone(),
        volume,
        truth,
        raters,
        record,
        seed_box,
    })
}

/// Strength of the simulated inter-rater disagreement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaterJitter {
    /// Apply one erosion and one dilation among the four raters.
    pub morph: bool,
    /// Probability of toggling each boundary voxel.
    pub flip_rate: f64,
}

/// Upper bound on the boundary flip rate.
pub const MAX_FLIP_RATE: f64 = 0.05;

impl Default for RaterJitter {
    fn default() -> Self {
        Self {
            morph: true,
            flip_rate: 0.03,
        }
    }
}

impl RaterJitter {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(0.0..=MAX_FLIP_RATE).contains(&self.flip_rate) {
            return Err(PhantomError::Jitter(format!(
                "flip_rate {} outside [0, {MAX_FLIP_RATE}]",
                self.flip_rate
            )));
        }
        Ok(())
    }
}

fn neighbors6(shape: Shape, z: usize, r: usize, c: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let (zs, rs, cs) = shape;
    let deltas: [(i64, i64, i64); 6] = [
        (-1, 0, 0),
        (1, 0, 0),
        (0, -1, 0),
        (0, 1, 0),
        (0, 0, -1),
        (0, 0, 1),
    ];
    deltas.into_iter().filter_map(move |(dz, dr, dc)| {
        let (nz, nr, nc) = (z as i64 + dz, r as i64 + dr, c as i64 + dc);
        (nz >= 0
            && nr >= 0
            && nc >= 0
            && (nz as usize) < zs
            && (nr as usize) < rs
            && (nc as usize) < cs)
            .then_some((nz as usize, nr as usize, nc as usize))
    })
}

fn erode3(mask: &BinaryMask3D) -> Result<BinaryMask3D, PhantomError> {
    let shape = mask.shape();
    let mut out = BinaryMask3D::empty(shape, mask.spacing_mm())?;
    for v in mask.foreground() {
        let interior = neighbors6(shape, v.slice, v.row, v.col)
            .filter(|&(z, r, c)| mask.get(z, r, c))
            .count()
            == 6;
        if interior {
            out.set(v.slice, v.row, v.col, true);
        }
    }
    Ok(out)
}

fn dilate3(mask: &BinaryMask3D) -> Result<BinaryMask3D, PhantomError> {
    let shape = mask.shape();
    let mut out = BinaryMask3D::from_data(shape, mask.spacing_mm(), mask.data().to_vec())?;
    for v in mask.foreground() {
        for (z, r, c) in neighbors6(shape, v.slice, v.row, v.col) {
            out.set(z, r, c, true);
        }
    }
    Ok(out)
}

/// Voxels on either side of the surface: foreground with a background
/// 6-neighbor or background with a foreground 6-neighbor.
fn boundary_band(mask: &BinaryMask3D) -> Vec<(usize, usize, usize)> {
    let shape = mask.shape();
    let mut out = Vec::new();
    for z in 0..shape.0 {
        for r in 0..shape.1 {
            for c in 0..shape.2 {
                let here = mask.get(z, r, c);
                let mixed = neighbors6(shape, z, r, c).any(|(nz, nr, nc)| mask.get(nz, nr, nc) != here)
                    || (here && neighbors6(shape, z, r, c).count() < 6);
                if mixed {
                    out.push((z, r, c));
                }
            }
        }
    }
    out
}

/// Four annotation variants of a mask: one eroded, one dilated, two kept,
/// all with independent boundary flips. A perturbation that would empty a
/// mask is skipped for that rater.
pub fn simulate_raters(
    truth: &BinaryMask3D,
    jitter: &RaterJitter,
    seed: u64,
) -> Result<Vec<BinaryMask3D>, PhantomError> {
    if truth.count() == 0 {
        return Err(PhantomError::EmptyMask);
    }
    jitter.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    #[derive(Clone, Copy)]
    enum Morph {
        Keep,
        Erode,
        Dilate,
    }
    let mut ops = if jitter.morph {
        vec![Morph::Erode, Morph::Dilate, Morph::Keep, Morph::Keep]
    } else {
        vec![Morph::Keep; 4]
    };
    ops.shuffle(&mut rng);
    let sub_seeds: [u64; 4] = rng.random();

    let mut raters = Vec::with_capacity(4);
    for (op, sub) in ops.into_iter().zip(sub_seeds) {
        let mut rater_rng = ChaCha8Rng::seed_from_u64(sub);
        let mut m = match op {
            Morph::Keep => truth.clone(),
            Morph::Erode => {
                let e = erode3(truth)?;
                if e.count() == 0 {
                    truth.clone()
                } else {
                    e
                }
            }
            Morph::Dilate => dilate3(truth)?,
        };
        if jitter.flip_rate > 0.0 {
            let flipped = {
                let mut f = m.clone();
                for (z, r, c) in boundary_band(&m) {
                    if rater_rng.random_bool(jitter.flip_rate) {
                        let cur = f.get(z, r, c);
                        f.set(z, r, c, !cur);
                    }
                }
                f
            };
            if flipped.count() > 0 {
                m = flipped;
            }
        }
        raters.push(m);
    }
    Ok(raters)
}

/// Majority vote of the simulated raters, quorum 2 of 4.
pub fn rater_consensus(raters: &[BinaryMask3D]) -> Result<BinaryMask3D, PhantomError> {
    Ok(consensus_mask(raters)?)
}
