//! Glue between the modules: synthetic dataset generation and storage,
//! case splitting, patch provision during training, the propagation-based
//! inference path, an intensity-threshold baseline for calibration, report
//! assembly, and the ablation harness. Every function is deterministic
//! given its config, so composed runs and one-shot runs agree bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, DatasetConfig, PipelineConfig, SMALL_DRAW_MM};
use crate::evaluator::{
    consistency_matrix, dsc, dsc_histogram, evaluate_set, group_report, ConsistencyMatrix,
    ConsistencySource, EvalCase, EvalError, GroupingReport, HistogramBin, MetricReport,
    MetricSummary,
};
use crate::net::scalar::Scalar;
use crate::net::tensor::Tensor;
use crate::net::{DbResNet, NetError};
use crate::patch::{
    extract_pair, MultiScalePatch, MultiViewPatch, PatchChannels, PatchError, PatchSpec,
};
use crate::phantom::{generate_with, NoduleType, PhantomCase, PhantomError, PhantomSpec};
use crate::sampler::{
    plan_dataset, ManifestEntry, PlanOutcome, SamplerConfig, SamplerError, SamplingCase,
    SamplingStrategy,
};
use crate::segmenter::{
    classify_slice, propagate, NetworkClassifier, PropagationTrace, SeedBox, SegmentError,
    SegmentationResult, SliceClassifier, StopReason, TraceStep,
};
use crate::trainer::{train, EpochStats, PatchProvider, TrainError, TrainOutcome};
use crate::volume::{
    consensus_mask, load_mask, load_nodule_record, load_volume, normalize_hu, resolve_relative,
    save_mask, save_nodule_record, save_volume, BinaryMask3D, CtVolume, NoduleRecord,
    NormalizedVolume, VolumeError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed json {path}: {reason}")]
    Json { path: PathBuf, reason: String },
}

/// Coarse failure class, mapped to distinct process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Io,
    Numerical,
}

fn volume_kind(e: &VolumeError) -> FailureKind {
    match e {
        VolumeError::Io { .. }
        | VolumeError::MalformedHeader { .. }
        | VolumeError::TruncatedPayload { .. }
        | VolumeError::PayloadMismatch { .. } => FailureKind::Io,
        VolumeError::ShapeMismatch(_) | VolumeError::InvalidArgument(_) => FailureKind::Config,
    }
}

fn net_kind(e: &NetError) -> FailureKind {
    match e {
        NetError::Io { .. } | NetError::Checkpoint(_) => FailureKind::Io,
        NetError::Config(_) | NetError::InvalidArgument(_) => FailureKind::Config,
    }
}

impl PipelineError {
    pub fn kind(&self) -> FailureKind {
        match self {
            PipelineError::Config(ConfigError::Io { .. }) => FailureKind::Io,
            PipelineError::Config(_) => FailureKind::Config,
            PipelineError::Phantom(PhantomError::Volume(v)) => volume_kind(v),
            PipelineError::Phantom(_) => FailureKind::Config,
            PipelineError::Volume(v) => volume_kind(v),
            PipelineError::Sampler(SamplerError::Io { .. })
            | PipelineError::Sampler(SamplerError::MalformedManifest { .. }) => FailureKind::Io,
            PipelineError::Sampler(_) => FailureKind::Config,
            PipelineError::Patch(_) => FailureKind::Config,
            PipelineError::Net(e) => net_kind(e),
            PipelineError::Train(TrainError::NonFinite(_)) => FailureKind::Numerical,
            PipelineError::Train(TrainError::Net(e)) => net_kind(e),
            PipelineError::Train(_) => FailureKind::Config,
            PipelineError::Segment(SegmentError::Net(e)) => net_kind(e),
            PipelineError::Segment(SegmentError::Volume(v)) => volume_kind(v),
            PipelineError::Segment(_) => FailureKind::Config,
            PipelineError::Eval(EvalError::Undefined(_)) => FailureKind::Numerical,
            PipelineError::Eval(EvalError::Volume(v)) => volume_kind(v),
            PipelineError::Eval(_) => FailureKind::Config,
            PipelineError::Io { .. } | PipelineError::Json { .. } => FailureKind::Io,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One dataset case as listed in the manifest; paths are relative to the
/// manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub volume: String,
    pub truth: String,
    pub record: String,
    pub nodule_type: NoduleType,
    pub diameter_mm: f64,
    pub seed_box: SeedBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub cases: Vec<CaseEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Json {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn save_case(case: &PhantomCase, root: &Path, id: &str) -> Result<CaseEntry, PipelineError> {
    let rel_dir = format!("cases/{id}");
    let dir = root.join(&rel_dir);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    save_volume(&case.volume, &dir.join("volume.json"))?;
    save_mask(&case.truth, &dir.join("truth.json"))?;
    let mut record = case.record.clone();
    record.rater_masks = (0..case.raters.len())
        .map(|k| format!("rater-{k}.json"))
        .collect();
    for (k, m) in case.raters.iter().enumerate() {
        save_mask(m, &dir.join(format!("rater-{k}.json")))?;
    }
    save_nodule_record(&record, &dir.join("record.json"))?;
    Ok(CaseEntry {
        id: id.to_string(),
        volume: format!("{rel_dir}/volume.json"),
        truth: format!("{rel_dir}/truth.json"),
        record: format!("{rel_dir}/record.json"),
        nodule_type: case.spec.nodule_type,
        diameter_mm: case.spec.diameter_mm,
        seed_box: case.seed_box,
    })
}

/// Synthesizes `cfg.count` cases under `dir` and writes `manifest.json`.
/// Types rotate round-robin; diameters draw from the configured range,
/// except small-type cases which draw from [`SMALL_DRAW_MM`].
pub fn generate_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<DatasetManifest, PipelineError> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let t = cfg.types[i % cfg.types.len()];
        let (lo, hi) = if t == NoduleType::Small {
            SMALL_DRAW_MM
        } else {
            cfg.diameter_mm
        };
        let d = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let spec = PhantomSpec {
            nodule_type: t,
            diameter_mm: d,
            lung_hu: cfg.lung_hu,
            soft_hu: cfg.soft_hu,
            calcified_hu: cfg.calcified_hu,
            ggo_ratio: cfg.ggo_ratio,
            noise_std_hu: cfg.noise_std_hu,
            spacing_mm: cfg.spacing_mm,
            shape: cfg.shape,
            seed: rng.random(),
        };
        let mut case = generate_with(&spec, &cfg.rater_jitter)?;
        let id = format!("case-{i:03}-{}", t.slug());
        case.record.id = id.clone();
        entries.push(save_case(&case, dir, &id)?);
    }
    let manifest = DatasetManifest { cases: entries };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// One case with all artifacts in memory.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub id: String,
    pub nodule_type: NoduleType,
    pub seed_box: SeedBox,
    pub volume: CtVolume,
    pub truth: BinaryMask3D,
    pub raters: Vec<BinaryMask3D>,
    pub record: NoduleRecord,
}

impl From<PhantomCase> for LoadedCase {
    fn from(case: PhantomCase) -> Self {
        Self {
            id: case.record.id.clone(),
            nodule_type: case.spec.nodule_type,
            seed_box: case.seed_box,
            volume: case.volume,
            truth: case.truth,
            raters: case.raters,
            record: case.record,
        }
    }
}

pub fn load_case(manifest_path: &Path, entry: &CaseEntry) -> Result<LoadedCase, PipelineError> {
    let volume = load_volume(&resolve_relative(manifest_path, &entry.volume))?;
    let truth = load_mask(&resolve_relative(manifest_path, &entry.truth))?;
    let record_path = resolve_relative(manifest_path, &entry.record);
    let record = load_nodule_record(&record_path)?;
    let raters = record
        .rater_masks
        .iter()
        .map(|rel| load_mask(&resolve_relative(&record_path, rel)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LoadedCase {
        id: entry.id.clone(),
        nodule_type: entry.nodule_type,
        seed_box: entry.seed_box,
        volume,
        truth,
        raters,
        record,
    })
}

pub fn load_all_cases(
    manifest_path: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<LoadedCase>, PipelineError> {
    manifest
        .cases
        .iter()
        .map(|e| load_case(manifest_path, e))
        .collect()
}

/// Splits `count` cases into disjoint train and validation index sets,
/// both sorted. Validation gets `round(val_fraction * count)` cases,
/// clamped so neither side is empty.
pub fn split_cases(
    count: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    if count < 2 {
        return Err(ConfigError::Invalid(format!("cannot split {count} case(s)")).into());
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(ConfigError::Invalid(format!(
            "val_fraction {val_fraction} outside (0, 1)"
        ))
        .into());
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_n = ((val_fraction * count as f64).round() as usize).clamp(1, count - 1);
    let mut val: Vec<usize> = idx[..val_n].to_vec();
    let mut train: Vec<usize> = idx[val_n..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Feeds training with patches extracted from held volumes. With the scale
/// branch off, the multi-scale stack degenerates to three copies of the
/// native crop, keeping the network shape while removing the scale signal.
pub struct VolumeProvider {
    spec: PatchSpec,
    scale_branch: bool,
    volumes: BTreeMap<String, NormalizedVolume>,
}

impl VolumeProvider {
    pub fn new(spec: PatchSpec, scale_branch: bool) -> Result<Self, PipelineError> {
        spec.validate()?;
        Ok(Self {
            spec,
            scale_branch,
            volumes: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, id: &str, vol: NormalizedVolume) {
        self.volumes.insert(id.to_string(), vol);
    }

    pub fn from_cases(
        spec: PatchSpec,
        scale_branch: bool,
        window: crate::volume::HuWindow,
        cases: &[&LoadedCase],
    ) -> Result<Self, PipelineError> {
        let mut p = Self::new(spec, scale_branch)?;
        for case in cases {
            p.insert(&case.id, normalize_hu(&case.volume, window)?);
        }
        Ok(p)
    }
}

fn flatten_scales(spec: &PatchSpec, ms: &MultiScalePatch) -> Result<MultiScalePatch, PatchError> {
    let native = ms.0.channel(2);
    let mut data = Vec::with_capacity(3 * native.len());
    for _ in 0..3 {
        data.extend_from_slice(native);
    }
    Ok(MultiScalePatch(PatchChannels::from_data(
        spec.view_size,
        data,
    )?))
}

impl PatchProvider for VolumeProvider {
    fn view_size(&self) -> usize {
        self.spec.view_size
    }

    fn patch_pair(
        &self,
        entry: &ManifestEntry,
    ) -> Result<(MultiViewPatch, MultiScalePatch), PatchError> {
        let vol = self.volumes.get(&entry.volume_id).ok_or_else(|| {
            PatchError::InvalidSpec(format!("unknown volume `{}`", entry.volume_id))
        })?;
        let (mv, ms) = extract_pair(vol, entry.voxel, &self.spec)?;
        let ms = if self.scale_branch {
            ms
        } else {
            flatten_scales(&self.spec, &ms)?
        };
        Ok((mv, ms))
    }
}

/// Plans voxel samples over the given cases using their true masks.
pub fn plan_samples(
    sampler: &SamplerConfig,
    cases: &[&LoadedCase],
) -> Result<PlanOutcome, PipelineError> {
    let sampling: Vec<SamplingCase<'_>> = cases
        .iter()
        .map(|c| SamplingCase {
            volume_id: c.id.clone(),
            mask: &c.truth,
            diameter_mm: c.record.characteristics.diameter_mm,
        })
        .collect();
    Ok(plan_dataset(&sampling, sampler)?)
}

/// Pipeline-level switches that have no place in the config document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainOptions {
    pub scale_branch: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { scale_branch: true }
    }
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub train_samples: usize,
    pub val_samples: usize,
}

/// Mixes the validation sampling stream away from the training one.
const VAL_SEED_SALT: u64 = 0x76616c;

/// Splits the cases, plans samples, builds the network from the config and
/// trains it. The best-validation checkpoint lands in `out_dir`.
pub fn train_model<S: Scalar>(
    cfg: &PipelineConfig,
    cases: &[LoadedCase],
    opts: &TrainOptions,
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<(DbResNet<S>, TrainArtifacts), PipelineError> {
    cfg.validate()?;
    let (train_idx, val_idx) = split_cases(cases.len(), cfg.trainer.val_fraction, cfg.trainer.seed)?;
    let train_cases: Vec<&LoadedCase> = train_idx.iter().map(|&i| &cases[i]).collect();
    let val_cases: Vec<&LoadedCase> = val_idx.iter().map(|&i| &cases[i]).collect();

    let train_plan = plan_samples(&cfg.sampler, &train_cases)?;
    let val_sampler = SamplerConfig {
        seed: cfg.sampler.seed ^ VAL_SEED_SALT,
        max_total_samples: cfg.sampler.max_total_samples.map(|m| (m / 5).max(1)),
        ..cfg.sampler.clone()
    };
    let val_plan = plan_samples(&val_sampler, &val_cases)?;

    let mut everything = train_cases.clone();
    everything.extend(val_cases.iter().copied());
    let provider = VolumeProvider::from_cases(cfg.patch, opts.scale_branch, cfg.window, &everything)?;

    let mut net = DbResNet::<S>::new(&cfg.network)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let checkpoint = out_dir.join("model.ckpt.json");
    let outcome = train(
        &mut net,
        &train_plan.manifest,
        &val_plan.manifest,
        &provider,
        &cfg.trainer,
        &checkpoint,
        |s| on_epoch(s),
    )?;
    Ok((
        net,
        TrainArtifacts {
            outcome,
            checkpoint,
            train_ids: train_cases.iter().map(|c| c.id.clone()).collect(),
            val_ids: val_cases.iter().map(|c| c.id.clone()).collect(),
            train_samples: train_plan.manifest.len(),
            val_samples: val_plan.manifest.len(),
        },
    ))
}

/// Network classifier with the multi-scale input flattened to the native
/// crop, the inference-side counterpart of a scale-off [`VolumeProvider`].
struct FlatScaleClassifier<'a, S: Scalar> {
    net: &'a mut DbResNet<S>,
    spec: PatchSpec,
    batch_size: usize,
}

impl<S: Scalar> SliceClassifier for FlatScaleClassifier<'_, S> {
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
                let (mv, ms) = extract_pair(
                    vol,
                    crate::volume::VoxelIndex::new(slice, r, c),
                    &self.spec,
                )?;
                let ms = flatten_scales(&self.spec, &ms)?;
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

/// Propagation without per-slice region selection: the raw thresholded
/// masks are kept, with the same stop rules.
pub fn propagate_raw(
    classifier: &mut dyn SliceClassifier,
    vol: &NormalizedVolume,
    seed: &SeedBox,
    cfg: &crate::segmenter::PropagationConfig,
) -> Result<SegmentationResult, SegmentError> {
    cfg.validate()?;
    seed.validate(vol.shape())?;
    let (slices, rows, cols) = vol.shape();
    let box_voxels = seed.voxels();
    let slice_fg = |mask: &crate::segmenter::SliceMaskBuf| -> Vec<(usize, usize)> {
        box_voxels
            .iter()
            .copied()
            .filter(|&(r, c)| mask.view().get(r, c))
            .collect()
    };

    let mut mask = BinaryMask3D::empty((slices, rows, cols), vol.spacing_mm())?;
    let mut steps = Vec::new();

    let start = classify_slice(classifier, vol, seed.slice, seed, cfg.threshold)?;
    let start_fg = slice_fg(&start.mask);
    if start_fg.is_empty() {
        steps.push(TraceStep {
            slice: seed.slice,
            area: 0,
            overlap_ratio: 0.0,
            accepted: false,
        });
        return Ok(SegmentationResult {
            mask,
            trace: PropagationTrace {
                seed: *seed,
                threshold: cfg.threshold,
                stop_ratio: cfg.stop_ratio,
                steps,
                stop_backward: StopReason::EmptyStart,
                stop_forward: StopReason::EmptyStart,
            },
        });
    }
    mask.write_slice(seed.slice, &start_fg);
    steps.push(TraceStep {
        slice: seed.slice,
        area: start_fg.len(),
        overlap_ratio: 1.0,
        accepted: true,
    });

    let mut walk = |dir: &mut dyn Iterator<Item = usize>,
                    steps: &mut Vec<TraceStep>,
                    mask: &mut BinaryMask3D|
     -> Result<StopReason, SegmentError> {
        let mut prev = start_fg.clone();
        for z in dir {
            let got = classify_slice(classifier, vol, z, seed, cfg.threshold)?;
            let fg = slice_fg(&got.mask);
            if fg.is_empty() {
                steps.push(TraceStep {
                    slice: z,
                    area: 0,
                    overlap_ratio: 0.0,
                    accepted: false,
                });
                return Ok(StopReason::EmptyMask);
            }
            let prev_set: std::collections::HashSet<(usize, usize)> =
                prev.iter().copied().collect();
            let inter = fg.iter().filter(|v| prev_set.contains(v)).count();
            let ratio = inter as f64 / prev.len() as f64;
            if (inter as f64) < cfg.stop_ratio * prev.len() as f64 {
                steps.push(TraceStep {
                    slice: z,
                    area: fg.len(),
                    overlap_ratio: ratio,
                    accepted: false,
                });
                return Ok(StopReason::LowOverlap);
            }
            mask.write_slice(z, &fg);
            steps.push(TraceStep {
                slice: z,
                area: fg.len(),
                overlap_ratio: ratio,
                accepted: true,
            });
            prev = fg;
        }
        Ok(StopReason::VolumeEdge)
    };

    let stop_backward = walk(&mut (0..seed.slice).rev(), &mut steps, &mut mask)?;
    let stop_forward = walk(&mut (seed.slice + 1..slices), &mut steps, &mut mask)?;
    steps.sort_by_key(|s| s.slice);
    Ok(SegmentationResult {
        mask,
        trace: PropagationTrace {
            seed: *seed,
            threshold: cfg.threshold,
            stop_ratio: cfg.stop_ratio,
            steps,
            stop_backward,
            stop_forward,
        },
    })
}

fn run_propagation(
    classifier: &mut dyn SliceClassifier,
    vol: &NormalizedVolume,
    seed: &SeedBox,
    seg: &crate::config::SegmenterConfig,
) -> Result<SegmentationResult, SegmentError> {
    if seg.post {
        propagate(classifier, vol, seed, &seg.propagation)
    } else {
        propagate_raw(classifier, vol, seed, &seg.propagation)
    }
}

/// Segments one volume from its seed box with the trained network.
pub fn segment_case<S: Scalar>(
    net: &mut DbResNet<S>,
    cfg: &PipelineConfig,
    volume: &CtVolume,
    seed: &SeedBox,
    opts: &TrainOptions,
) -> Result<SegmentationResult, PipelineError> {
    let norm = normalize_hu(volume, cfg.window)?;
    let result = if opts.scale_branch {
        let mut clf = NetworkClassifier::new(net, cfg.patch, cfg.segmenter.batch_size)?;
        run_propagation(&mut clf, &norm, seed, &cfg.segmenter)?
    } else {
        let mut clf = FlatScaleClassifier {
            net,
            spec: cfg.patch,
            batch_size: cfg.segmenter.batch_size,
        };
        run_propagation(&mut clf, &norm, seed, &cfg.segmenter)?
    };
    Ok(result)
}

/// Segments every case, returning results in case order.
pub fn segment_cases<S: Scalar>(
    net: &mut DbResNet<S>,
    cfg: &PipelineConfig,
    cases: &[&LoadedCase],
    opts: &TrainOptions,
) -> Result<Vec<SegmentationResult>, PipelineError> {
    cases
        .iter()
        .map(|c| segment_case(net, cfg, &c.volume, &c.seed_box, opts))
        .collect()
}

/// Scores predictions against the true masks, aligned by position.
pub fn evaluate_predictions(
    cases: &[&LoadedCase],
    masks: &[&BinaryMask3D],
) -> Result<MetricReport, PipelineError> {
    if cases.len() != masks.len() {
        return Err(
            ConfigError::Invalid(format!("{} cases, {} masks", cases.len(), masks.len())).into(),
        );
    }
    let eval_cases: Vec<EvalCase<'_>> = cases
        .iter()
        .zip(masks)
        .map(|(c, m)| EvalCase {
            id: c.id.clone(),
            gt: &c.truth,
            seg: m,
        })
        .collect();
    Ok(evaluate_set(&eval_cases)?)
}

/// Labels a voxel by which calibrated intensity level it sits closer to.
/// The probability is the normalized distance to the background level, so
/// the 0.5 threshold falls halfway between the two levels.
pub struct IntensityClassifier {
    pub fg: f64,
    pub bg: f64,
}

impl SliceClassifier for IntensityClassifier {
    fn probabilities(
        &mut self,
        vol: &NormalizedVolume,
        slice: usize,
        voxels: &[(usize, usize)],
    ) -> Result<Vec<f64>, SegmentError> {
        Ok(voxels
            .iter()
            .map(|&(r, c)| {
                let x = vol.get(slice, r, c) as f64;
                let df = (x - self.fg).abs();
                let db = (x - self.bg).abs();
                if df + db == 0.0 {
                    0.5
                } else {
                    db / (df + db)
                }
            })
            .collect())
    }
}

/// Derives the two intensity levels from the seed box contents: the mean
/// of the brightest and darkest quartiles on the starting slice.
pub fn calibrate_intensity(
    vol: &NormalizedVolume,
    seed: &SeedBox,
) -> Result<IntensityClassifier, PipelineError> {
    seed.validate(vol.shape()).map_err(PipelineError::Segment)?;
    let mut vals: Vec<f64> = seed
        .voxels()
        .iter()
        .map(|&(r, c)| vol.get(seed.slice, r, c) as f64)
        .collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("normalized intensities are finite"));
    let q = (vals.len() / 4).max(1);
    let bg = vals[..q].iter().sum::<f64>() / q as f64;
    let fg = vals[vals.len() - q..].iter().sum::<f64>() / q as f64;
    Ok(IntensityClassifier { fg, bg })
}

/// Learning-free reference segmenter: calibrated intensity thresholding
/// pushed through the same propagation path. Used to sanity-check that the
/// phantom task is solvable before judging the network.
pub fn threshold_baseline(
    cfg: &PipelineConfig,
    cases: &[&LoadedCase],
) -> Result<MetricReport, PipelineError> {
    let mut masks = Vec::with_capacity(cases.len());
    for case in cases {
        let norm = normalize_hu(&case.volume, cfg.window)?;
        let mut clf = calibrate_intensity(&norm, &case.seed_box)?;
        let result = run_propagation(&mut clf, &norm, &case.seed_box, &cfg.segmenter)?;
        masks.push(result.mask);
    }
    let refs: Vec<&BinaryMask3D> = masks.iter().collect();
    evaluate_predictions(cases, &refs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsensusOutcome {
    pub id: String,
    pub path: PathBuf,
    /// DSC of the rater consensus against the stored truth, when defined.
    pub dsc_vs_truth: Option<f64>,
}

/// Rebuilds the 50%-quorum consensus of each case's rater masks and writes
/// it as `consensus.json` beside the truth mask.
pub fn write_consensus_masks(
    manifest_path: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<ConsensusOutcome>, PipelineError> {
    let mut out = Vec::with_capacity(manifest.cases.len());
    for entry in &manifest.cases {
        let case = load_case(manifest_path, entry)?;
        let consensus = consensus_mask(&case.raters)?;
        let truth_path = resolve_relative(manifest_path, &entry.truth);
        let path = truth_path.with_file_name("consensus.json");
        save_mask(&consensus, &path)?;
        let dsc_vs_truth = match dsc(&case.truth, &consensus) {
            Ok(v) => Some(v),
            Err(EvalError::Undefined(_)) => None,
            Err(e) => return Err(e.into()),
        };
        out.push(ConsensusOutcome {
            id: entry.id.clone(),
            path,
            dsc_vs_truth,
        });
    }
    Ok(out)
}

/// Everything `report` emits: per-nodule metrics, grouped means, the
/// rater/prediction consistency matrix, and the DSC histogram.
#[derive(Debug, Clone, Serialize)]
pub struct ReportBundle {
    pub metrics: MetricReport,
    pub groups: GroupingReport,
    pub consistency: ConsistencyMatrix,
    pub histogram: Vec<HistogramBin>,
}

impl ReportBundle {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.metrics.to_text());
        out.push('\n');
        out.push_str(&self.groups.to_text());
        out.push('\n');
        out.push_str(&self.consistency.to_text());
        out.push('\n');
        out.push_str("dsc histogram\n");
        out.push_str(&crate::evaluator::histogram_csv(&self.histogram));
        out
    }
}

pub fn build_report(
    cfg: &PipelineConfig,
    cases: &[&LoadedCase],
    masks: &[&BinaryMask3D],
) -> Result<ReportBundle, PipelineError> {
    let metrics = evaluate_predictions(cases, masks)?;
    let mut records = Vec::new();
    let mut dscs = Vec::new();
    for (case, nodule) in cases.iter().zip(&metrics.nodules) {
        if let Some(d) = nodule.dsc {
            records.push(case.record.clone());
            dscs.push(d);
        }
    }
    let groups = group_report(&records, &dscs)?;

    let rater_count = cases
        .iter()
        .map(|c| c.raters.len())
        .min()
        .unwrap_or_default();
    let mut sources = Vec::new();
    for k in 0..rater_count {
        sources.push(ConsistencySource {
            name: format!("rater-{}", k + 1),
            masks: cases.iter().map(|c| &c.raters[k]).collect(),
        });
    }
    sources.push(ConsistencySource {
        name: "consensus".into(),
        masks: cases.iter().map(|c| &c.truth).collect(),
    });
    sources.push(ConsistencySource {
        name: "predicted".into(),
        masks: masks.to_vec(),
    });
    let consistency = consistency_matrix(&sources)?;
    let histogram = dsc_histogram(&dscs, cfg.evaluator.histogram_bins)?;
    Ok(ReportBundle {
        metrics,
        groups,
        consistency,
        histogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub cases: usize,
    pub dsc: Option<MetricSummary>,
    pub asd_mm: Option<MetricSummary>,
    pub sen: Option<MetricSummary>,
    pub ppv: Option<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn mean_std(s: &Option<MetricSummary>) -> String {
    match s {
        Some(m) => format!("{:.4} \u{b1} {:.4}", m.mean, m.std),
        None => "n/a".into(),
    }
}

impl AblationReport {
    /// One line per configuration, columns DSC / ASD / SEN / PPV as
    /// mean-and-spread pairs.
    pub fn to_text(&self) -> String {
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(["configuration".len()])
            .max()
            .unwrap_or(0);
        let mut out = format!(
            "{:label_w$}  {:>7}  {:>17}  {:>17}  {:>17}  {:>17}\n",
            "configuration", "cases", "DSC", "ASD (mm)", "SEN", "PPV"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:label_w$}  {:>7}  {:>17}  {:>17}  {:>17}  {:>17}\n",
                r.label,
                r.cases,
                mean_std(&r.dsc),
                mean_std(&r.asd_mm),
                mean_std(&r.sen),
                mean_std(&r.ppv),
            ));
        }
        out
    }
}

/// Trains, segments the held-out cases and scores one configuration per
/// configured row. Each row composes the same `train_model`,
/// `segment_cases` and `evaluate_predictions` calls a manual run would
/// make, with the row's toggles substituted into the config.
pub fn run_ablation<S: Scalar>(
    cfg: &PipelineConfig,
    cases: &[LoadedCase],
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<AblationReport, PipelineError> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.ablation.rows.len());
    for (i, toggle) in cfg.ablation.rows.iter().enumerate() {
        let mut row_cfg = cfg.clone();
        row_cfg.network.depth_variant = toggle.variant;
        row_cfg.network.cip_placement = toggle.cip;
        row_cfg.sampler.strategy = if toggle.bws {
            SamplingStrategy::BoundaryWeighted
        } else {
            SamplingStrategy::UniformFraction {
                fraction: cfg.ablation.uniform_fraction,
            }
        };
        row_cfg.segmenter.post = toggle.post;
        row_cfg.validate()?;
        let opts = TrainOptions {
            scale_branch: toggle.scale,
        };

        let row_dir = out_dir.join(format!("row-{i:02}"));
        let (mut net, artifacts) = train_model::<S>(&row_cfg, cases, &opts, &row_dir, on_epoch)?;
        let (_, val_idx) =
            split_cases(cases.len(), row_cfg.trainer.val_fraction, row_cfg.trainer.seed)?;
        debug_assert_eq!(
            artifacts.val_ids,
            val_idx.iter().map(|&i| cases[i].id.clone()).collect::<Vec<_>>()
        );
        let held_out: Vec<&LoadedCase> = val_idx.iter().map(|&i| &cases[i]).collect();
        let results = segment_cases(&mut net, &row_cfg, &held_out, &opts)?;
        let mask_refs: Vec<&BinaryMask3D> = results.iter().map(|r| &r.mask).collect();
        let report = evaluate_predictions(&held_out, &mask_refs)?;
        rows.push(AblationRow {
            label: toggle.label(),
            cases: held_out.len(),
            dsc: report.dsc,
            asd_mm: report.asd_mm,
            sen: report.sen,
            ppv: report.ppv,
        });
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AblationToggle;
    use crate::phantom::generate;

    fn small_dataset_cfg() -> DatasetConfig {
        DatasetConfig {
            count: 4,
            types: vec![NoduleType::Isolated, NoduleType::Juxtapleural],
            diameter_mm: (6.5, 8.5),
            noise_std_hu: 8.0,
            spacing_mm: (1.0, 0.7, 0.7),
            shape: (16, 40, 40),
            seed: 5,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn dataset_generation_round_trips_and_is_deterministic() {
        let cfg = small_dataset_cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let man_a = generate_dataset(&cfg, dir_a.path()).unwrap();
        let man_b = generate_dataset(&cfg, dir_b.path()).unwrap();
        assert_eq!(man_a, man_b);
        assert_eq!(man_a.cases.len(), 4);
        assert_eq!(man_a.cases[1].nodule_type, NoduleType::Juxtapleural);

        let manifest_path = dir_a.path().join("manifest.json");
        let loaded_man = DatasetManifest::load(&manifest_path).unwrap();
        assert_eq!(loaded_man, man_a);

        let cases_a = load_all_cases(&manifest_path, &man_a).unwrap();
        let cases_b = load_all_cases(&dir_b.path().join("manifest.json"), &man_b).unwrap();
        for (a, b) in cases_a.iter().zip(&cases_b) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.volume.data(), b.volume.data());
            assert_eq!(a.truth.data(), b.truth.data());
            assert_eq!(a.raters.len(), 4);
            assert_eq!(a.record, b.record);
            assert_eq!(a.record.id, a.id);
            assert!(a.seed_box.validate(a.volume.shape()).is_ok());
        }
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let (train, val) = split_cases(10, 0.2, 3).unwrap();
        assert_eq!(val.len(), 2);
        assert_eq!(train.len(), 8);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_cases(10, 0.2, 3).unwrap(), (train, val));
        assert_ne!(split_cases(10, 0.2, 4).unwrap(), split_cases(10, 0.2, 3).unwrap());

        // Neither side may be empty.
        let (t, v) = split_cases(2, 0.01, 1).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
        assert!(split_cases(1, 0.5, 1).is_err());
        assert!(split_cases(4, 1.0, 1).is_err());
    }

    #[test]
    fn provider_flattens_scales_when_asked() {
        let case: LoadedCase = generate(&PhantomSpec {
            diameter_mm: 8.0,
            shape: (16, 40, 40),
            seed: 9,
            ..PhantomSpec::default()
        })
        .unwrap()
        .into();
        let spec = PatchSpec {
            view_size: 15,
            scale_sizes: [25, 19, 15],
        };
        let window = crate::volume::HuWindow::default();
        let on = VolumeProvider::from_cases(spec, true, window, &[&case]).unwrap();
        let off = VolumeProvider::from_cases(spec, false, window, &[&case]).unwrap();
        let entry = ManifestEntry {
            volume_id: case.id.clone(),
            voxel: crate::volume::VoxelIndex::new(8, 20, 20),
            label: crate::sampler::SampleLabel::Nodule,
            tag: crate::sampler::SampleTag::Interior,
        };
        let (mv_on, ms_on) = on.patch_pair(&entry).unwrap();
        let (mv_off, ms_off) = off.patch_pair(&entry).unwrap();
        assert_eq!(mv_on.0.data(), mv_off.0.data());
        let native = ms_on.0.channel(2);
        for ch in 0..3 {
            assert_eq!(ms_off.0.channel(ch), native, "channel {ch}");
        }
        assert_ne!(ms_on.0.channel(0), native, "scales should differ when on");

        let missing = ManifestEntry {
            volume_id: "nope".into(),
            ..entry
        };
        assert!(on.patch_pair(&missing).is_err());
    }

    #[test]
    fn consensus_writer_reproduces_truth_closely() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&small_dataset_cfg(), dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let outcomes = write_consensus_masks(&manifest_path, &manifest).unwrap();
        assert_eq!(outcomes.len(), manifest.cases.len());
        for o in &outcomes {
            assert!(o.path.is_file(), "{:?}", o.path);
            let d = o.dsc_vs_truth.unwrap();
            assert!(d >= 0.95, "{}: consensus dsc {d}", o.id);
        }
    }

    fn tiny_pipeline_cfg() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.phantom = DatasetConfig {
            count: 6,
            types: vec![NoduleType::Isolated],
            diameter_mm: (5.5, 6.5),
            noise_std_hu: 10.0,
            spacing_mm: (1.0, 1.0, 1.0),
            shape: (12, 32, 32),
            seed: 17,
            ..DatasetConfig::default()
        };
        cfg.patch = PatchSpec {
            view_size: 15,
            scale_sizes: [25, 19, 15],
        };
        cfg.network.input_size = 15;
        cfg.network.reduced_divisor = 4;
        cfg.network.init_seed = 3;
        cfg.sampler.max_total_samples = Some(96);
        cfg.trainer.batch_size = 16;
        cfg.trainer.max_epochs = 2;
        cfg.trainer.patience = 2;
        cfg.trainer.val_fraction = 0.25;
        cfg.segmenter.batch_size = 32;
        cfg.validate().unwrap();
        cfg
    }

    fn tiny_cases(cfg: &PipelineConfig) -> Vec<LoadedCase> {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&cfg.phantom, dir.path()).unwrap();
        load_all_cases(&dir.path().join("manifest.json"), &manifest).unwrap()
    }

    #[test]
    fn default_ablation_row_equals_manual_composition() {
        let cfg = tiny_pipeline_cfg();
        assert_eq!(cfg.ablation.rows, vec![AblationToggle::default()]);
        let cases = tiny_cases(&cfg);

        let manual_dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions::default();
        let (mut net, artifacts) =
            train_model::<f32>(&cfg, &cases, &opts, manual_dir.path(), &mut |_| {}).unwrap();
        let (_, val_idx) =
            split_cases(cases.len(), cfg.trainer.val_fraction, cfg.trainer.seed).unwrap();
        let held_out: Vec<&LoadedCase> = val_idx.iter().map(|&i| &cases[i]).collect();
        assert_eq!(
            artifacts.val_ids,
            held_out.iter().map(|c| c.id.clone()).collect::<Vec<_>>()
        );
        let results = segment_cases(&mut net, &cfg, &held_out, &opts).unwrap();
        let mask_refs: Vec<&BinaryMask3D> = results.iter().map(|r| &r.mask).collect();
        let manual = evaluate_predictions(&held_out, &mask_refs).unwrap();

        let ablate_dir = tempfile::tempdir().unwrap();
        let report =
            run_ablation::<f32>(&cfg, &cases, ablate_dir.path(), &mut |_| {}).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert_eq!(row.label, "DB-ResNet32 + Scale + BWS + CIP_1 + Post");
        assert_eq!(row.cases, held_out.len());
        assert_eq!(row.dsc, manual.dsc);
        assert_eq!(row.asd_mm, manual.asd_mm);
        assert_eq!(row.sen, manual.sen);
        assert_eq!(row.ppv, manual.ppv);

        let text = report.to_text();
        assert!(text.contains("configuration"));
        assert!(text.contains("DSC"));
        assert!(text.contains("DB-ResNet32 + Scale + BWS + CIP_1 + Post"));
    }

    #[test]
    fn intensity_baseline_solves_solid_phantoms() {
        let mut cfg = PipelineConfig::default();
        cfg.phantom = DatasetConfig {
            count: 3,
            types: vec![NoduleType::Isolated],
            diameter_mm: (7.0, 9.0),
            noise_std_hu: 5.0,
            spacing_mm: (1.0, 1.0, 1.0),
            shape: (16, 36, 36),
            seed: 23,
            ..DatasetConfig::default()
        };
        let cases: Vec<LoadedCase> = (0..3)
            .map(|i| {
                let mut rng_cfg = cfg.phantom.clone();
                rng_cfg.count = 1;
                rng_cfg.seed = 23 + i;
                let dir = tempfile::tempdir().unwrap();
                let man = generate_dataset(&rng_cfg, dir.path()).unwrap();
                load_case(&dir.path().join("manifest.json"), &man.cases[0]).unwrap()
            })
            .collect();
        let refs: Vec<&LoadedCase> = cases.iter().collect();
        let report = threshold_baseline(&cfg, &refs).unwrap();
        let dsc = report.dsc.unwrap();
        assert!(dsc.mean >= 0.7, "baseline dsc {}", dsc.mean);
        assert_eq!(dsc.count, 3);
    }

    #[test]
    fn raw_propagation_matches_selected_on_clean_sphere() {
        let spec = PhantomSpec {
            diameter_mm: 9.0,
            noise_std_hu: 0.0,
            spacing_mm: (1.0, 1.0, 1.0),
            shape: (18, 36, 36),
            seed: 41,
            ..PhantomSpec::default()
        };
        let case: LoadedCase = generate(&spec).unwrap().into();
        let cfg = PipelineConfig::default();
        let norm = normalize_hu(&case.volume, cfg.window).unwrap();

        let mut clf = calibrate_intensity(&norm, &case.seed_box).unwrap();
        let selected = propagate(&mut clf, &norm, &case.seed_box, &cfg.segmenter.propagation).unwrap();
        let raw = propagate_raw(&mut clf, &norm, &case.seed_box, &cfg.segmenter.propagation).unwrap();
        assert_eq!(selected.mask.data(), raw.mask.data());
        assert!(raw.mask.count() > 0);
        let d = dsc(&case.truth, &raw.mask).unwrap();
        assert!(d >= 0.8, "raw propagation dsc {d}");

        let json = serde_json::to_string(&raw.trace).unwrap();
        let back: PropagationTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, raw.trace);
    }

    #[test]
    fn report_bundle_assembles_all_sections() {
        let cfg = tiny_pipeline_cfg();
        let cases = tiny_cases(&cfg);
        let refs: Vec<&LoadedCase> = cases.iter().collect();
        // Perfect predictions: the truths themselves.
        let masks: Vec<&BinaryMask3D> = cases.iter().map(|c| &c.truth).collect();
        let bundle = build_report(&cfg, &refs, &masks).unwrap();
        assert_eq!(bundle.metrics.nodules.len(), cases.len());
        assert_eq!(bundle.metrics.dsc.unwrap().mean, 1.0);
        assert_eq!(bundle.consistency.sources.len(), 6);
        assert_eq!(
            bundle.histogram.iter().map(|b| b.count).sum::<usize>(),
            cases.len()
        );
        let text = bundle.to_text();
        for section in ["dsc", "rater-1", "predicted", "bin_left"] {
            assert!(text.contains(section), "missing {section}");
        }
        let json = serde_json::to_value(&bundle).unwrap();
        assert!(json.get("groups").is_some());
    }

    #[test]
    fn failure_kinds_map_to_exit_categories() {
        let cfg_err: PipelineError = ConfigError::Invalid("x".into()).into();
        assert_eq!(cfg_err.kind(), FailureKind::Config);
        let io: PipelineError = VolumeError::Io {
            path: "x".into(),
            source: std::io::Error::other("nope"),
        }
        .into();
        assert_eq!(io.kind(), FailureKind::Io);
        let numeric: PipelineError = TrainError::NonFinite("grad".into()).into();
        assert_eq!(numeric.kind(), FailureKind::Numerical);
        let seed: PipelineError = SegmentError::Seed("outside".into()).into();
        assert_eq!(seed.kind(), FailureKind::Config);
    }
}
