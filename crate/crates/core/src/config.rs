//! One JSON document configures every stage of the pipeline. Unknown keys
//! are rejected, defaults match the published protocol, and dotted-path
//! overrides (`trainer.initial_lr=0.01`) patch the document before it is
//! validated, so a run is reproducible from its logged config alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::net::{DepthVariant, NetworkConfig};
use crate::patch::PatchSpec;
use crate::phantom::{NoduleType, RaterJitter};
use crate::sampler::SamplerConfig;
use crate::segmenter::PropagationConfig;
use crate::trainer::TrainConfig;
use crate::volume::{HuWindow, Shape, SpacingMm};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Malformed(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad override `{0}`: {1}")]
    Override(String, String),
}

/// Small-type cases draw their diameter from this range instead of the
/// configured one.
pub const SMALL_DRAW_MM: (f64, f64) = (3.5, 5.5);

/// Synthetic dataset request: how many cases of which types at what sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count: usize,
    /// Assigned round-robin over the cases.
    pub types: Vec<NoduleType>,
    /// Diameter draw range in millimeters, inclusive of the lower bound.
    pub diameter_mm: (f64, f64),
    pub noise_std_hu: f64,
    pub spacing_mm: SpacingMm,
    pub shape: Shape,
    pub lung_hu: f64,
    pub soft_hu: f64,
    pub calcified_hu: f64,
    pub ggo_ratio: f64,
    pub rater_jitter: RaterJitter,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 24,
            types: NoduleType::ALL.to_vec(),
            diameter_mm: (8.0, 14.0),
            noise_std_hu: 12.0,
            spacing_mm: (1.0, 0.7, 0.7),
            shape: (24, 64, 64),
            lung_hu: -800.0,
            soft_hu: 40.0,
            calcified_hu: 700.0,
            ggo_ratio: 0.25,
            rater_jitter: RaterJitter::default(),
            seed: 11,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.count == 0 {
            return bad("phantom.count must be at least 1".into());
        }
        if self.types.is_empty() {
            return bad("phantom.types must not be empty".into());
        }
        let (lo, hi) = self.diameter_mm;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("phantom.diameter_mm range ({lo}, {hi}) is not ordered"));
        }
        if self.noise_std_hu < 0.0 {
            return bad(format!("phantom.noise_std_hu {} is negative", self.noise_std_hu));
        }
        // Non-small diameters must fit; small cases draw below 6 mm anyway.
        let widest = if self.types.iter().all(|&t| t == NoduleType::Small) {
            SMALL_DRAW_MM.1
        } else {
            hi
        };
        let probe = crate::phantom::PhantomSpec {
            diameter_mm: widest,
            noise_std_hu: self.noise_std_hu,
            spacing_mm: self.spacing_mm,
            shape: self.shape,
            lung_hu: self.lung_hu,
            soft_hu: self.soft_hu,
            calcified_hu: self.calcified_hu,
            ggo_ratio: self.ggo_ratio,
            ..crate::phantom::PhantomSpec::default()
        };
        probe
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("phantom: {e}")))?;
        self.rater_jitter
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("phantom: {e}")))?;
        Ok(())
    }
}

/// Classifier batching and mask post-processing around propagation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub propagation: PropagationConfig,
    /// Voxels classified per network batch.
    pub batch_size: usize,
    /// Keep one seed-guided region per slice. Off leaves the raw
    /// thresholded masks, an ablation mode.
    pub post: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            propagation: PropagationConfig::default(),
            batch_size: 64,
            post: true,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.propagation
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("segmenter: {e}")))?;
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("segmenter.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorConfig {
    /// Bins of the DSC histogram over [0, 1].
    pub histogram_bins: usize,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self { histogram_bins: 20 }
    }
}

impl EvaluatorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.histogram_bins == 0 {
            return Err(ConfigError::Invalid("evaluator.histogram_bins must be at least 1".into()));
        }
        Ok(())
    }
}

/// One ablation row: which ingredients are switched on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationToggle {
    /// Multi-scale branch input; off feeds the native crop at every scale.
    pub scale: bool,
    /// Boundary-weighted sampling; off samples a uniform fraction.
    pub bws: bool,
    pub variant: DepthVariant,
    /// Pooling placement of the central-intensity tap, `None` for no tap.
    pub cip: Option<u8>,
    /// Seed-guided region selection during propagation.
    pub post: bool,
}

impl Default for AblationToggle {
    fn default() -> Self {
        Self {
            scale: true,
            bws: true,
            variant: DepthVariant::D32,
            cip: Some(1),
            post: true,
        }
    }
}

impl AblationToggle {
    pub fn label(&self) -> String {
        let mut parts = vec![format!("DB-ResNet{}", self.variant.depth())];
        if self.scale {
            parts.push("Scale".into());
        }
        if self.bws {
            parts.push("BWS".into());
        }
        if let Some(p) = self.cip {
            parts.push(format!("CIP_{p}"));
        }
        if self.post {
            parts.push("Post".into());
        }
        parts.join(" + ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub rows: Vec<AblationToggle>,
    /// Foreground fraction used when a row turns boundary weighting off.
    pub uniform_fraction: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            rows: vec![AblationToggle::default()],
            uniform_fraction: 0.25,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rows.is_empty() {
            return Err(ConfigError::Invalid("ablation.rows must not be empty".into()));
        }
        if !(self.uniform_fraction > 0.0 && self.uniform_fraction <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "ablation.uniform_fraction {} outside (0, 1]",
                self.uniform_fraction
            )));
        }
        Ok(())
    }
}

/// The whole pipeline in one document. Defaults reproduce the protocol
/// constants: lr 0.001 decayed by 0.9 every 5 epochs, momentum 0.9,
/// batches of 32, at most 20 epochs with patience 10, depth variant 32
/// with the tap at placement 1, threshold 0.5 and stop ratio 0.3.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub phantom: DatasetConfig,
    /// HU window mapped onto [0, 1] before patch extraction.
    pub window: HuWindow,
    pub patch: PatchSpec,
    pub sampler: SamplerConfig,
    pub network: NetworkConfig,
    pub trainer: TrainConfig,
    pub segmenter: SegmenterConfig,
    pub evaluator: EvaluatorConfig,
    pub ablation: AblationConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        self.phantom.validate()?;
        if self.window.lo >= self.window.hi {
            return Err(invalid(format!(
                "window ({}, {}) is not ordered",
                self.window.lo, self.window.hi
            )));
        }
        self.patch
            .validate()
            .map_err(|e| invalid(format!("patch: {e}")))?;
        self.sampler
            .validate()
            .map_err(|e| invalid(format!("sampler: {e}")))?;
        self.network
            .validate()
            .map_err(|e| invalid(format!("network: {e}")))?;
        self.trainer
            .validate()
            .map_err(|e| invalid(format!("trainer: {e}")))?;
        self.segmenter.validate()?;
        self.evaluator.validate()?;
        self.ablation.validate()?;
        if self.network.input_size != self.patch.view_size {
            return Err(invalid(format!(
                "network.input_size {} must equal patch.view_size {}",
                self.network.input_size, self.patch.view_size
            )));
        }
        if self.network.input_channels != 3 {
            return Err(invalid(format!(
                "network.input_channels {} must be 3, one per patch channel",
                self.network.input_channels
            )));
        }
        Ok(())
    }

    /// The effective document, printed by every command.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_document(doc: &Value) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = serde_json::from_value(doc.clone())
            .map_err(|e| ConfigError::Malformed(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file (or starts from defaults), applies `key.path=value`
    /// overrides, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| ConfigError::Malformed(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(PipelineConfig::default())
                .expect("default config serializes"),
        };
        for raw in overrides {
            apply_override(&mut doc, raw)?;
        }
        Self::from_document(&doc)
    }
}

/// Patches `doc` at a dotted path. The value side is parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, raw: &str) -> Result<(), ConfigError> {
    let err = |m: &str| ConfigError::Override(raw.to_string(), m.to_string());
    let (path, text) = raw.split_once('=').ok_or_else(|| err("expected key.path=value"))?;
    if path.is_empty() {
        return Err(err("empty key path"));
    }
    let value: Value = serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()));
    let mut cursor = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let map = cursor
            .as_object_mut()
            .ok_or_else(|| err(&format!("`{}` is not an object", segments[..i].join("."))))?;
        if i + 1 == segments.len() {
            map.insert(seg.to_string(), value);
            return Ok(());
        }
        cursor = map
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SamplingStrategy;

    #[test]
    fn defaults_validate_and_pin_protocol_constants() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.trainer.initial_lr, 1e-3);
        assert_eq!(cfg.trainer.lr_decay, 0.9);
        assert_eq!(cfg.trainer.momentum, 0.9);
        assert_eq!(cfg.trainer.batch_size, 32);
        assert_eq!(cfg.trainer.max_epochs, 20);
        assert_eq!(cfg.trainer.patience, 10);
        assert_eq!(cfg.network.depth_variant, DepthVariant::D32);
        assert_eq!(cfg.network.cip_placement, Some(1));
        assert_eq!(cfg.segmenter.propagation.threshold, 0.5);
        assert_eq!(cfg.segmenter.propagation.stop_ratio, 0.3);
        assert_eq!(cfg.patch.view_size, 35);
        assert_eq!(cfg.patch.scale_sizes, [65, 50, 35]);
        assert_eq!((cfg.window.lo, cfg.window.hi), (-1000, 400));
        assert_eq!(cfg.sampler.strategy, SamplingStrategy::BoundaryWeighted);
        assert_eq!(cfg.ablation.rows.len(), 1);
        assert_eq!(
            cfg.ablation.rows[0].label(),
            "DB-ResNet32 + Scale + BWS + CIP_1 + Post"
        );
    }

    #[test]
    fn document_round_trips() {
        let cfg = PipelineConfig::default();
        let doc = serde_json::to_value(&cfg).unwrap();
        let back = PipelineConfig::from_document(&doc).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let doc = serde_json::json!({ "trainer": { "lr": 0.01 } });
        let err = PipelineConfig::from_document(&doc).unwrap_err();
        assert!(matches!(err, ConfigError::Malformed(m) if m.contains("lr")));

        let doc = serde_json::json!({ "optimizer": {} });
        assert!(PipelineConfig::from_document(&doc).is_err());
    }

    #[test]
    fn overrides_patch_nested_fields() {
        let sets = [
            "trainer.initial_lr=0.01".to_string(),
            "network.depth_variant=83".to_string(),
            "segmenter.post=false".to_string(),
            "phantom.types=[\"ggo\",\"small\"]".to_string(),
            "network.cip_placement=null".to_string(),
            "window.lo=-950".to_string(),
        ];
        let cfg = PipelineConfig::load(None, &sets).unwrap();
        assert_eq!(cfg.trainer.initial_lr, 0.01);
        assert_eq!(cfg.network.depth_variant, DepthVariant::D83);
        assert!(!cfg.segmenter.post);
        assert_eq!(
            cfg.phantom.types,
            vec![NoduleType::GroundGlass, NoduleType::Small]
        );
        assert_eq!(cfg.network.cip_placement, None);
        assert_eq!(cfg.window.lo, -950);
    }

    #[test]
    fn bad_overrides_are_reported() {
        assert!(matches!(
            PipelineConfig::load(None, &["trainer.initial_lr".to_string()]),
            Err(ConfigError::Override(..))
        ));
        // Path through a scalar.
        assert!(matches!(
            PipelineConfig::load(None, &["trainer.initial_lr.x=1".to_string()]),
            Err(ConfigError::Override(..))
        ));
        // Typo in the final key: caught by the strict deserializer.
        assert!(matches!(
            PipelineConfig::load(None, &["trainer.initial_llr=1".to_string()]),
            Err(ConfigError::Malformed(_))
        ));
        // Right key, wrong type.
        assert!(matches!(
            PipelineConfig::load(None, &["trainer.batch_size=many".to_string()]),
            Err(ConfigError::Malformed(_))
        ));
    }

    #[test]
    fn cross_field_checks_fire() {
        let cfg = PipelineConfig::load(None, &["network.input_size=17".to_string()]);
        assert!(matches!(cfg, Err(ConfigError::Invalid(m)) if m.contains("view_size")));

        let cfg = PipelineConfig::load(None, &["phantom.diameter_mm=[9.0,8.0]".to_string()]);
        assert!(cfg.is_err());

        let cfg = PipelineConfig::load(None, &["evaluator.histogram_bins=0".to_string()]);
        assert!(cfg.is_err());
    }

    #[test]
    fn config_file_loads_with_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{ "trainer": { "max_epochs": 6 } }"#).unwrap();
        let cfg = PipelineConfig::load(Some(&path), &["trainer.patience=3".to_string()]).unwrap();
        assert_eq!(cfg.trainer.max_epochs, 6);
        assert_eq!(cfg.trainer.patience, 3);
        // Untouched sections keep their defaults.
        assert_eq!(cfg.trainer.initial_lr, 1e-3);

        assert!(matches!(
            PipelineConfig::load(Some(&dir.path().join("missing.json")), &[]),
            Err(ConfigError::Io { .. })
        ));
    }

    #[test]
    fn resolved_json_contains_every_section() {
        let text = PipelineConfig::default().resolved_json();
        for key in [
            "phantom", "window", "patch", "sampler", "network", "trainer", "segmenter",
            "evaluator", "ablation",
        ] {
            assert!(text.contains(&format!("\"{key}\"")), "{key} missing");
        }
        let doc: Value = serde_json::from_str(&text).unwrap();
        assert!(PipelineConfig::from_document(&doc).is_ok());
    }
}
