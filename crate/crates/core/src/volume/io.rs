//! On-disk formats: a JSON sidecar header next to a raw little-endian
//! payload.
//!
//! * volumes: `<name>.ctvol.json` + `<name>.ctvol.raw`, dtype `i16`
//! * masks: `<name>.mask.json` + `<name>.mask.raw`, dtype `u8`, values 0/1
//! * nodule records: plain JSON
//!
//! The header stores the payload file name; the payload is resolved
//! relative to the header's directory, so a case directory can be moved
//! as a whole.

use super::{BinaryMask3D, CtVolume, VolumeError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const BYTE_ORDER: &str = "little";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    byte_order: String,
    payload: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> VolumeError {
    VolumeError::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Payload path for a header path: the trailing `.json` becomes `.raw`.
fn payload_name(header_path: &Path) -> Result<String, VolumeError> {
    let name = header_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| VolumeError::InvalidArgument(format!("bad path {header_path:?}")))?;
    match name.strip_suffix(".json") {
        Some(stem) => Ok(format!("{stem}.raw")),
        None => Err(VolumeError::InvalidArgument(format!(
            "header path must end in .json, got {name:?}"
        ))),
    }
}

fn write_pair(
    header_path: &Path,
    header: &Header,
    payload: &[u8],
) -> Result<(), VolumeError> {
    let text = serde_json::to_string_pretty(header)
        .map_err(|e| malformed(header_path, e.to_string()))?;
    fs::write(header_path, text).map_err(io_err(header_path))?;
    let payload_path = header_path.with_file_name(&header.payload);
    fs::write(&payload_path, payload).map_err(io_err(&payload_path))?;
    Ok(())
}

struct LoadedHeader {
    shape: (usize, usize, usize),
    spacing: (f64, f64, f64),
    payload: Vec<u8>,
}

fn read_pair(
    header_path: &Path,
    expect_format: &str,
    expect_dtype: &str,
    bytes_per_voxel: usize,
) -> Result<LoadedHeader, VolumeError> {
    let text = fs::read_to_string(header_path).map_err(io_err(header_path))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| malformed(header_path, e.to_string()))?;
    if header.format != expect_format {
        return Err(malformed(
            header_path,
            format!("format {:?}, expected {expect_format:?}", header.format),
        ));
    }
    if header.version != 1 {
        return Err(malformed(
            header_path,
            format!("unsupported version {}", header.version),
        ));
    }
    if header.dtype != expect_dtype {
        return Err(malformed(
            header_path,
            format!("dtype {:?}, expected {expect_dtype:?}", header.dtype),
        ));
    }
    if header.byte_order != BYTE_ORDER {
        return Err(malformed(
            header_path,
            format!("byte order {:?}, expected {BYTE_ORDER:?}", header.byte_order),
        ));
    }
    let voxels = header.shape[0]
        .checked_mul(header.shape[1])
        .and_then(|v| v.checked_mul(header.shape[2]))
        .ok_or_else(|| malformed(header_path, "shape overflows"))?;
    let expected = voxels * bytes_per_voxel;
    let payload_path = header_path.with_file_name(&header.payload);
    let payload = fs::read(&payload_path).map_err(io_err(&payload_path))?;
    if payload.len() < expected {
        return Err(VolumeError::TruncatedPayload {
            path: payload_path,
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(VolumeError::PayloadMismatch {
            path: payload_path,
            expected,
            found: payload.len(),
        });
    }
    Ok(LoadedHeader {
        shape: (header.shape[0], header.shape[1], header.shape[2]),
        spacing: (
            header.spacing_mm[0],
            header.spacing_mm[1],
            header.spacing_mm[2],
        ),
        payload,
    })
}

/// Writes `<name>.ctvol.json` plus its raw payload.
pub fn save_volume(vol: &CtVolume, header_path: &Path) -> Result<(), VolumeError> {
    let shape = vol.shape();
    let spacing = vol.spacing_mm();
    let header = Header {
        format: "ctvol".into(),
        version: 1,
        shape: [shape.0, shape.1, shape.2],
        spacing_mm: [spacing.0, spacing.1, spacing.2],
        dtype: "i16".into(),
        byte_order: BYTE_ORDER.into(),
        payload: payload_name(header_path)?,
    };
    let mut payload = Vec::with_capacity(vol.data().len() * 2);
    for v in vol.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_pair(header_path, &header, &payload)
}

/// Loads a volume from its `.ctvol.json` header.
pub fn load_volume(header_path: &Path) -> Result<CtVolume, VolumeError> {
    let loaded = read_pair(header_path, "ctvol", "i16", 2)?;
    let data: Vec<i16> = loaded
        .payload
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    CtVolume::from_data(loaded.shape, loaded.spacing, data)
        .map_err(|e| malformed(header_path, e.to_string()))
}

/// Writes `<name>.mask.json` plus its raw payload.
pub fn save_mask(mask: &BinaryMask3D, header_path: &Path) -> Result<(), VolumeError> {
    let shape = mask.shape();
    let spacing = mask.spacing_mm();
    let header = Header {
        format: "mask".into(),
        version: 1,
        shape: [shape.0, shape.1, shape.2],
        spacing_mm: [spacing.0, spacing.1, spacing.2],
        dtype: "u8".into(),
        byte_order: BYTE_ORDER.into(),
        payload: payload_name(header_path)?,
    };
    write_pair(header_path, &header, mask.data())
}

/// Loads a mask from its `.mask.json` header.
pub fn load_mask(header_path: &Path) -> Result<BinaryMask3D, VolumeError> {
    let loaded = read_pair(header_path, "mask", "u8", 1)?;
    BinaryMask3D::from_data(loaded.shape, loaded.spacing, loaded.payload)
        .map_err(|e| malformed(header_path, e.to_string()))
}

/// Rater-annotation scores attached to a nodule. Diameter is in
/// millimeters; the remaining scores follow the usual 1..=5 (calcification
/// 1..=6, internal structure 1..=4) radiologist scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Characteristics {
    pub diameter_mm: f64,
    pub subtlety: f64,
    pub internal_structure: f64,
    pub calcification: f64,
    pub sphericity: f64,
    pub margin: f64,
    pub lobulation: f64,
    pub spiculation: f64,
    pub texture: f64,
    pub malignancy: f64,
}

/// One annotated nodule: its rater masks and characteristic scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoduleRecord {
    pub id: String,
    /// Rater mask header paths, relative to the record file.
    pub rater_masks: Vec<String>,
    pub characteristics: Characteristics,
    /// Whether the nodule contacts a pleural wall, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attached: Option<bool>,
}

pub fn save_nodule_record(record: &NoduleRecord, path: &Path) -> Result<(), VolumeError> {
    let text = serde_json::to_string_pretty(record)
        .map_err(|e| malformed(path, e.to_string()))?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_nodule_record(path: &Path) -> Result<NoduleRecord, VolumeError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| malformed(path, e.to_string()))
}

/// Resolves a path stored inside a record file against that file's directory.
pub fn resolve_relative(record_path: &Path, stored: &str) -> PathBuf {
    let stored_path = Path::new(stored);
    if stored_path.is_absolute() {
        stored_path.to_path_buf()
    } else {
        record_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(stored_path)
    }
}
