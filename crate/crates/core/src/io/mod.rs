//! Volume and mask I/O in two formats, dataset manifests and provenance records.
//!
//! * NIfTI-1 (`.nii`, `.nii.gz`): images are written as 32-bit floats, masks as
//!   the narrowest unsigned integer type that holds the largest label.
//! * Native (`<name>.meta.json` + `<name>.raw`): a JSON sidecar with dims,
//!   spacing, dtype and endianness next to a little-endian x-fastest blob.
//!   Images are stored as f64, so the round trip is bit-exact.
//!
//! No intensity normalization happens here.

mod manifest;
mod nifti;
mod provenance;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, DatasetManifest, ManifestEntry};
pub use provenance::{
    read_provenance, write_provenance, Branch, Operation, ProvenanceRecord, ReplaySettings, StopReason,
    PROVENANCE_SCHEMA,
};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid, LabelMask, Spacing, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    U64,
    I64,
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 | DType::I8 => 1,
            DType::U16 | DType::I16 => 2,
            DType::U32 | DType::I32 | DType::F32 => 4,
            DType::U64 | DType::I64 | DType::F64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, DType::F32 | DType::F64)
    }
}

/// Geometry and storage type of a volume file, read without loading voxel data.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeHeader {
    pub dims: Dims,
    pub spacing: Spacing,
    pub dtype: DType,
}

/// Decoded voxel values prior to conversion into a typed grid.
pub(crate) enum Values {
    Int(Vec<i128>),
    Float(Vec<f64>),
}

pub(crate) struct RawVolume {
    header: VolumeHeader,
    values: Values,
    scaling: Option<(f64, f64)>,
}

pub(crate) fn decode_values(dtype: DType, payload: &[u8], big_endian: bool) -> Values {
    macro_rules! decode {
        ($t:ty, $wrap:ident, $conv:ty) => {{
            const N: usize = std::mem::size_of::<$t>();
            Values::$wrap(
                payload
                    .chunks_exact(N)
                    .map(|c| {
                        let b: [u8; N] = c.try_into().unwrap();
                        (if big_endian { <$t>::from_be_bytes(b) } else { <$t>::from_le_bytes(b) }) as $conv
                    })
                    .collect(),
            )
        }};
    }
    match dtype {
        DType::U8 => decode!(u8, Int, i128),
        DType::I8 => decode!(i8, Int, i128),
        DType::U16 => decode!(u16, Int, i128),
        DType::I16 => decode!(i16, Int, i128),
        DType::U32 => decode!(u32, Int, i128),
        DType::I32 => decode!(i32, Int, i128),
        DType::U64 => decode!(u64, Int, i128),
        DType::I64 => decode!(i64, Int, i128),
        DType::F32 => decode!(f32, Float, f64),
        DType::F64 => decode!(f64, Float, f64),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Nifti,
    Native,
}

fn format_of(path: &Path) -> Format {
    let s = path.to_string_lossy();
    if s.ends_with(".nii") || s.ends_with(".nii.gz") {
        Format::Nifti
    } else {
        Format::Native
    }
}

/// `(meta, raw)` paths of a native-format volume. Accepts the base name or
/// either of the two file names.
pub fn native_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let base = s.strip_suffix(".meta.json").or_else(|| s.strip_suffix(".raw")).unwrap_or(&s).to_string();
    (PathBuf::from(format!("{base}.meta.json")), PathBuf::from(format!("{base}.raw")))
}

#[derive(Debug, Serialize, Deserialize)]
struct NativeMeta {
    format: String,
    version: u32,
    dims: Dims,
    spacing: Spacing,
    dtype: DType,
    endianness: String,
}

const NATIVE_FORMAT: &str = "lesionforge-raw";

fn read_native_meta(meta_path: &Path) -> Result<NativeMeta> {
    let text = std::fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let meta: NativeMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(meta_path, format!("bad sidecar: {e}")))?;
    if meta.format != NATIVE_FORMAT || meta.version != 1 {
        return Err(Error::format(meta_path, format!("unknown sidecar format {} v{}", meta.format, meta.version)));
    }
    if meta.endianness != "little" {
        return Err(Error::format(meta_path, format!("unsupported endianness {}", meta.endianness)));
    }
    Ok(meta)
}

fn read_native(path: &Path) -> Result<RawVolume> {
    let (meta_path, raw_path) = native_paths(path);
    let meta = read_native_meta(&meta_path)?;
    let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n = meta.dims.iter().product::<usize>();
    let need = n * meta.dtype.size();
    if bytes.len() != need {
        return Err(Error::format(
            &raw_path,
            format!("header/data length mismatch: expected {need} bytes, found {}", bytes.len()),
        ));
    }
    Ok(RawVolume {
        header: VolumeHeader { dims: meta.dims, spacing: meta.spacing, dtype: meta.dtype },
        values: decode_values(meta.dtype, &bytes, false),
        scaling: None,
    })
}

fn write_native(path: &Path, dims: Dims, spacing: Spacing, dtype: DType, payload: &[u8]) -> Result<()> {
    let (meta_path, raw_path) = native_paths(path);
    let meta =
        NativeMeta { format: NATIVE_FORMAT.into(), version: 1, dims, spacing, dtype, endianness: "little".into() };
    let text = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    std::fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
    std::fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))
}

fn read_raw(path: &Path) -> Result<RawVolume> {
    match format_of(path) {
        Format::Nifti => nifti::read(path),
        Format::Native => read_native(path),
    }
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    match format_of(path) {
        Format::Nifti => nifti::read_header(path),
        Format::Native => {
            let meta = read_native_meta(&native_paths(path).0)?;
            Ok(VolumeHeader { dims: meta.dims, spacing: meta.spacing, dtype: meta.dtype })
        }
    }
}

/// Reads an intensity volume; any stored datatype is converted to f64 and the
/// NIfTI slope/intercept is applied.
pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let raw = read_raw(path)?;
    let mut data = match raw.values {
        Values::Int(v) => v.into_iter().map(|x| x as f64).collect::<Vec<_>>(),
        Values::Float(v) => v,
    };
    if let Some((slope, inter)) = raw.scaling {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Grid::new(raw.header.dims, raw.header.spacing, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a label map. Integer datatypes are taken as-is; float files are
/// accepted only when every value is a non-negative integer.
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let raw = read_raw(path)?;
    let labels = match raw.values {
        Values::Int(v) => v
            .into_iter()
            .map(|x| u32::try_from(x).map_err(|_| Error::format(path, format!("label {x} is not a valid class id"))))
            .collect::<Result<Vec<_>>>()?,
        Values::Float(v) => v
            .into_iter()
            .map(|x| {
                if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
                    Ok(x as u32)
                } else {
                    Err(Error::format(path, format!("non-integer label {x} in mask")))
                }
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Grid::new(raw.header.dims, raw.header.spacing, labels).map_err(|e| Error::format(path, e.to_string()))
}

fn write_any(path: &Path, dims: Dims, spacing: Spacing, dtype: DType, payload: &[u8]) -> Result<()> {
    match format_of(path) {
        Format::Nifti => nifti::write(path, dims, spacing, dtype, payload),
        Format::Native => write_native(path, dims, spacing, dtype, payload),
    }
}

/// Writes an intensity volume: NIfTI as float32, native as float64.
pub fn write_volume(vol: &Volume3D, path: &Path) -> Result<()> {
    match format_of(path) {
        Format::Nifti => {
            let payload: Vec<u8> = vol.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            write_any(path, vol.dims(), vol.spacing(), DType::F32, &payload)
        }
        Format::Native => {
            let payload: Vec<u8> = vol.data().iter().flat_map(|&v| v.to_le_bytes()).collect();
            write_any(path, vol.dims(), vol.spacing(), DType::F64, &payload)
        }
    }
}

/// Writes a label map using the narrowest unsigned type holding its maximum label.
pub fn write_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    let max = mask.data().iter().copied().max().unwrap_or(0);
    let (dtype, payload): (DType, Vec<u8>) = if max <= u8::MAX as u32 {
        (DType::U8, mask.data().iter().map(|&v| v as u8).collect())
    } else if max <= u16::MAX as u32 {
        (DType::U16, mask.data().iter().flat_map(|&v| (v as u16).to_le_bytes()).collect())
    } else {
        (DType::U32, mask.data().iter().flat_map(|&v| v.to_le_bytes()).collect())
    };
    write_any(path, mask.dims(), mask.spacing(), dtype, &payload)
}

/// Lowercase hex SHA-256 of `bytes`.
pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
