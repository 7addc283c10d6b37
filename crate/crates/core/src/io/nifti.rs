//! Minimal NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer for 3D
//! scalar volumes. Gzip is detected from the magic bytes, not the extension.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{DType, RawVolume, VolumeHeader};
use crate::error::{Error, Result};
use crate::grid::{Dims, Spacing};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

fn dtype_from_code(code: i16) -> Option<DType> {
    Some(match code {
        2 => DType::U8,
        4 => DType::I16,
        8 => DType::I32,
        16 => DType::F32,
        64 => DType::F64,
        256 => DType::I8,
        512 => DType::U16,
        768 => DType::U32,
        1024 => DType::I64,
        1280 => DType::U64,
        _ => return None,
    })
}

fn code_from_dtype(dtype: DType) -> i16 {
    match dtype {
        DType::U8 => 2,
        DType::I16 => 4,
        DType::I32 => 8,
        DType::F32 => 16,
        DType::F64 => 64,
        DType::I8 => 256,
        DType::U16 => 512,
        DType::U32 => 768,
        DType::I64 => 1024,
        DType::U64 => 1280,
    }
}

fn open_decoded(path: &Path) -> Result<Box<dyn Read>> {
    let mut file = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let head = std::io::Cursor::new(magic[..n].to_vec());
    let chained = head.chain(file);
    if n == 2 && magic == GZIP_MAGIC {
        Ok(Box::new(GzDecoder::new(chained)))
    } else {
        Ok(Box::new(chained))
    }
}

struct Parsed {
    header: VolumeHeader,
    big_endian: bool,
    vox_offset: usize,
    scl_slope: f64,
    scl_inter: f64,
}

fn parse_header(path: &Path, h: &[u8]) -> Result<Parsed> {
    if h.len() < HEADER_SIZE {
        return Err(Error::format(path, format!("file too short for a NIfTI-1 header ({} bytes)", h.len())));
    }
    let big_endian =
        match (i32::from_le_bytes(h[0..4].try_into().unwrap()), i32::from_be_bytes(h[0..4].try_into().unwrap())) {
            (348, _) => false,
            (_, 348) => true,
            _ => return Err(Error::format(path, "sizeof_hdr is not 348")),
        };
    if &h[344..347] != b"n+1" {
        return Err(Error::format(path, "not a single-file NIfTI-1 image (magic != n+1)"));
    }
    let i16_at = |o: usize| {
        let b = [h[o], h[o + 1]];
        if big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = h[o..o + 4].try_into().unwrap();
        if big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    };
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("dim[0] = {ndim} out of range")));
    }
    let mut dims: Dims = [1; 3];
    for d in 1..=ndim as usize {
        let v = i16_at(40 + 2 * d);
        if v < 1 {
            return Err(Error::format(path, format!("dim[{d}] = {v} is not positive")));
        }
        if d <= 3 {
            dims[d - 1] = v as usize;
        } else if v != 1 {
            return Err(Error::format(path, format!("only 3D volumes are supported (dim[{d}] = {v})")));
        }
    }
    let mut spacing: Spacing = [1.0; 3];
    for (a, s) in spacing.iter_mut().enumerate().take(ndim.min(3) as usize) {
        *s = f32_at(80 + 4 * a).abs() as f64;
    }
    let code = i16_at(70);
    let dtype = dtype_from_code(code).ok_or(Error::UnsupportedDatatype { path: path.to_path_buf(), code })?;
    let vox_offset = f32_at(108);
    if vox_offset.is_nan() || vox_offset < HEADER_SIZE as f32 {
        return Err(Error::format(path, format!("vox_offset {vox_offset} is invalid")));
    }
    Ok(Parsed {
        header: VolumeHeader { dims, spacing, dtype },
        big_endian,
        vox_offset: vox_offset as usize,
        scl_slope: f32_at(112) as f64,
        scl_inter: f32_at(116) as f64,
    })
}

pub(super) fn read_header(path: &Path) -> Result<VolumeHeader> {
    let mut reader = open_decoded(path)?;
    let mut h = Vec::with_capacity(HEADER_SIZE);
    reader.by_ref().take(HEADER_SIZE as u64).read_to_end(&mut h).map_err(|e| Error::io(path, e))?;
    Ok(parse_header(path, &h)?.header)
}

pub(super) fn read(path: &Path) -> Result<RawVolume> {
    let mut bytes = Vec::new();
    open_decoded(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let parsed = parse_header(path, &bytes)?;
    let h = &parsed.header;
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let need = n * h.dtype.size();
    let available = bytes.len().saturating_sub(parsed.vox_offset);
    if available < need {
        return Err(Error::format(
            path,
            format!("header/data length mismatch: need {need} bytes of voxel data, found {available}"),
        ));
    }
    let payload = &bytes[parsed.vox_offset..parsed.vox_offset + need];
    let slope = parsed.scl_slope;
    let inter = parsed.scl_inter;
    let scaled = slope != 0.0 && !(slope == 1.0 && inter == 0.0);
    Ok(RawVolume {
        header: h.clone(),
        values: super::decode_values(h.dtype, payload, parsed.big_endian),
        scaling: scaled.then_some((slope, inter)),
    })
}

pub(super) fn write(path: &Path, dims: Dims, spacing: Spacing, dtype: DType, payload: &[u8]) -> Result<()> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], o: usize, v: i16| h[o..o + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], o: usize, v: f32| h[o..o + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let dim = [3i16, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::format(path, format!("dims {dims:?} exceed the NIfTI-1 limit")));
    }
    for (k, v) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * k, *v);
    }
    put_i16(&mut h, 70, code_from_dtype(dtype));
    put_i16(&mut h, 72, (dtype.size() * 8) as i16);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, spacing[a] as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // mm
    let descrip = b"lesionforge";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut h, 254, 2); // sform: aligned anatomical
    for a in 0..3 {
        put_f32(&mut h, 280 + 16 * a + 4 * a, spacing[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.to_string_lossy().ends_with(".gz");
    let result = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(&h).and_then(|_| enc.write_all(payload)).and_then(|_| enc.finish()?.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&h).and_then(|_| w.write_all(payload)).and_then(|_| w.flush())
    };
    result.map_err(|e| Error::io(path, e))
}
