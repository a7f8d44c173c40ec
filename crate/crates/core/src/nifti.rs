//! Minimal NIfTI-1 reader/writer plus a raw fallback format.
//!
//! Supported subset: 348-byte little-endian header, single uncompressed
//! `.nii` file, datatypes float32 (code 16), int16 (4) and uint8 (2), dims
//! from dim[1..3] and spacing from pixdim[1..3]. Anything else is an explicit
//! error. The raw fallback is a JSON sidecar {dims, spacing, dtype} next to a
//! little-endian binary blob.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume3D};

const HDR_LEN: usize = 348;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// Decoded voxel payload of a NIfTI file.
pub enum NiftiData {
    F32(Vec<f32>),
    I16(Vec<i16>),
    U8(Vec<u8>),
}

pub struct NiftiImage {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub data: NiftiData,
}

struct HeaderFields {
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
}

fn rd_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn rd_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn rd_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn parse_header(buf: &[u8]) -> Result<HeaderFields> {
    if buf.len() < HDR_LEN {
        return Err(Error::format(format!(
            "file too short for a NIfTI-1 header ({} bytes)",
            buf.len()
        )));
    }
    let sizeof_hdr = rd_i32(buf, 0);
    if sizeof_hdr != HDR_LEN as i32 {
        return Err(Error::format(format!(
            "sizeof_hdr = {sizeof_hdr}, expected 348 (big-endian or non-NIfTI-1 files are unsupported)"
        )));
    }
    let magic = &buf[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::format("missing NIfTI-1 magic"));
    }
    let ndim = rd_i16(buf, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(format!("dim[0] = {ndim} out of range")));
    }
    let mut dim = [1usize; 7];
    for (i, d) in dim.iter_mut().enumerate() {
        let raw = rd_i16(buf, 42 + 2 * i);
        if i < ndim as usize {
            if raw < 1 {
                return Err(Error::format(format!("dim[{}] = {raw} invalid", i + 1)));
            }
            *d = raw as usize;
        }
    }
    if dim[3..].iter().any(|&d| d != 1) {
        return Err(Error::format("volumes with a 4th dimension > 1 are unsupported"));
    }
    let datatype = rd_i16(buf, 70);
    let spacing = (rd_f32(buf, 80), rd_f32(buf, 84), rd_f32(buf, 88));
    if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
        return Err(Error::format(format!("non-positive pixdim {spacing:?}")));
    }
    let vox_offset = rd_f32(buf, 108);
    if vox_offset < HDR_LEN as f32 || vox_offset.fract() != 0.0 {
        return Err(Error::format(format!("bad vox_offset {vox_offset}")));
    }
    Ok(HeaderFields {
        dims: (dim[0], dim[1], dim[2]),
        spacing,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: rd_f32(buf, 112),
        scl_inter: rd_f32(buf, 116),
    })
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    let buf = fs::read(path)?;
    let hdr = parse_header(&buf)?;
    let n = hdr.dims.0 * hdr.dims.1 * hdr.dims.2;
    let bytes_per = match hdr.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::format(format!(
                "unsupported NIfTI datatype code {other} (supported: 2, 4, 16)"
            )))
        }
    };
    let start = hdr.vox_offset;
    let end = start + n * bytes_per;
    if buf.len() < end {
        return Err(Error::format(format!(
            "truncated voxel payload: need {end} bytes, file has {}",
            buf.len()
        )));
    }
    let raw = &buf[start..end];
    let scaled = hdr.scl_slope != 0.0 && (hdr.scl_slope != 1.0 || hdr.scl_inter != 0.0);
    let data = match hdr.datatype {
        DT_UINT8 => NiftiData::U8(raw.to_vec()),
        DT_INT16 => NiftiData::I16(
            raw.chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
        DT_FLOAT32 => {
            let mut vals: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if scaled {
                for v in &mut vals {
                    *v = *v * hdr.scl_slope + hdr.scl_inter;
                }
            }
            NiftiData::F32(vals)
        }
        _ => unreachable!(),
    };
    if scaled && !matches!(data, NiftiData::F32(_)) {
        return Err(Error::format("scl_slope/scl_inter scaling on integer data is unsupported"));
    }
    Ok(NiftiImage {
        dims: hdr.dims,
        spacing: hdr.spacing,
        data,
    })
}

fn build_header(dims: (usize, usize, usize), spacing: (f32, f32, f32), datatype: i16, bitpix: i16) -> Result<[u8; HDR_LEN]> {
    for d in [dims.0, dims.1, dims.2] {
        if d == 0 || d > i16::MAX as usize {
            return Err(Error::data(format!("dim {d} not representable in a NIfTI-1 header")));
        }
    }
    let mut h = [0u8; HDR_LEN];
    h[0..4].copy_from_slice(&(HDR_LEN as i32).to_le_bytes());
    // dim[0..3]
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    h[42..44].copy_from_slice(&(dims.0 as i16).to_le_bytes());
    h[44..46].copy_from_slice(&(dims.1 as i16).to_le_bytes());
    h[46..48].copy_from_slice(&(dims.2 as i16).to_le_bytes());
    for i in 3..7 {
        h[42 + 2 * i..44 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    // pixdim[0] = 1 (qfac), then spacing
    h[76..80].copy_from_slice(&1.0f32.to_le_bytes());
    h[80..84].copy_from_slice(&spacing.0.to_le_bytes());
    h[84..88].copy_from_slice(&spacing.1.to_le_bytes());
    h[88..92].copy_from_slice(&spacing.2.to_le_bytes());
    h[108..112].copy_from_slice(&352.0f32.to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

fn write_payload(path: &Path, header: &[u8; HDR_LEN], payload: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(header)?;
    f.write_all(&[0u8; 4])?; // extension flag, data starts at 352
    f.write_all(payload)?;
    Ok(())
}

pub fn write_volume_nifti(path: &Path, vol: &Volume3D) -> Result<()> {
    let h = build_header(vol.dims(), vol.spacing(), DT_FLOAT32, 32)?;
    let mut payload = Vec::with_capacity(vol.len() * 4);
    for &v in vol.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_payload(path, &h, &payload)
}

pub fn write_labels_nifti(path: &Path, lab: &LabelVolume) -> Result<()> {
    let h = build_header(lab.dims(), lab.spacing(), DT_INT16, 16)?;
    let mut payload = Vec::with_capacity(lab.labels().len() * 2);
    for &l in lab.labels() {
        if l > i16::MAX as u16 {
            return Err(Error::data(format!("label {l} exceeds int16 range")));
        }
        payload.extend_from_slice(&(l as i16).to_le_bytes());
    }
    write_payload(path, &h, &payload)
}

/// Read any supported datatype as an intensity volume (integers convert to f32).
pub fn read_volume_nifti(path: &Path) -> Result<Volume3D> {
    let img = read_nifti(path)?;
    let data = match img.data {
        NiftiData::F32(v) => v,
        NiftiData::I16(v) => v.into_iter().map(|x| x as f32).collect(),
        NiftiData::U8(v) => v.into_iter().map(|x| x as f32).collect(),
    };
    Volume3D::new(img.dims, img.spacing, data)
}

/// Read an integer-typed file as a label volume; the structure count is the
/// maximum label present.
pub fn read_labels_nifti(path: &Path) -> Result<LabelVolume> {
    let img = read_nifti(path)?;
    let labels: Vec<u16> = match img.data {
        NiftiData::I16(v) => {
            let mut out = Vec::with_capacity(v.len());
            for x in v {
                if x < 0 {
                    return Err(Error::data(format!("negative label {x}")));
                }
                out.push(x as u16);
            }
            out
        }
        NiftiData::U8(v) => v.into_iter().map(|x| x as u16).collect(),
        NiftiData::F32(_) => {
            return Err(Error::format("label volumes must use an integer datatype"))
        }
    };
    let s = labels.iter().copied().max().unwrap_or(0);
    LabelVolume::new(img.dims, img.spacing, labels, s)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSidecar {
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    dtype: String,
}

fn blob_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("bin")
}

/// Raw fallback writer: `<path>.json` sidecar + `<path>.bin` blob.
pub fn write_volume_raw(sidecar: &Path, vol: &Volume3D) -> Result<()> {
    let meta = RawSidecar {
        dims: vol.dims(),
        spacing: vol.spacing(),
        dtype: "f32".into(),
    };
    fs::write(sidecar, serde_json::to_string_pretty(&meta).expect("serializable"))?;
    let mut payload = Vec::with_capacity(vol.len() * 4);
    for &v in vol.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(blob_path(sidecar), payload)?;
    Ok(())
}

pub fn write_labels_raw(sidecar: &Path, lab: &LabelVolume) -> Result<()> {
    let meta = RawSidecar {
        dims: lab.dims(),
        spacing: lab.spacing(),
        dtype: "u16".into(),
    };
    fs::write(sidecar, serde_json::to_string_pretty(&meta).expect("serializable"))?;
    let mut payload = Vec::with_capacity(lab.labels().len() * 2);
    for &l in lab.labels() {
        payload.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(blob_path(sidecar), payload)?;
    Ok(())
}

pub fn read_volume_raw(sidecar: &Path) -> Result<Volume3D> {
    let meta: RawSidecar = serde_json::from_slice(&fs::read(sidecar)?)
        .map_err(|e| Error::format(format!("bad raw sidecar: {e}")))?;
    if meta.dtype != "f32" {
        return Err(Error::format(format!("raw dtype {} is not an intensity volume", meta.dtype)));
    }
    let blob = fs::read(blob_path(sidecar))?;
    let n = meta.dims.0 * meta.dims.1 * meta.dims.2;
    if blob.len() != n * 4 {
        return Err(Error::format(format!("raw blob length {} != {}", blob.len(), n * 4)));
    }
    let data = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume3D::new(meta.dims, meta.spacing, data)
}

pub fn read_labels_raw(sidecar: &Path) -> Result<LabelVolume> {
    let meta: RawSidecar = serde_json::from_slice(&fs::read(sidecar)?)
        .map_err(|e| Error::format(format!("bad raw sidecar: {e}")))?;
    if meta.dtype != "u16" {
        return Err(Error::format(format!("raw dtype {} is not a label volume", meta.dtype)));
    }
    let blob = fs::read(blob_path(sidecar))?;
    let n = meta.dims.0 * meta.dims.1 * meta.dims.2;
    if blob.len() != n * 2 {
        return Err(Error::format(format!("raw blob length {} != {}", blob.len(), n * 2)));
    }
    let labels: Vec<u16> = blob
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let s = labels.iter().copied().max().unwrap_or(0);
    LabelVolume::new(meta.dims, meta.spacing, labels, s)
}

/// Dispatch on extension: `.nii` for NIfTI-1, `.json` for the raw fallback.
pub fn read_volume(path: &Path) -> Result<Volume3D> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => read_volume_nifti(path),
        Some("json") => read_volume_raw(path),
        other => Err(Error::format(format!("unrecognized volume extension {other:?}"))),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => read_labels_nifti(path),
        Some("json") => read_labels_raw(path),
        other => Err(Error::format(format!("unrecognized label extension {other:?}"))),
    }
}
