//! Shared checkpoint container for grading models and the classifier.
//!
//! Layout (little-endian throughout): magic "DGCK", version u32, u32 JSON
//! metadata length + UTF-8 JSON, then per tensor: u16 name length, name
//! bytes, u8 rank, rank u32 dims, raw f32 payload. Tensors run to EOF.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DGCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: &str, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::data(format!(
                "tensor {name}: dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(NamedTensor {
            name: name.to_string(),
            dims,
            data,
        })
    }
}

pub fn write_checkpoint(path: &Path, metadata_json: &str, tensors: &[NamedTensor]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta = metadata_json.as_bytes();
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta);
    for t in tensors {
        let name = t.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::data(format!("tensor name too long: {}", t.name)));
        }
        if t.dims.len() > u8::MAX as usize {
            return Err(Error::data(format!("tensor rank too large: {}", t.dims.len())));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(t.dims.len() as u8);
        for &d in &t.dims {
            if d > u32::MAX as usize {
                return Err(Error::data("tensor dim exceeds u32"));
            }
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<NamedTensor>)> {
    let buf = fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::format("truncated checkpoint"));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::format("not a DGCK checkpoint"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let metadata = String::from_utf8(take(&mut pos, meta_len)?.to_vec())
        .map_err(|_| Error::format("checkpoint metadata is not UTF-8"))?;
    let mut tensors = Vec::new();
    while pos < buf.len() {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize);
        }
        let n: usize = dims.iter().product();
        let raw = take(&mut pos, 4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    Ok((metadata, tensors))
}
