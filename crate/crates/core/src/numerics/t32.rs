//! `.t32` tensor files.
//!
//! Layout: the 4-byte magic `UST1`, a little-endian `u32` header length, a
//! UTF-8 JSON header `{"dtype":"f32","shape":[...],"order":"C"}`, then the
//! row-major little-endian `f32` payload. Checkpoints concatenate several
//! records, each header additionally carrying a `"name"`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UST1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "t32",
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn write_record<W: Write>(w: &mut W, tensor: &Tensor<f32>, name: Option<&str>) -> std::io::Result<()> {
    let header = Header {
        dtype: "f32".into(),
        shape: tensor.shape().to_vec(),
        order: "C".into(),
        name: name.map(str::to_string),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut payload = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_record<R: Read>(r: &mut R, path: &Path) -> Result<Option<(Header, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(Error::io(path)(e)),
    }
    if &magic != MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(Error::io(path))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(Error::io(path))?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| format_err(path, format!("header: {e}")))?;
    if header.dtype != "f32" || header.order != "C" {
        return Err(format_err(
            path,
            format!("unsupported dtype/order {}/{}", header.dtype, header.order),
        ));
    }
    let n: usize = header.shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload).map_err(Error::io(path))?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let tensor = Tensor::new(&header.shape, data).map_err(|e| format_err(path, e.to_string()))?;
    Ok(Some((header, tensor)))
}

pub fn to_bytes(tensor: &Tensor<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_record(&mut buf, tensor, None).expect("writing to a Vec cannot fail");
    buf
}

pub fn write_file(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    fs::write(path, to_bytes(tensor)).map_err(Error::io(path))
}

pub fn read_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let mut cursor = bytes.as_slice();
    let (_, t) = read_record(&mut cursor, path)?.ok_or_else(|| format_err(path, "empty file"))?;
    if !cursor.is_empty() {
        return Err(format_err(path, "trailing bytes after tensor"));
    }
    Ok(t)
}
