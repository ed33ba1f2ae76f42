//! NPY version 1.0 reader and writer for little-endian float arrays.

use std::fs;
use std::path::Path;

use crate::error::{Error, NpyError, Result};
use crate::tensorkit::{DType, Real, Tensor};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
/// Preamble (magic, version, header length) plus header is padded to this.
const ALIGN: usize = 64;

/// Raw array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub dtype: DType,
    /// Empty for a 0-d array.
    pub shape: Vec<usize>,
    /// Payload widened to `f64` (exact for both stored types).
    pub data: Vec<f64>,
}

impl NpyArray {
    pub fn into_tensor<T: Real>(self) -> Result<Tensor<T>> {
        let shape = if self.shape.is_empty() { vec![1] } else { self.shape };
        Tensor::new(shape, self.data.into_iter().map(T::of).collect())
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let shape = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}",
        T::DTYPE.descr()
    );
    let unpadded = MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat(unpadded.next_multiple_of(ALIGN) - unpadded));
    header.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Value of `'key': value` in a Python dict literal, up to the next
/// top-level comma.
fn dict_value<'a>(header: &'a str, key: &str) -> std::result::Result<&'a str, NpyError> {
    let pat = format!("'{key}'");
    let at = header
        .find(&pat)
        .ok_or_else(|| NpyError::BadHeader(format!("missing key {key}")))?;
    let rest = header[at + pat.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| NpyError::BadHeader(format!("no ':' after {key}")))?
        .trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else {
        rest.find([',', '}'])
    }
    .ok_or_else(|| NpyError::BadHeader(format!("unterminated value for {key}")))?;
    Ok(rest[..end].trim())
}

fn parse_shape(s: &str) -> std::result::Result<Vec<usize>, NpyError> {
    let inner = s
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| NpyError::BadHeader(format!("shape {s:?} is not a tuple")))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim_end_matches('L')
                .parse()
                .map_err(|_| NpyError::BadHeader(format!("bad dimension {p:?}")))
        })
        .collect()
}

pub fn decode(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 6 || &bytes[..6] != MAGIC {
        return Err(NpyError::BadMagic.into());
    }
    if bytes.len() < 10 {
        return Err(NpyError::Truncated {
            expected: 10,
            found: bytes.len(),
        }
        .into());
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(NpyError::UnsupportedVersion { major, minor }.into());
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let start = 10 + header_len;
    if bytes.len() < start {
        return Err(NpyError::Truncated {
            expected: start,
            found: bytes.len(),
        }
        .into());
    }
    let header =
        std::str::from_utf8(&bytes[10..start]).map_err(|_| NpyError::BadHeader("header is not ASCII".into()))?;

    let descr = dict_value(header, "descr")?.trim_matches(|c| c == '\'' || c == '"');
    let dtype = match descr {
        "<f4" => DType::F32,
        "<f8" => DType::F64,
        other => return Err(NpyError::UnsupportedDtype(other.to_string()).into()),
    };
    match dict_value(header, "fortran_order")? {
        "False" => {}
        "True" => return Err(NpyError::FortranOrder.into()),
        other => return Err(NpyError::BadHeader(format!("fortran_order {other:?}")).into()),
    }
    let shape = parse_shape(dict_value(header, "shape")?)?;

    let count: usize = shape.iter().product();
    let expected = count * dtype.size();
    let payload = &bytes[start..];
    if payload.len() < expected {
        return Err(NpyError::Truncated {
            expected,
            found: payload.len(),
        }
        .into());
    }
    let data = match dtype {
        DType::F32 => payload[..expected]
            .chunks_exact(4)
            .map(|c| f32::read_le(c) as f64)
            .collect(),
        DType::F64 => payload[..expected].chunks_exact(8).map(f64::read_le).collect(),
    };
    Ok(NpyArray { dtype, shape, data })
}

pub fn write_npy<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_npy_raw(path: impl AsRef<Path>) -> Result<NpyArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(path.display().to_string()))
}

/// Reads an array, converting the stored float type to `T`.
pub fn read_npy<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    read_npy_raw(path)?
        .into_tensor()
        .map_err(|e| e.context(path.display().to_string()))
}
