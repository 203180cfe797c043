//! Reading and writing in the numpy npy format.
//!
//! Only little-endian `f4`/`f8` arrays in C order are supported. Files are
//! written as version 1.0 with the header padded to a multiple of 64 bytes.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The npy magic number.
pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

/// Element type stored on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NpyDtype {
    F32,
    F64,
}

impl NpyDtype {
    fn descr(self) -> &'static str {
        match self {
            NpyDtype::F32 => "<f4",
            NpyDtype::F64 => "<f8",
        }
    }
}

struct Header {
    dtype: NpyDtype,
    shape: Vec<usize>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("npy: {}", msg.into()))
}

fn dict_value<'a>(dict: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}'");
    let start = dict
        .find(&pat)
        .ok_or_else(|| format_err(format!("missing key {key}")))?;
    let rest = dict[start + pat.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| format_err(format!("malformed entry for {key}")))?;
    Ok(rest.trim_start())
}

fn parse_header(dict: &str) -> Result<Header> {
    let descr = dict_value(dict, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|d| d.split('\'').next())
        .ok_or_else(|| format_err("malformed descr"))?;
    let dtype = match descr {
        "<f4" | "f4" => NpyDtype::F32,
        "<f8" | "f8" => NpyDtype::F64,
        other => return Err(format_err(format!("unsupported descr {other}"))),
    };
    let fortran = dict_value(dict, "fortran_order")?;
    if fortran.starts_with("True") {
        return Err(format_err("Fortran order not supported"));
    } else if !fortran.starts_with("False") {
        return Err(format_err("malformed fortran_order"));
    }
    let shape = dict_value(dict, "shape")?;
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| format_err("malformed shape"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| format_err(format!("bad dimension {s}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Header { dtype, shape })
}

/// Reads an npy array from `reader`, converting to `f64`.
pub fn read_npy_from<R: Read>(reader: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 6];
    reader.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(format_err("bad magic"));
    }
    let mut version = [0u8; 2];
    reader.read_exact(&mut version)?;
    let header_len = match version[0] {
        1 => {
            let mut b = [0u8; 2];
            reader.read_exact(&mut b)?;
            u16::from_le_bytes(b) as usize
        }
        2 | 3 => {
            let mut b = [0u8; 4];
            reader.read_exact(&mut b)?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(format_err(format!("unsupported version {v}"))),
    };
    let mut dict = vec![0u8; header_len];
    reader.read_exact(&mut dict)?;
    let dict = String::from_utf8(dict).map_err(|_| format_err("header is not text"))?;
    let header = parse_header(&dict)?;
    let n: usize = header.shape.iter().product();
    let width = match header.dtype {
        NpyDtype::F32 => 4,
        NpyDtype::F64 => 8,
    };
    let mut raw = vec![0u8; n * width];
    reader.read_exact(&mut raw)?;
    let data = match header.dtype {
        NpyDtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        NpyDtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::new(&header.shape, data)
}

/// Writes `tensor` as a version 1.0 npy array.
pub fn write_npy_to<W: Write>(writer: &mut W, tensor: &Tensor, dtype: NpyDtype) -> io::Result<()> {
    let shape = match tensor.shape() {
        [] => "()".to_string(),
        [d] => format!("({d},)"),
        dims => format!(
            "({})",
            dims.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape
    );
    // magic(6) + version(2) + len(2) + dict + '\n' must be 64-byte aligned
    let unpadded = 10 + dict.len() + 1;
    dict.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    dict.push('\n');
    writer.write_all(&MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(dict.len() as u16).to_le_bytes())?;
    writer.write_all(dict.as_bytes())?;
    match dtype {
        NpyDtype::F32 => {
            for &v in tensor.data() {
                writer.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        NpyDtype::F64 => {
            for &v in tensor.data() {
                writer.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_npy(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut f = io::BufReader::new(fs::File::open(path)?);
    read_npy_from(&mut f)
}

pub fn write_npy(path: impl AsRef<Path>, tensor: &Tensor, dtype: NpyDtype) -> Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write_npy_to(&mut f, tensor, dtype)?;
    f.flush()?;
    Ok(())
}
