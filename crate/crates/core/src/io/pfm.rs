//! Portable float map (PFM) and binary PPM images.
//!
//! PFM files are written little-endian (scale `-1.0`) with rows stored
//! bottom-to-top as the format requires. Tensors are `[H, W]` or `[H, W, 1]`
//! for `Pf` and `[H, W, 3]` for `PF`.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_token<R: BufRead>(reader: &mut R) -> Result<String> {
    let mut token = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        if reader.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(byte[0]);
    }
    String::from_utf8(token).map_err(|_| format_err("non-text header token"))
}

pub fn write_pfm_to<W: Write>(writer: &mut W, img: &Tensor) -> Result<()> {
    let (h, w, c) = img.hwc()?;
    let tag = match c {
        1 => "Pf",
        3 => "PF",
        _ => return Err(format_err(format!("pfm: {c} channels unsupported"))),
    };
    write!(writer, "{tag}\n{w} {h}\n-1.0\n")?;
    for y in (0..h).rev() {
        for v in &img.data()[y * w * c..(y + 1) * w * c] {
            writer.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a PFM image as `[H, W, C]`.
pub fn read_pfm_from<R: BufRead>(reader: &mut R) -> Result<Tensor> {
    let c = match read_token(reader)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(format_err(format!("pfm: bad tag {t:?}"))),
    };
    let parse = |s: String| s.parse::<usize>().map_err(|_| format_err("pfm: bad size"));
    let w = parse(read_token(reader)?)?;
    let h = parse(read_token(reader)?)?;
    let scale: f64 = read_token(reader)?
        .parse()
        .map_err(|_| format_err("pfm: bad scale"))?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; h * w * c * 4];
    reader.read_exact(&mut raw)?;
    let vals: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| {
            let b: [u8; 4] = b.try_into().unwrap();
            (if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
        })
        .collect();
    let mut data = vec![0.0; h * w * c];
    for (row, chunk) in vals.chunks_exact(w * c).enumerate() {
        let y = h - 1 - row;
        data[y * w * c..(y + 1) * w * c].copy_from_slice(chunk);
    }
    Tensor::new(&[h, w, c], data)
}

pub fn write_pfm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write_pfm_to(&mut f, img)?;
    f.flush()?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    read_pfm_from(&mut io::BufReader::new(fs::File::open(path)?))
}

/// Writes an 8-bit binary PPM preview; values are clamped to `[0, 1]`.
/// Single-channel images are replicated to grey.
pub fn write_ppm_to<W: Write>(writer: &mut W, img: &Tensor) -> Result<()> {
    let (h, w, c) = img.hwc()?;
    if c != 1 && c != 3 {
        return Err(format_err(format!("ppm: {c} channels unsupported")));
    }
    write!(writer, "P6\n{w} {h}\n255\n")?;
    let mut bytes = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for ch in 0..3 {
            let v = img.data()[p * c + if c == 1 { 0 } else { ch }];
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    writer.write_all(&bytes)?;
    Ok(())
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write_ppm_to(&mut f, img)?;
    f.flush()?;
    Ok(())
}

/// Reads an 8-bit binary PPM as `[H, W, 3]` in `[0, 1]`.
pub fn read_ppm_from<R: BufRead>(reader: &mut R) -> Result<Tensor> {
    if read_token(reader)? != "P6" {
        return Err(format_err("ppm: expected P6"));
    }
    let parse = |s: String| s.parse::<usize>().map_err(|_| format_err("ppm: bad header"));
    let w = parse(read_token(reader)?)?;
    let h = parse(read_token(reader)?)?;
    if parse(read_token(reader)?)? != 255 {
        return Err(format_err("ppm: only 8-bit maxval supported"));
    }
    let mut raw = vec![0u8; h * w * 3];
    reader.read_exact(&mut raw)?;
    Tensor::new(&[h, w, 3], raw.iter().map(|&b| b as f64 / 255.0).collect())
}
