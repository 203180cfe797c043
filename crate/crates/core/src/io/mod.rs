//! File formats: NPY arrays, PFM float images and PPM previews.

mod npy;
mod pfm;

pub use npy::{read_npy, read_npy_from, write_npy, write_npy_to, NpyDtype, MAGIC};
pub use pfm::{
    read_pfm, read_pfm_from, read_ppm_from, write_pfm, write_pfm_to, write_ppm, write_ppm_to,
};

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::tensor::Tensor;

/// Reads a depth map or image from `.pfm`, `.ppm` or `.npy` by extension.
pub fn read_array(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => read_pfm(path),
        Some("ppm") => read_ppm_from(&mut std::io::BufReader::new(std::fs::File::open(path)?)),
        _ => read_npy(path),
    }
}

/// Files in `dir` whose extension is one of `exts`, sorted by name.
pub fn list_files(dir: impl AsRef<Path>, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| exts.contains(&e))
        })
        .collect();
    out.sort();
    Ok(out)
}
