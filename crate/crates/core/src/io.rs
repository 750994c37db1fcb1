//! File helpers; every write goes to a sibling temp file first and is then
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{MtlError, Result};

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| MtlError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MtlError::io(path, e))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MtlError::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| MtlError::contract(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| MtlError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| MtlError::io(&tmp, e))?;
        f.sync_all().map_err(|e| MtlError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| MtlError::io(path, e))
}
