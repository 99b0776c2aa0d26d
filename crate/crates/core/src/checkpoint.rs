//! Versioned binary container: 8-byte magic, little-endian `u32` version, then
//! a bincode payload. `f64` values round-trip bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

pub fn write<T: Serialize>(path: &Path, magic: &[u8; 8], version: u32, value: &T) -> Result<()> {
    let payload = bincode::serialize(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    file.write_all(magic)?;
    file.write_all(&version.to_le_bytes())?;
    file.write_all(&payload)?;
    file.sync_all()?;
    Ok(())
}

pub fn read<T: DeserializeOwned>(path: &Path, magic: &[u8; 8], version: u32) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(Error::Checkpoint(format!("{} is not a {} checkpoint", path.display(), String::from_utf8_lossy(magic))));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {found} (expected {version})",
            path.display()
        )));
    }
    bincode::deserialize(&bytes[12..]).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}
