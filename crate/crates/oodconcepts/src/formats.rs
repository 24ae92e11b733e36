//! `.cft` feature tensors and `.labels` label vectors.
//!
//! Both are little-endian. A `.cft` file is `"CFT1"`, `u32` N, P, d and
//! `N·P·d` `f32` values in (sample, patch, channel) order. A `.labels`
//! file is `"LBL1"`, `u32` N, `u32` L and N `u32` labels.

use std::fs;
use std::io::Write;
use std::path::Path;

use oodconcepts_core::tensor::{FeatureTensor, LabelVector};

use crate::error::{CliError, Result};

pub const CFT_MAGIC: &[u8; 4] = b"CFT1";
pub const LABELS_MAGIC: &[u8; 4] = b"LBL1";

pub fn encode_cft(t: &FeatureTensor) -> Vec<u8> {
    let (n, p, d) = t.shape();
    let mut out = Vec::with_capacity(16 + 4 * t.data().len());
    out.extend_from_slice(CFT_MAGIC);
    for dim in [n, p, d] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn header<'a>(bytes: &'a [u8], magic: &[u8; 4], fields: usize, path: &Path) -> Result<(Vec<u32>, &'a [u8])> {
    let len = 4 + 4 * fields;
    if bytes.len() < len {
        return Err(CliError::format(path, format!("file is {} bytes, shorter than its {len}-byte header", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(CliError::format(
            path,
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&bytes[..4]), String::from_utf8_lossy(magic)),
        ));
    }
    let dims = bytes[4..len].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((dims, &bytes[len..]))
}

fn check_payload(payload: &[u8], count: u64, path: &Path) -> Result<()> {
    let expected = count.checked_mul(4).ok_or_else(|| CliError::format(path, "header dimensions overflow"))?;
    if payload.len() as u64 != expected {
        return Err(CliError::format(
            path,
            format!("payload is {} bytes, expected {expected}", payload.len()),
        ));
    }
    Ok(())
}

pub fn decode_cft(bytes: &[u8], path: &Path) -> Result<FeatureTensor> {
    let (dims, payload) = header(bytes, CFT_MAGIC, 3, path)?;
    let (n, p, d) = (dims[0] as u64, dims[1] as u64, dims[2] as u64);
    check_payload(payload, n * p * d, path)?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(FeatureTensor::new(n as usize, p as usize, d as usize, data)?)
}

pub fn encode_labels(l: &LabelVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * l.len());
    out.extend_from_slice(LABELS_MAGIC);
    out.extend_from_slice(&(l.len() as u32).to_le_bytes());
    out.extend_from_slice(&(l.num_classes() as u32).to_le_bytes());
    for &y in l.labels() {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    out
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<LabelVector> {
    let (dims, payload) = header(bytes, LABELS_MAGIC, 2, path)?;
    check_payload(payload, dims[0] as u64, path)?;
    let labels = payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    Ok(LabelVector::new(labels, dims[1] as usize)?)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_cft(path: &Path) -> Result<FeatureTensor> {
    decode_cft(&read_bytes(path)?, path)
}

pub fn read_labels(path: &Path) -> Result<LabelVector> {
    decode_labels(&read_bytes(path)?, path)
}

pub fn write_cft(t: &FeatureTensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode_cft(t))
}

pub fn write_labels(l: &LabelVector, path: &Path) -> Result<()> {
    write_atomic(path, &encode_labels(l))
}

/// Writes to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(fs::Permissions::from_mode(0o644)).map_err(|e| CliError::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Rounds every value through `f32`, as a write and read would.
pub fn round_to_f32(t: &FeatureTensor) -> Result<FeatureTensor> {
    let (n, p, d) = t.shape();
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Ok(FeatureTensor::new(n, p, d, data)?)
}
