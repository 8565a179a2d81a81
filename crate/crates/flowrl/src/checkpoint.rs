//! Parameter checkpoints.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! magic  "SFGP" (4 bytes)
//! u32    format version (currently 1)
//! u32    layout entry count
//! per entry:
//!   u32  name length, then that many UTF-8 bytes
//!   u64  offset, u64 rows, u64 cols
//! u64    value count
//! f64[]  raw parameter values
//! ```
//!
//! A JSON sidecar at `<path>.json` carries the [`NetConfig`] and a role tag
//! ("reference", "policy", ...) so a checkpoint is interpretable on its own.

use crate::error::{Error, Result};
use crate::net::{Layout, LayoutEntry, NetConfig, ParamVector};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"SFGP";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    role: String,
    net: NetConfig,
}

/// Sidecar path: `<path>.json` appended to the full checkpoint name.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

pub fn save(path: &Path, net: &NetConfig, params: &ParamVector, role: &str) -> Result<()> {
    params.validate_finite().map_err(|_| {
        Error::Checkpoint("refusing to write non-finite parameters".into())
    })?;
    if params.len() != net.param_len() {
        return Err(Error::Checkpoint(format!(
            "parameter length {} does not match the net config ({})",
            params.len(),
            net.param_len()
        )));
    }

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.layout.entries.len() as u32).to_le_bytes());
    for entry in &params.layout.entries {
        let name = entry.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(entry.offset as u64).to_le_bytes());
        buf.extend_from_slice(&(entry.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(entry.cols as u64).to_le_bytes());
    }
    buf.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;

    let sidecar = Sidecar {
        version: VERSION,
        role: role.to_string(),
        net: net.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(NetConfig, ParamVector, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;

    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };

    if take(&mut cursor, 4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint)".into()));
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_entries = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("layout name is not UTF-8".into()))?;
        let offset = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let rows = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        entries.push(LayoutEntry {
            name,
            offset,
            rows,
            cols,
        });
    }
    let count = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()));
    }
    if cursor != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after values".into()));
    }

    let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let layout = Layout { entries };
    if layout.len() != values.len() {
        return Err(Error::Checkpoint(format!(
            "layout covers {} values but {} stored",
            layout.len(),
            values.len()
        )));
    }
    if sidecar.net.param_len() != values.len() {
        return Err(Error::Checkpoint(
            "sidecar net config does not match stored values".into(),
        ));
    }
    let params = ParamVector { values, layout };
    params
        .validate_finite()
        .map_err(|_| Error::Checkpoint("stored parameters are non-finite".into()))?;
    Ok((sidecar.net, params, sidecar.role))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.ckpt");
        let net = NetConfig::new(2, 4, vec![16, 8]);
        let params = ParamVector::init(&net, &mut StreamKey::new(5).rng());
        save(&path, &net, &params, "reference").unwrap();

        let (net2, params2, role) = load(&path).unwrap();
        assert_eq!(net, net2);
        assert_eq!(params.values, params2.values);
        assert_eq!(params.layout, params2.layout);
        assert_eq!(role, "reference");
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn refuses_non_finite_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.ckpt");
        let net = NetConfig::new(2, 1, vec![4]);
        let mut params = ParamVector::zeros(&net);
        params.values[0] = f64::NAN;
        assert!(save(&path, &net, &params, "policy").is_err());
    }

    #[test]
    fn checkpoint_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let net = NetConfig::new(2, 2, vec![8]);
        let params = ParamVector::init(&net, &mut StreamKey::new(9).rng());
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save(&a, &net, &params, "policy").unwrap();
        save(&b, &net, &params, "policy").unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
