//! Binary state snapshots: a JSON header followed by raw little-endian
//! 64-bit floats, one block per field, laid out (component, i, j) row-major.
//! The header carries a SHA-256 of the payload; a mismatch or a short file
//! is a corrupt-file error, never a partial load.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::FlowState;
use crate::field::VectorField;
use crate::grid::Grid;

pub const MAGIC: &[u8; 8] = b"VWSNAP1\n";

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("snapshot io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt snapshot: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub n1: usize,
    pub n2: usize,
    pub t: f64,
    /// Field names in payload order.
    pub fields: Vec<String>,
    /// Components per field.
    pub components: Vec<usize>,
    pub endianness: String,
    pub config_hash: String,
    pub payload_sha256: String,
}

fn field_bytes(f: &VectorField) -> Vec<u8> {
    let g = f.grid;
    let mut out = Vec::with_capacity(2 * g.n1 * g.n2 * 8);
    for comp in 0..2 {
        for i in 0..g.n1 {
            for j in 0..g.n2 {
                out.extend_from_slice(&f.data[comp][[i, j]].to_le_bytes());
            }
        }
    }
    out
}

fn field_from_bytes(grid: Grid, bytes: &[u8]) -> VectorField {
    let mut f = VectorField::zeros(grid);
    let mut k = 0;
    for comp in 0..2 {
        for i in 0..grid.n1 {
            for j in 0..grid.n2 {
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&bytes[k..k + 8]);
                f.data[comp][[i, j]] = f64::from_le_bytes(buf);
                k += 8;
            }
        }
    }
    f
}

pub fn write_snapshot(
    path: &Path,
    state: &FlowState,
    config_hash: &str,
) -> Result<(), SnapshotError> {
    let io_err = |source| SnapshotError::Io {
        path: path.display().to_string(),
        source,
    };
    let g = state.grid();
    let mut payload = field_bytes(&state.displacement);
    payload.extend_from_slice(&field_bytes(&state.velocity));
    let digest = hex_digest(&payload);
    let header = SnapshotHeader {
        n1: g.n1,
        n2: g.n2,
        t: state.time,
        fields: vec!["displacement".into(), "velocity".into()],
        components: vec![2, 2],
        endianness: "little".into(),
        config_hash: config_hash.to_string(),
        payload_sha256: digest,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&header_json).map_err(io_err)?;
    file.write_all(&payload).map_err(io_err)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<(FlowState, SnapshotHeader), SnapshotError> {
    let io_err = |source| SnapshotError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| SnapshotError::Corrupt("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(SnapshotError::Corrupt("bad magic".into()));
    }
    let mut len_buf = [0u8; 8];
    file.read_exact(&mut len_buf)
        .map_err(|_| SnapshotError::Corrupt("missing header length".into()))?;
    let header_len = u64::from_le_bytes(len_buf) as usize;
    if header_len > 1 << 20 {
        return Err(SnapshotError::Corrupt("unreasonable header length".into()));
    }
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| SnapshotError::Corrupt("truncated header".into()))?;
    let header: SnapshotHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| SnapshotError::Corrupt(format!("bad header json: {e}")))?;
    if header.endianness != "little" {
        return Err(SnapshotError::Corrupt(format!(
            "unsupported endianness {}",
            header.endianness
        )));
    }
    if header.fields != ["displacement", "velocity"] || header.components != [2, 2] {
        return Err(SnapshotError::Corrupt(format!(
            "unexpected field layout {:?}/{:?}",
            header.fields, header.components
        )));
    }
    let grid = Grid::new(header.n1, header.n2)
        .map_err(|e| SnapshotError::Corrupt(format!("bad grid in header: {e}")))?;
    let expect_len = 2 * 2 * grid.n1 * grid.n2 * 8;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(io_err)?;
    if payload.len() != expect_len {
        return Err(SnapshotError::Corrupt(format!(
            "payload length {} != expected {expect_len}",
            payload.len()
        )));
    }
    if hex_digest(&payload) != header.payload_sha256 {
        return Err(SnapshotError::Corrupt("payload checksum mismatch".into()));
    }
    let half = expect_len / 2;
    let state = FlowState {
        displacement: field_from_bytes(grid, &payload[..half]),
        velocity: field_from_bytes(grid, &payload[half..]),
        time: header.t,
    };
    Ok((state, header))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("viscowave-snap-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn roundtrip_bit_exact() {
        let g = Grid::new(16, 9).unwrap();
        let state = FlowState {
            displacement: crate::testutil::smooth_map(g, 0.05, 40),
            velocity: crate::testutil::smooth_map(g, 0.3, 41),
            time: 0.625,
        };
        let path = tmpdir().join("roundtrip.snap");
        write_snapshot(&path, &state, "deadbeef").unwrap();
        let (loaded, header) = read_snapshot(&path).unwrap();
        assert_eq!(header.config_hash, "deadbeef");
        assert_eq!(loaded.time, state.time);
        for k in 0..2 {
            assert_eq!(loaded.displacement.data[k], state.displacement.data[k]);
            assert_eq!(loaded.velocity.data[k], state.velocity.data[k]);
        }
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let g = Grid::new(16, 9).unwrap();
        let state = FlowState::equilibrium(g);
        let path = tmpdir().join("trunc.snap");
        write_snapshot(&path, &state, "x").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 17]).unwrap();
        assert!(matches!(
            read_snapshot(&path),
            Err(SnapshotError::Corrupt(_))
        ));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let g = Grid::new(16, 9).unwrap();
        let state = FlowState::equilibrium(g);
        let path = tmpdir().join("flip.snap");
        write_snapshot(&path, &state, "x").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 5] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_snapshot(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }
}
