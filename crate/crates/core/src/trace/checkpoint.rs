//! Checkpoint sidecar files.
//!
//! `<log>.ckpt.<icount>` holds a small fixed header followed by the canonical
//! state serialization:
//!
//! ```text
//! b"ERVMCKPT" | version u32 | icount u64 | log_cursor u64
//! | counter raw u64 | counter switch snapshot u64 | state length u64 | blocks
//! ```
//!
//! The state is stored in 4 KiB blocks, each a tag byte followed by the block
//! when the tag is 1; tag 0 stands for a block of zeros. Guest memory is
//! mostly untouched, so this keeps checkpoints small and cheap to write.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Digest, Snapshot, TraceError};

const MAGIC: &[u8; 8] = b"ERVMCKPT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 * 5;
const BLOCK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub icount: u64,
    /// Index of the first event not yet applied at this point.
    pub log_cursor: u64,
    pub counter_raw: u64,
    pub counter_snapshot: u64,
    /// Canonical serialization.
    pub state: Vec<u8>,
    pub state_hash: Digest,
}

impl Checkpoint {
    pub fn snapshot(&self) -> Result<Snapshot, String> {
        Snapshot::parse(&self.state)
    }

    fn encode_into(&self, out: &mut impl Write) -> std::io::Result<()> {
        static ZERO: [u8; BLOCK] = [0; BLOCK];
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        for v in [
            self.icount,
            self.log_cursor,
            self.counter_raw,
            self.counter_snapshot,
            self.state.len() as u64,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for block in self.state.chunks(BLOCK) {
            if block == &ZERO[..block.len()] {
                out.write_all(&[0])?;
            } else {
                out.write_all(&[1])?;
                out.write_all(block)?;
            }
        }
        Ok(())
    }

    #[cfg(test)]
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out).unwrap();
        out
    }

    fn decode(bytes: &[u8]) -> Result<Checkpoint, String> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let u64_at = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let len = u64_at(44) as usize;
        let mut state = Vec::with_capacity(len);
        let mut rest = &bytes[HEADER_LEN..];
        while state.len() < len {
            let n = BLOCK.min(len - state.len());
            match rest.split_first() {
                Some((0, tail)) => {
                    state.resize(state.len() + n, 0);
                    rest = tail;
                }
                Some((1, tail)) if tail.len() >= n => {
                    state.extend_from_slice(&tail[..n]);
                    rest = &tail[n..];
                }
                _ => return Err(format!("state truncated at byte {} of {len}", state.len())),
            }
        }
        if !rest.is_empty() {
            return Err(format!("{} stray bytes after the state", rest.len()));
        }
        Ok(Checkpoint {
            icount: u64_at(12),
            log_cursor: u64_at(20),
            counter_raw: u64_at(28),
            counter_snapshot: u64_at(36),
            state_hash: Digest::of(&state),
            state,
        })
    }
}

pub fn checkpoint_path(log: &Path, icount: u64) -> PathBuf {
    let mut name = log.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".ckpt.{icount}"));
    log.with_file_name(name)
}

pub fn write_checkpoint(log: &Path, ckpt: &Checkpoint) -> Result<(), TraceError> {
    let path = checkpoint_path(log, ckpt.icount);
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::with_capacity(1 << 16, File::create(&path)?);
        ckpt.encode_into(&mut w)?;
        w.flush()
    };
    write().map_err(TraceError::io(&path))
}

/// Icounts of all checkpoints next to `log`, ascending.
pub fn list_checkpoints(log: &Path) -> Result<Vec<u64>, TraceError> {
    let dir = match log.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let prefix = format!("{}.ckpt.", log.file_name().unwrap_or_default().to_string_lossy());
    let mut out = Vec::new();
    let entries = match std::fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(TraceError::Io { path: dir, source: e }),
    };
    for entry in entries {
        let entry = entry.map_err(TraceError::io(&dir))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name.strip_prefix(&prefix).and_then(|s| s.parse::<u64>().ok()) {
            out.push(n);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Latest checkpoint with icount `<= icount`. `None` means the reset state
/// (icount 0) is the best starting point.
pub fn load_checkpoint(log: &Path, icount: u64) -> Result<Option<Checkpoint>, TraceError> {
    let Some(&at) = list_checkpoints(log)?.iter().rev().find(|&&c| c <= icount) else {
        return Ok(None);
    };
    read_checkpoint(log, at).map(Some)
}

pub(crate) fn read_checkpoint(log: &Path, icount: u64) -> Result<Checkpoint, TraceError> {
    let path = checkpoint_path(log, icount);
    let bytes = std::fs::read(&path).map_err(TraceError::io(&path))?;
    let ckpt = Checkpoint::decode(&bytes).map_err(|reason| TraceError::Checkpoint {
        path: path.clone(),
        reason,
    })?;
    if ckpt.icount != icount {
        return Err(TraceError::Checkpoint {
            path,
            reason: format!("file name says icount {icount}, contents say {}", ckpt.icount),
        });
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(icount: u64) -> Checkpoint {
        let state = vec![icount as u8; 64];
        Checkpoint {
            icount,
            log_cursor: icount / 10,
            counter_raw: icount + 3,
            counter_snapshot: 3,
            state_hash: Digest::of(&state),
            state,
        }
    }

    #[test]
    fn load_picks_latest_at_or_before() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("run.log");
        write_checkpoint(&log, &ckpt(5000)).unwrap();
        write_checkpoint(&log, &ckpt(10000)).unwrap();
        assert_eq!(list_checkpoints(&log).unwrap(), vec![5000, 10000]);
        assert_eq!(load_checkpoint(&log, 7000).unwrap().unwrap(), ckpt(5000));
        assert_eq!(load_checkpoint(&log, 10000).unwrap().unwrap().icount, 10000);
        assert_eq!(load_checkpoint(&log, 4999).unwrap(), None);
    }

    #[test]
    fn other_logs_checkpoints_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(&dir.path().join("a.log"), &ckpt(1)).unwrap();
        assert!(list_checkpoints(&dir.path().join("b.log")).unwrap().is_empty());
    }

    #[test]
    fn sparse_blocks_round_trip() {
        let mut state = vec![0u8; 3 * BLOCK + 100];
        state[BLOCK + 7] = 9;
        state[3 * BLOCK + 99] = 1;
        let c = Checkpoint {
            state_hash: Digest::of(&state),
            state,
            ..ckpt(1)
        };
        let bytes = c.encode();
        assert!(bytes.len() < HEADER_LEN + 4 + 2 * BLOCK);
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), c);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("run.log");
        write_checkpoint(&log, &ckpt(10)).unwrap();
        let p = checkpoint_path(&log, 10);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(&log, 10), Err(TraceError::Checkpoint { .. })));
    }
}
