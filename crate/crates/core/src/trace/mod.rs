//! On-disk record of a run.
//!
//! A log is a JSON-lines file. Line 1 is the [`TraceHeader`]; every following
//! line is one [`Event`] with keys in a fixed order (`seq`, `icount`, `kind`,
//! then payload fields alphabetically). Checkpoints live next to the log as
//! `<log>.ckpt.<icount>`.

mod checkpoint;
mod log;
mod state;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::counter::CounterConfig;

pub use checkpoint::{checkpoint_path, list_checkpoints, load_checkpoint, write_checkpoint, Checkpoint};
pub use log::{TraceLog, TraceWriter};
pub use state::{serialize_state, serialize_state_into, state_hash, Snapshot};

pub const FORMAT_VERSION: u32 = 1;
pub const ISA_VERSION: u32 = 1;
pub const HASH_ALGORITHM: &str = "sha256";
pub const DEFAULT_CHECKPOINT_INTERVAL: u64 = 100_000;

/// A SHA-256 digest. Serialized as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Digest {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest(out))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub isa_version: u32,
    pub hash_algorithm: String,
    pub mem_size: u64,
    pub kernel_image_hash: Digest,
    pub disk_image_hash: Digest,
    pub counter_config: CounterConfig,
    pub checkpoint_interval: u64,
    /// Ground-truth instruction limit the recording ran under.
    pub max_instructions: u64,
    /// Unix seconds; informational and excluded from every comparison.
    pub created_at: u64,
}

impl TraceHeader {
    /// Equal in everything but `created_at`.
    pub fn same_run_parameters(&self, other: &TraceHeader) -> bool {
        TraceHeader {
            created_at: 0,
            ..self.clone()
        } == TraceHeader {
            created_at: 0,
            ..other.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    /// External interrupt `line` delivered at the `nth` interrupt-enabled
    /// boundary carrying this event's icount since the previous event. `nth`
    /// is always 0 when every instruction is counted.
    IrqDelivery { line: u32, nth: u32 },
    /// The guest read `value` from nondeterministic register `addr`.
    DeviceRead { addr: u32, value: u32 },
    StateHash { hash: Digest },
    /// The guest executed HALT. Terminal.
    Halt,
    /// Recording stopped at its instruction limit. Terminal.
    Limit,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::IrqDelivery { .. } => "irq_delivery",
            EventKind::DeviceRead { .. } => "device_read",
            EventKind::StateHash { .. } => "state_hash",
            EventKind::Halt => "halt",
            EventKind::Limit => "limit",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, EventKind::Halt | EventKind::Limit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub seq: u64,
    /// Corrected instruction count when the event happened.
    pub icount: u64,
    pub kind: EventKind,
}

impl Event {
    /// One JSON object, no trailing newline, keys in canonical order.
    pub fn to_json(&self) -> String {
        let head = format!("{{\"seq\":{},\"icount\":{},\"kind\":\"{}\"", self.seq, self.icount, self.kind.name());
        let tail = match self.kind {
            EventKind::IrqDelivery { line, nth: 0 } => format!(",\"line\":{line}}}"),
            EventKind::IrqDelivery { line, nth } => format!(",\"line\":{line},\"nth\":{nth}}}"),
            EventKind::DeviceRead { addr, value } => format!(",\"addr\":{addr},\"value\":{value}}}"),
            EventKind::StateHash { hash } => format!(",\"hash\":\"{hash}\"}}"),
            EventKind::Halt | EventKind::Limit => "}".to_string(),
        };
        head + &tail
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::from_str(&self.to_json()).expect("event JSON is well formed")
    }

    pub fn from_json(s: &str) -> Result<Event, String> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            seq: u64,
            icount: u64,
            kind: String,
            line: Option<u32>,
            nth: Option<u32>,
            addr: Option<u32>,
            value: Option<u32>,
            hash: Option<Digest>,
        }
        let r: Raw = serde_json::from_str(s).map_err(|e| e.to_string())?;
        let missing = |f: &str| format!("{} event without `{f}`", r.kind);
        let kind = match r.kind.as_str() {
            "irq_delivery" => EventKind::IrqDelivery {
                line: r.line.ok_or_else(|| missing("line"))?,
                nth: r.nth.unwrap_or(0),
            },
            "device_read" => EventKind::DeviceRead {
                addr: r.addr.ok_or_else(|| missing("addr"))?,
                value: r.value.ok_or_else(|| missing("value"))?,
            },
            "state_hash" => EventKind::StateHash {
                hash: r.hash.ok_or_else(|| missing("hash"))?,
            },
            "halt" => EventKind::Halt,
            "limit" => EventKind::Limit,
            other => return Err(format!("unknown event kind `{other}`")),
        };
        if let EventKind::IrqDelivery { line, .. } = kind {
            if line >= crate::isa::IRQ_LINES {
                return Err(format!("irq line {line} out of range"));
            }
        }
        Ok(Event {
            seq: r.seq,
            icount: r.icount,
            kind,
        })
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json())
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt log at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("event seq {seq} icount {icount} breaks ordering after seq {prev_seq} icount {prev_icount}")]
    NonMonotonic {
        seq: u64,
        icount: u64,
        prev_seq: u64,
        prev_icount: u64,
    },
    #[error("event appended after the terminal event")]
    AfterTerminal,
    #[error("{which} image hash {actual} does not match the log header ({expected})")]
    ImageMismatch {
        which: &'static str,
        expected: Digest,
        actual: Digest,
    },
    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl TraceError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> TraceError {
        let path = path.into();
        move |source| TraceError::Io { path, source }
    }
}

/// Ordering rule shared by the writer and the reader.
pub(crate) fn check_order(prev: Option<&Event>, next: &Event) -> Result<(), TraceError> {
    if let Some(p) = prev {
        if p.kind.is_terminal() {
            return Err(TraceError::AfterTerminal);
        }
        if next.seq <= p.seq || next.icount < p.icount {
            return Err(TraceError::NonMonotonic {
                seq: next.seq,
                icount: next.icount,
                prev_seq: p.seq,
                prev_icount: p.icount,
            });
        }
    }
    Ok(())
}
