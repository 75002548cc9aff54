//! Record and replay.
//!
//! Both phases walk the same per-boundary schedule so that every event is
//! produced and consumed at the same point:
//!
//! 1. halted or at the instruction limit: final `StateHash`, then `Halt` or
//!    `Limit`;
//! 2. ground-truth `retired` at a nonzero multiple of the checkpoint interval:
//!    `StateHash` (and, while recording, a checkpoint file);
//! 3. interrupts enabled and a line due: `IrqDelivery`, then revisit the
//!    boundary (delivery retires nothing, so at most one delivery happens per
//!    boundary because delivery clears `ie`);
//! 4. execute one instruction; nondeterministic MMIO reads produce or consume
//!    `DeviceRead` stamped with the count before the instruction.
//!
//! Events carry the corrected counter value. When counting is filtered, one
//! count can span many boundaries; an interrupt's `nth` picks which
//! interrupt-enabled boundary with that count, counting from the previous
//! event.

mod record;
mod replay;
mod verify;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::counter::{Counter, CounterConfig, CounterError, CounterProfile};
use crate::devices::DeviceError;
use crate::isa::{Machine, ResetError};
use crate::par::Exec;
use crate::trace::{Digest, Event, TraceError, DEFAULT_CHECKPOINT_INTERVAL};

pub use record::{record, run_plain, PlainOutcome, RecordOutcome};
pub use replay::{replay, Boundary, ReplayOptions, Replayer, Retire};
pub use verify::{verify_segments, SegmentReport};

pub const DEFAULT_MAX_INSTRUCTIONS: u64 = 100_000_000;
/// Boundaries an interrupt may wait for `ie` at its logged count.
pub const MAX_IE_RETRIES: u64 = 1_000_000;
/// The host clock and stimulus are polled every this many boundaries.
pub(crate) const POLL_EVERY: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitReason {
    Halted,
    Limit,
    Divergence,
}

impl fmt::Display for ExitReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExitReason::Halted => "halted",
            ExitReason::Limit => "limit",
            ExitReason::Divergence => "divergence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    /// Corrected count at the end.
    pub final_icount: u64,
    /// Ground-truth retired instructions at the end.
    pub final_retired: u64,
    pub exit_reason: ExitReason,
    pub final_state_hash: Digest,
    pub event_count: u64,
    /// Informational.
    pub wall_time_ms: u64,
    pub divergence: Option<Box<Divergence>>,
}

impl RunSummary {
    /// Equal ignoring wall time.
    pub fn same_outcome(&self, other: &RunSummary) -> bool {
        RunSummary {
            wall_time_ms: 0,
            ..self.clone()
        } == RunSummary {
            wall_time_ms: 0,
            ..other.clone()
        }
    }
}

/// What replay saw where the log disagreed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    /// The guest read a nondeterministic register.
    DeviceRead { icount: u64, addr: u32 },
    /// A state hash was due here.
    StateHash { icount: u64, hash: Digest },
    Halt { icount: u64 },
    Limit { icount: u64 },
    /// The count moved past the next event without it applying.
    Passed { icount: u64 },
    /// An interrupt stayed masked at its logged count for too long.
    Masked { icount: u64, boundaries: u64 },
    /// Replay ended with events left over.
    Ended { icount: u64 },
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Observation::DeviceRead { icount, addr } => {
                let name = crate::devices::register_name(addr).unwrap_or("?");
                write!(f, "device read of {name} ({addr:#x}) at icount {icount}")
            }
            Observation::StateHash { icount, hash } => write!(f, "state hash {hash} at icount {icount}"),
            Observation::Halt { icount } => write!(f, "halt at icount {icount}"),
            Observation::Limit { icount } => write!(f, "instruction limit at icount {icount}"),
            Observation::Passed { icount } => write!(f, "count reached {icount} without the event applying"),
            Observation::Masked { icount, boundaries } => {
                write!(f, "interrupts masked for {boundaries} boundaries at icount {icount}")
            }
            Observation::Ended { icount } => write!(f, "replay ended at icount {icount}"),
        }
    }
}

/// First disagreement between replay and the log.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct Divergence {
    /// Sequence number of the event that did not match, or one past the last
    /// event when the log ran out.
    pub at_seq: u64,
    pub expected: Option<Event>,
    pub actual: Observation,
    pub nearest_checkpoint_icount: u64,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "divergence at seq {}: ", self.at_seq)?;
        match &self.expected {
            Some(e) => write!(f, "expected {e}")?,
            None => f.write_str("expected no further events")?,
        }
        write!(
            f,
            ", observed {} (nearest checkpoint at {})",
            self.actual, self.nearest_checkpoint_icount
        )
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Counter(#[from] CounterError),
    #[error(transparent)]
    Reset(#[from] ResetError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("log is incomplete: it does not end with halt or limit")]
    IncompleteLog,
    #[error("checkpoint at {icount} is unusable: {reason}")]
    BadCheckpoint { icount: u64, reason: String },
    #[error(transparent)]
    Divergence(#[from] Box<Divergence>),
}

/// Limits and settings for a recording.
#[derive(Debug, Clone)]
pub struct RecordOptions {
    pub config: CounterConfig,
    /// Permit a counter profile whose corrected value is unusable.
    pub allow_unusable_counter: bool,
    /// Ground-truth retired instructions after which recording stops.
    pub max_instructions: u64,
    /// Ground-truth retired instructions between state hashes.
    pub checkpoint_interval: u64,
    pub mem_size: usize,
    pub exec: Exec,
}

impl Default for RecordOptions {
    fn default() -> Self {
        RecordOptions {
            config: CounterConfig::default(),
            allow_unusable_counter: false,
            max_instructions: DEFAULT_MAX_INSTRUCTIONS,
            checkpoint_interval: DEFAULT_CHECKPOINT_INTERVAL,
            mem_size: crate::isa::DEFAULT_MEM_SIZE,
            exec: Exec::default(),
        }
    }
}

/// Per-boundary `nth` bookkeeping shared by both phases.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct NthTracker {
    count: Option<u64>,
    n: u32,
}

impl NthTracker {
    /// Called once at every interrupt-enabled boundary; returns this
    /// boundary's index among those with the same count since the last event.
    #[inline(always)]
    pub(crate) fn observe(&mut self, icount: u64) -> u32 {
        if self.count == Some(icount) {
            self.n += 1;
        } else {
            self.count = Some(icount);
            self.n = 0;
        }
        self.n
    }

    /// [`NthTracker::observe`] for `k > 0` consecutive boundaries whose
    /// counts are `first, first + stride, ...`.
    #[inline]
    pub(crate) fn observe_run(&mut self, first: u64, k: u64, stride: u64) {
        self.observe(first);
        if stride == 0 {
            self.n += (k - 1) as u32;
        } else if k > 1 {
            self.observe(first + (k - 1) * stride);
        }
    }

    #[inline]
    pub(crate) fn reset(&mut self) {
        self.count = None;
    }
}

/// Guest state sampled before a step, for counter accounting.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PreStep {
    retired: u64,
    switches: u64,
    mode: crate::isa::Mode,
    mark: bool,
}

impl PreStep {
    #[inline(always)]
    pub(crate) fn of(m: &Machine) -> Self {
        PreStep {
            retired: m.retired,
            switches: m.mode_switches,
            mode: m.mode(),
            mark: m.marked(),
        }
    }

    /// Feed what happened since `self` to the counter. Mode and MARK are
    /// those in effect at fetch.
    #[inline(always)]
    pub(crate) fn account(self, m: &Machine, counter: &mut Counter) {
        if m.retired != self.retired {
            counter.on_retire(self.mode, self.mark);
        }
        if m.mode_switches != self.switches {
            for _ in self.switches..m.mode_switches {
                counter.on_mode_switch(self.mark);
            }
        }
    }
}

/// Seed for the noise a replay of a flaky-counter log sees. The hardware
/// miscounts differently on every run, so replay never gets the recording's
/// noise back.
pub fn replay_noise_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

pub(crate) fn replay_profile(p: CounterProfile) -> CounterProfile {
    match p {
        CounterProfile::X86Flaky { seed } => CounterProfile::X86Flaky {
            seed: replay_noise_seed(seed),
        },
        other => other,
    }
}

pub(crate) fn image_check(which: &'static str, expected: Digest, bytes: &[u8]) -> Result<(), TraceError> {
    let actual = Digest::of(bytes);
    if actual != expected {
        return Err(TraceError::ImageMismatch {
            which,
            expected,
            actual,
        });
    }
    Ok(())
}

pub(crate) fn shared(bytes: &[u8]) -> Arc<[u8]> {
    Arc::from(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nth_counts_repeats_of_one_count() {
        let mut t = NthTracker::default();
        assert_eq!(t.observe(5), 0);
        assert_eq!(t.observe(5), 1);
        assert_eq!(t.observe(6), 0);
        t.reset();
        assert_eq!(t.observe(6), 0);
    }

    #[test]
    fn observe_run_matches_single_observes() {
        for (first, k, stride) in [(5, 1, 0), (5, 4, 0), (5, 4, 1), (6, 3, 1), (7, 1, 1)] {
            let mut a = NthTracker::default();
            let mut b = NthTracker::default();
            a.observe(5);
            b.observe(5);
            a.observe_run(first, k, stride);
            for i in 0..k {
                b.observe(first + i * stride);
            }
            assert_eq!((a.count, a.n), (b.count, b.n), "{first} {k} {stride}");
        }
    }

    #[test]
    fn divergence_reads_well() {
        let d = Divergence {
            at_seq: 4,
            expected: None,
            actual: Observation::Halt { icount: 9 },
            nearest_checkpoint_icount: 0,
        };
        assert_eq!(
            d.to_string(),
            "divergence at seq 4: expected no further events, observed halt at icount 9 (nearest checkpoint at 0)"
        );
    }
}
