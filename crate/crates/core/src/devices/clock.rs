use std::time::Instant;

/// Host time source consulted while recording (never during replay).
pub trait HostClock: Send {
    /// Milliseconds since the run started. `retired` is the guest's
    /// ground-truth instruction count, for clocks simulated from it.
    fn now_ms(&mut self, retired: u64) -> u64;
}

/// Monotonic wall clock.
#[derive(Debug, Clone)]
pub struct RealClock {
    start: Instant,
}

impl RealClock {
    pub fn new() -> Self {
        RealClock {
            start: Instant::now(),
        }
    }
}

impl Default for RealClock {
    fn default() -> Self {
        Self::new()
    }
}

impl HostClock for RealClock {
    fn now_ms(&mut self, _retired: u64) -> u64 {
        self.start.elapsed().as_millis() as u64
    }
}

/// A host clock that advances with guest progress: `instr_per_ms` retired
/// instructions make one millisecond, offset by `phase` instructions.
///
/// Recording with it is as nondeterministic as the guest can observe (the
/// values still flow through the log), but it makes test runs repeatable and
/// lets callers shift the timer phase on purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimClock {
    pub instr_per_ms: u64,
    pub phase: u64,
}

impl SimClock {
    pub fn new(instr_per_ms: u64, phase: u64) -> Self {
        assert!(instr_per_ms > 0);
        SimClock { instr_per_ms, phase }
    }
}

impl HostClock for SimClock {
    fn now_ms(&mut self, retired: u64) -> u64 {
        (retired + self.phase) / self.instr_per_ms
    }
}
