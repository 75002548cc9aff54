//! Modeled retired-instruction counter.
//!
//! Three silicon profiles:
//!
//! * `Exact` counts admitted retires and nothing else.
//! * `PpcMpc7441` also ticks once on every user<->supervisor switch. The
//!   switches are counted by a second register, so subtracting them gives the
//!   exact count back.
//! * `X86Flaky` adds seeded noise that no second register can explain. Its
//!   corrected value is refused; reading the raw value anyway is only allowed
//!   through [`Counter::timestamp`], which replay uses for the negative test.
//!
//! Filters decide which retires are admitted: by privilege mode, and
//! optionally only while the guest's MARK CSR is set.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CounterProfile {
    Exact,
    PpcMpc7441,
    X86Flaky { seed: u64 },
}

impl CounterProfile {
    pub fn name(&self) -> &'static str {
        match self {
            CounterProfile::Exact => "exact",
            CounterProfile::PpcMpc7441 => "ppc",
            CounterProfile::X86Flaky { .. } => "x86-flaky",
        }
    }

    pub fn is_compensable(&self) -> bool {
        !matches!(self, CounterProfile::X86Flaky { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CounterConfig {
    pub profile: CounterProfile,
    pub count_user: bool,
    pub count_supervisor: bool,
    pub marked_only: bool,
}

impl Default for CounterConfig {
    fn default() -> Self {
        CounterConfig::all(CounterProfile::Exact)
    }
}

impl CounterConfig {
    /// Count every retired instruction in both modes.
    pub fn all(profile: CounterProfile) -> Self {
        CounterConfig {
            profile,
            count_user: true,
            count_supervisor: true,
            marked_only: false,
        }
    }

    /// Count only user-mode instructions retired with MARK set.
    pub fn marked_user(profile: CounterProfile) -> Self {
        CounterConfig {
            profile,
            count_user: true,
            count_supervisor: false,
            marked_only: true,
        }
    }

    pub fn with_profile(self, profile: CounterProfile) -> Self {
        CounterConfig { profile, ..self }
    }

    pub fn validate(&self) -> Result<(), CounterError> {
        if !self.count_user && !self.count_supervisor {
            return Err(CounterError::NoModeCounted);
        }
        Ok(())
    }

    /// Same filters, possibly different profile.
    pub fn same_filters(&self, other: &CounterConfig) -> bool {
        self.count_user == other.count_user
            && self.count_supervisor == other.count_supervisor
            && self.marked_only == other.marked_only
    }

    #[inline(always)]
    pub fn admits(&self, mode: Mode, mark: bool) -> bool {
        let mode_ok = match mode {
            Mode::User => self.count_user,
            Mode::Supervisor => self.count_supervisor,
        };
        mode_ok && (!self.marked_only || mark)
    }

    /// A switch always has a user side and a supervisor side, and at least one
    /// of those modes is counted, so only the mark filter can reject it.
    #[inline]
    pub fn admits_switch(&self, mark: bool) -> bool {
        !self.marked_only || mark
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CounterError {
    #[error("counter profile miscounts in ways that cannot be compensated; its value is unusable for replay")]
    UnusableCounter,
    #[error("PMI target {target} is behind the current count {current}")]
    PmiInPast { target: u64, current: u64 },
    #[error("counter configuration counts neither user nor supervisor mode")]
    NoModeCounted,
}

/// Raw registers of the modeled counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CounterState {
    pub raw: u64,
    pub mode_switch_snapshot: u64,
    pub pmi_target: Option<u64>,
    pub pmi_fired: bool,
}

/// A counter: configuration, registers, and the noise source for the flaky
/// profile.
#[derive(Debug, Clone)]
pub struct Counter {
    config: CounterConfig,
    state: CounterState,
    noise: Option<ChaCha8Rng>,
}

const FLAKY_RETIRE_MASK: u32 = 0xFF; // 1/256

impl Counter {
    pub fn new(config: CounterConfig) -> Self {
        Counter::resume(config, CounterState::default())
    }

    /// Continue counting from saved registers. The flaky profile's noise
    /// stream restarts from its seed; it is not part of the saved state.
    pub fn resume(config: CounterConfig, state: CounterState) -> Self {
        let noise = match config.profile {
            CounterProfile::X86Flaky { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        Counter {
            config,
            state: CounterState {
                pmi_target: None,
                pmi_fired: false,
                ..state
            },
            noise,
        }
    }

    /// Counter whose timestamp reads `ts`, for restoring under a profile that
    /// may differ from the one the value was recorded with.
    pub fn resume_at(config: CounterConfig, ts: u64) -> Self {
        Counter::resume(
            config,
            CounterState {
                raw: ts,
                ..CounterState::default()
            },
        )
    }

    pub fn config(&self) -> &CounterConfig {
        &self.config
    }

    pub fn state(&self) -> &CounterState {
        &self.state
    }

    #[inline(always)]
    pub fn on_retire(&mut self, mode: Mode, mark: bool) {
        if !self.config.admits(mode, mark) {
            return;
        }
        self.state.raw += 1;
        if self.noise.is_some() {
            self.retire_noise();
        }
        if self.state.pmi_target.is_some() {
            self.check_pmi();
        }
    }

    /// No noise source and no PMI armed: admitted retires are plain
    /// increments and may be applied in bulk with [`Counter::add_admitted`].
    #[inline]
    pub fn is_plain(&self) -> bool {
        self.noise.is_none() && self.state.pmi_target.is_none()
    }

    /// Apply `n` admitted retires at once. Only valid while
    /// [`Counter::is_plain`].
    #[inline]
    pub fn add_admitted(&mut self, n: u64) {
        debug_assert!(self.is_plain());
        self.state.raw += n;
    }

    #[cold]
    fn retire_noise(&mut self) {
        let rng = self.noise.as_mut().expect("checked by caller");
        if rng.next_u32() & FLAKY_RETIRE_MASK == 0 {
            self.state.raw += 1;
        }
    }

    /// `mark` is the MARK bit in effect when the switch happened.
    #[inline]
    pub fn on_mode_switch(&mut self, mark: bool) {
        if !self.config.admits_switch(mark) {
            return;
        }
        match self.config.profile {
            CounterProfile::Exact => {}
            CounterProfile::PpcMpc7441 => {
                self.state.raw += 1;
                self.state.mode_switch_snapshot += 1;
            }
            CounterProfile::X86Flaky { .. } => {
                let rng = self.noise.as_mut().expect("flaky counter has a noise source");
                if rng.next_u32() & 1 == 0 {
                    self.state.raw += 1;
                    self.check_pmi();
                }
            }
        }
    }

    pub fn corrected(&self) -> Result<u64, CounterError> {
        match self.config.profile {
            CounterProfile::Exact => Ok(self.state.raw),
            CounterProfile::PpcMpc7441 => Ok(self.state.raw - self.state.mode_switch_snapshot),
            CounterProfile::X86Flaky { .. } => Err(CounterError::UnusableCounter),
        }
    }

    /// The value events are stamped with: the corrected count, or for the
    /// flaky profile the raw reading taken at face value.
    #[inline]
    pub fn timestamp(&self) -> u64 {
        self.state.raw - self.state.mode_switch_snapshot
    }

    /// Fire once the timestamp reaches `target`. Arming at the current value
    /// fires immediately.
    pub fn arm_pmi(&mut self, target: u64) -> Result<(), CounterError> {
        let current = self.timestamp();
        if target < current {
            return Err(CounterError::PmiInPast { target, current });
        }
        self.state.pmi_target = Some(target);
        self.state.pmi_fired = current >= target;
        Ok(())
    }

    #[inline]
    pub fn pmi_fired(&self) -> bool {
        self.state.pmi_fired
    }

    pub fn clear_pmi(&mut self) {
        self.state.pmi_target = None;
        self.state.pmi_fired = false;
    }

    #[inline]
    fn check_pmi(&mut self) {
        if let Some(t) = self.state.pmi_target {
            // `>=` rather than `==`: only the flaky profile can jump past.
            if !self.state.pmi_fired && self.timestamp() >= t {
                self.state.pmi_fired = true;
            }
        }
    }
}
