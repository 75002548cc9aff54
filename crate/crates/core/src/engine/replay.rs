use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::counter::{Counter, CounterConfig, CounterProfile, CounterState};
use crate::devices::{DeviceBus, Devices, Io, ReadSource};
use crate::isa::{IrqGate, Machine, Mode, StepOutcome, TrapCause};
use crate::trace::{
    load_checkpoint, serialize_state_into, Checkpoint, Digest, Event, EventKind, TraceLog, TraceWriter,
};

use super::{
    image_check, replay_profile, shared, Divergence, EngineError, ExitReason, NthTracker, Observation, PreStep,
    RunSummary, MAX_IE_RETRIES,
};

#[derive(Debug, Clone, Default)]
pub struct ReplayOptions {
    /// Count with this profile instead of the recording's. Filters stay as
    /// recorded.
    pub counter_profile: Option<CounterProfile>,
    /// Write the events replay observes to a fresh log here.
    pub shadow_log: Option<PathBuf>,
}

/// Where a replay stands after the current boundary's events are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Ready to execute the next instruction.
    Running,
    Finished(ExitReason),
}

/// One executed step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Retire {
    pub pc: u32,
    /// Mode at fetch.
    pub mode: Mode,
    /// Ground-truth `retired` before the step.
    pub retired_before: u64,
    pub outcome: StepOutcome,
}

impl Retire {
    pub fn retired(&self) -> bool {
        !matches!(self.outcome, StepOutcome::Trapped(c) if c != TrapCause::ECALL)
    }
}

/// Serves logged device reads to the bus during one step.
struct LogReads<'a> {
    events: &'a [Event],
    cursor: usize,
    consumed: Option<Event>,
}

impl ReadSource for LogReads<'_> {
    fn next_read(&mut self, addr: u32, icount: u64) -> Result<u32, Box<Divergence>> {
        let ev = self.events.get(self.cursor).copied();
        match ev {
            Some(e @ Event {
                kind: EventKind::DeviceRead { addr: a, value },
                ..
            }) if a == addr && e.icount == icount && self.consumed.is_none() => {
                self.cursor += 1;
                self.consumed = Some(e);
                Ok(value)
            }
            _ => Err(Box::new(Divergence {
                at_seq: ev.map_or(self.events.len() as u64, |e| e.seq),
                expected: ev,
                actual: Observation::DeviceRead { icount, addr },
                nearest_checkpoint_icount: 0,
            })),
        }
    }
}

/// A replay in progress. Owns the machine, devices, counter and log cursor.
///
/// Pause points are instruction boundaries after the boundary's events have
/// been applied ("settled"). Every query method reports the state at the
/// current pause point.
pub struct Replayer {
    log: Arc<TraceLog>,
    disk: Arc<[u8]>,
    kernel: Arc<[u8]>,
    config: CounterConfig,
    machine: Machine,
    devices: Devices,
    counter: Counter,
    cursor: usize,
    tracker: NthTracker,
    settled: bool,
    next_ckpt: u64,
    masked: u64,
    finished: Option<ExitReason>,
    divergence: Option<Box<Divergence>>,
    shadow: Option<TraceWriter>,
    checkpoints: Vec<u64>,
    cached: Option<Arc<Checkpoint>>,
    scratch: Vec<u8>,
}

impl Replayer {
    pub fn open(
        log_path: impl AsRef<Path>,
        kernel: &[u8],
        disk: &[u8],
        opts: &ReplayOptions,
    ) -> Result<Replayer, EngineError> {
        Replayer::new(Arc::new(TraceLog::open(log_path)?), kernel, disk, opts)
    }

    pub fn new(log: Arc<TraceLog>, kernel: &[u8], disk: &[u8], opts: &ReplayOptions) -> Result<Replayer, EngineError> {
        image_check("kernel", log.header.kernel_image_hash, kernel)?;
        image_check("disk", log.header.disk_image_hash, disk)?;
        if !log.is_complete() {
            return Err(EngineError::IncompleteLog);
        }
        let recorded = log.header.counter_config;
        let config = match opts.counter_profile {
            Some(p) => recorded.with_profile(p),
            None => recorded.with_profile(replay_profile(recorded.profile)),
        };
        config.validate()?;
        let shadow = match &opts.shadow_log {
            Some(p) => Some(TraceWriter::create(p, &log.header)?),
            None => None,
        };
        let checkpoints = log.checkpoints()?;
        let kernel = shared(kernel);
        let machine = Machine::reset(&kernel, log.header.mem_size as usize)?;
        let mut r = Replayer {
            devices: Devices::for_replay(shared(disk)),
            disk: shared(disk),
            kernel,
            config,
            machine,
            counter: Counter::new(config),
            cursor: 0,
            tracker: NthTracker::default(),
            settled: false,
            next_ckpt: log.header.checkpoint_interval,
            masked: 0,
            finished: None,
            divergence: None,
            shadow,
            checkpoints,
            cached: None,
            scratch: Vec::new(),
            log,
        };
        r.arm();
        Ok(r)
    }

    pub fn log(&self) -> &Arc<TraceLog> {
        &self.log
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    pub fn devices(&self) -> &Devices {
        &self.devices
    }

    pub fn counter(&self) -> &Counter {
        &self.counter
    }

    pub fn counter_config(&self) -> &CounterConfig {
        &self.config
    }

    /// Corrected count at the current boundary.
    pub fn icount(&self) -> u64 {
        self.counter.timestamp()
    }

    pub fn retired(&self) -> u64 {
        self.machine.retired
    }

    /// Index of the next event to apply.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn finished(&self) -> Option<ExitReason> {
        self.finished
    }

    pub fn divergence(&self) -> Option<&Divergence> {
        self.divergence.as_deref()
    }

    /// Ground-truth retired counts that have a checkpoint file.
    pub fn checkpoints(&self) -> &[u64] {
        &self.checkpoints
    }

    pub fn nearest_checkpoint(&self) -> u64 {
        self.checkpoints
            .iter()
            .rev()
            .find(|&&c| c <= self.machine.retired)
            .copied()
            .unwrap_or(0)
    }

    pub fn state_hash(&mut self) -> Digest {
        serialize_state_into(&mut self.scratch, &self.machine, self.counter.timestamp(), &self.devices);
        Digest::of(&self.scratch)
    }

    fn arm(&mut self) {
        match self.log.events.get(self.cursor) {
            // A target behind the count is caught by `settle`.
            Some(ev) => {
                if self.counter.arm_pmi(ev.icount).is_err() {
                    self.counter.arm_pmi(self.counter.timestamp()).expect("arming at the current count");
                }
            }
            None => self.counter.clear_pmi(),
        }
    }

    fn diverge(&self, actual: Observation) -> Box<Divergence> {
        let expected = self.log.events.get(self.cursor).copied();
        Box::new(Divergence {
            at_seq: expected.map_or(self.log.events.len() as u64, |e| e.seq),
            expected,
            actual,
            nearest_checkpoint_icount: self.nearest_checkpoint(),
        })
    }

    /// Advance past the event at the cursor, which replay observed as
    /// `observed`.
    fn consume(&mut self, observed: Event) {
        self.cursor += 1;
        self.tracker.reset();
        self.masked = 0;
        if let Some(w) = self.shadow.as_mut() {
            if w.append(observed).is_err() {
                self.shadow = None;
            }
        }
        self.arm();
    }

    fn expect_hash(&mut self, ts: u64) -> Result<(), Box<Divergence>> {
        let hash = self.state_hash();
        match self.log.events.get(self.cursor).copied() {
            Some(e) if e.icount == ts && e.kind == (EventKind::StateHash { hash }) => {
                self.consume(e);
                Ok(())
            }
            _ => Err(self.diverge(Observation::StateHash { icount: ts, hash })),
        }
    }

    /// Apply every event due at the current boundary. Idempotent until the
    /// next instruction executes.
    pub fn settle(&mut self) -> Result<Boundary, Box<Divergence>> {
        if let Some(d) = &self.divergence {
            return Err(d.clone());
        }
        if let Some(r) = self.finished {
            return Ok(Boundary::Finished(r));
        }
        if self.settled {
            return Ok(Boundary::Running);
        }
        let r = self.settle_inner();
        match &r {
            Err(d) => self.divergence = Some(d.clone()),
            Ok(Boundary::Running) => self.settled = true,
            Ok(Boundary::Finished(_)) => {}
        }
        r
    }

    fn settle_inner(&mut self) -> Result<Boundary, Box<Divergence>> {
        let ts = self.counter.timestamp();
        let limit = self.machine.retired >= self.log.header.max_instructions;
        if self.machine.halted || limit {
            let (reason, kind, obs) = if self.machine.halted {
                (ExitReason::Halted, EventKind::Halt, Observation::Halt { icount: ts })
            } else {
                (ExitReason::Limit, EventKind::Limit, Observation::Limit { icount: ts })
            };
            self.expect_hash(ts)?;
            match self.log.events.get(self.cursor).copied() {
                Some(e) if e.icount == ts && e.kind == kind => self.consume(e),
                _ => return Err(self.diverge(obs)),
            }
            if self.cursor != self.log.events.len() {
                return Err(self.diverge(Observation::Ended { icount: ts }));
            }
            self.finished = Some(reason);
            if let Some(w) = self.shadow.take() {
                let _ = w.finish();
            }
            return Ok(Boundary::Finished(reason));
        }
        if self.machine.retired == self.next_ckpt {
            self.next_ckpt += self.log.header.checkpoint_interval;
            self.expect_hash(ts)?;
        }
        if !self.counter.pmi_fired() {
            return Ok(Boundary::Running);
        }
        let Some(ev) = self.log.events.get(self.cursor).copied() else {
            return Ok(Boundary::Running);
        };
        if ts > ev.icount {
            return Err(self.diverge(Observation::Passed { icount: ts }));
        }
        if let EventKind::IrqDelivery { line, nth } = ev.kind {
            if self.machine.status.ie {
                let n = self.tracker.observe(ts);
                if n == nth {
                    let pre = PreStep::of(&self.machine);
                    self.machine.deliver_interrupt(TrapCause::irq(line));
                    pre.account(&self.machine, &mut self.counter);
                    self.consume(Event {
                        seq: ev.seq,
                        icount: ts,
                        kind: EventKind::IrqDelivery { line, nth: n },
                    });
                } else if n > nth {
                    return Err(self.diverge(Observation::Passed { icount: ts }));
                }
            } else {
                self.masked += 1;
                if self.masked > MAX_IE_RETRIES {
                    return Err(self.diverge(Observation::Masked {
                        icount: ts,
                        boundaries: self.masked,
                    }));
                }
            }
        }
        Ok(Boundary::Running)
    }

    /// Settle, then execute one instruction. `None` once the replay has
    /// finished.
    pub fn exec_one(&mut self) -> Result<Option<Retire>, Box<Divergence>> {
        if let Boundary::Finished(_) = self.settle()? {
            return Ok(None);
        }
        let pre = PreStep::of(&self.machine);
        let pc = self.machine.pc;
        let ts = self.counter.timestamp();
        let mut reads = LogReads {
            events: &self.log.events,
            cursor: self.cursor,
            consumed: None,
        };
        let mut bus = DeviceBus::new(
            &mut self.devices,
            Io::Replay {
                icount: ts,
                source: &mut reads,
            },
        );
        let outcome = self.machine.step(&mut bus, IrqGate::Closed);
        let failed = bus.divergence.take();
        let consumed = reads.consumed;
        self.settled = false;
        if let Some(mut d) = failed {
            d.nearest_checkpoint_icount = self.nearest_checkpoint();
            self.divergence = Some(d.clone());
            return Err(d);
        }
        pre.account(&self.machine, &mut self.counter);
        if let Some(e) = consumed {
            self.consume(e);
        }
        Ok(Some(Retire {
            pc,
            mode: pre.mode,
            retired_before: pre.retired,
            outcome,
        }))
    }

    /// Run while `keep_going` holds at settled boundaries. Stops at the first
    /// settled boundary where it does not, or when the replay finishes.
    pub fn run_while(&mut self, mut keep_going: impl FnMut(&Replayer) -> bool) -> Result<Boundary, Box<Divergence>> {
        loop {
            if let Boundary::Finished(r) = self.settle()? {
                return Ok(Boundary::Finished(r));
            }
            if !keep_going(self) {
                return Ok(Boundary::Running);
            }
            self.exec_one()?;
        }
    }

    /// Run until exactly `target` corrected instructions have been counted,
    /// stopping at the first settled boundary with that count.
    pub fn run_until(&mut self, target: u64) -> Result<Boundary, Box<Divergence>> {
        self.run_while(|r| r.icount() < target)
    }

    /// Replay to the end and summarize.
    pub fn run_to_end(&mut self) -> RunSummary {
        let started = Instant::now();
        let result = self.run_while(|_| true);
        let exit_reason = match result {
            Ok(Boundary::Finished(r)) => r,
            Ok(Boundary::Running) => unreachable!("run_while(|_| true) only stops at the end"),
            Err(_) => ExitReason::Divergence,
        };
        RunSummary {
            final_icount: self.icount(),
            final_retired: self.machine.retired,
            exit_reason,
            final_state_hash: self.state_hash(),
            event_count: self.cursor as u64,
            wall_time_ms: started.elapsed().as_millis() as u64,
            divergence: result.err(),
        }
    }

    fn reset(&mut self) -> Result<(), EngineError> {
        self.machine = Machine::reset(&self.kernel, self.log.header.mem_size as usize)?;
        self.devices = Devices::for_replay(self.disk.clone());
        self.counter = Counter::new(self.config);
        self.cursor = 0;
        self.next_ckpt = self.log.header.checkpoint_interval;
        self.after_jump();
        Ok(())
    }

    fn after_jump(&mut self) {
        self.tracker.reset();
        self.settled = false;
        self.masked = 0;
        self.finished = None;
        self.divergence = None;
        // A shadow log only makes sense for one straight pass.
        self.shadow = None;
        self.arm();
    }

    fn load(&mut self, retired: u64) -> Result<Arc<Checkpoint>, EngineError> {
        if let Some(c) = self.cached.as_ref().filter(|c| c.icount == retired) {
            return Ok(c.clone());
        }
        let ckpt = load_checkpoint(&self.log.path, retired)?
            .filter(|c| c.icount == retired)
            .ok_or_else(|| EngineError::BadCheckpoint {
                icount: retired,
                reason: "checkpoint file disappeared".into(),
            })?;
        let ckpt = Arc::new(ckpt);
        self.cached = Some(ckpt.clone());
        Ok(ckpt)
    }

    /// Restore the checkpoint taken at ground-truth count `retired`.
    pub fn restore(&mut self, retired: u64) -> Result<(), EngineError> {
        let ckpt = self.load(retired)?;
        let bad = |reason: String| EngineError::BadCheckpoint { icount: retired, reason };
        let snap = ckpt.snapshot().map_err(bad)?;
        if snap.machine.retired != retired {
            return Err(bad(format!("contains retired count {}", snap.machine.retired)));
        }
        let cursor = ckpt.log_cursor as usize;
        let logged = cursor.checked_sub(1).and_then(|i| self.log.events.get(i));
        match logged {
            Some(e) if e.kind == (EventKind::StateHash { hash: ckpt.state_hash }) => {}
            _ => return Err(bad("state does not match the log's hash at that point".into())),
        }
        self.counter = if self.config.profile == self.log.header.counter_config.profile {
            Counter::resume(
                self.config,
                CounterState {
                    raw: ckpt.counter_raw,
                    mode_switch_snapshot: ckpt.counter_snapshot,
                    ..CounterState::default()
                },
            )
        } else {
            Counter::resume_at(self.config, snap.counter_value)
        };
        self.devices = snap.devices(self.disk.clone());
        self.machine = snap.machine;
        self.cursor = cursor;
        self.next_ckpt = retired + self.log.header.checkpoint_interval;
        self.after_jump();
        Ok(())
    }

    /// Jump to the best starting point for reaching ground-truth `retired`
    /// no earlier than `limit` (exclusive upper bound on checkpoints used).
    fn rewind_for(&mut self, limit: u64) -> Result<(), EngineError> {
        let here = self.machine.retired;
        let best = self.checkpoints.iter().rev().find(|&&c| c < limit).copied();
        let moving_forward = self.divergence.is_none() && here < limit;
        match best {
            Some(c) if !(moving_forward && here >= c) => self.restore(c),
            None if !moving_forward => self.reset(),
            _ => Ok(()),
        }
    }

    /// Jump back to the latest checkpoint at or below ground-truth `retired`
    /// (or to reset), even when the replay is already past it.
    pub fn rewind(&mut self, retired: u64) -> Result<(), EngineError> {
        match self.checkpoints.iter().rev().find(|&&c| c <= retired).copied() {
            Some(c) => self.restore(c),
            None => self.reset(),
        }
    }

    /// Pause at the settled boundary where `retired` ground-truth
    /// instructions have completed.
    pub fn seek_retired(&mut self, retired: u64) -> Result<Boundary, EngineError> {
        self.rewind_for(retired + 1)?;
        Ok(self.run_while(|r| r.machine.retired < retired)?)
    }

    /// Pause at the first settled boundary whose corrected count is
    /// `icount`.
    pub fn seek(&mut self, icount: u64) -> Result<Boundary, EngineError> {
        if icount == 0 {
            self.reset()?;
        } else if self.icount() >= icount || self.divergence.is_some() {
            // Checkpoints strictly before `icount` retired instructions have a
            // count below `icount`.
            let best = self.checkpoints.iter().rev().find(|&&c| c < icount).copied();
            match best {
                Some(c) => self.restore(c)?,
                None => self.reset()?,
            }
        } else if let Some(&c) = self.checkpoints.iter().rev().find(|&&c| c < icount) {
            if c > self.machine.retired {
                self.restore(c)?;
            }
        }
        Ok(self.run_until(icount)?)
    }
}

/// Replay a log file to the end.
pub fn replay(log_path: &Path, kernel: &[u8], disk: &[u8], opts: &ReplayOptions) -> Result<RunSummary, EngineError> {
    Ok(Replayer::open(log_path, kernel, disk, opts)?.run_to_end())
}
