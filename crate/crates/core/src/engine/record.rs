use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::counter::{Counter, CounterError};
use crate::devices::{DeviceBus, Devices, HostClock, Io, Stimulus};
use crate::isa::{IrqGate, Machine, StepOutcome, TrapCause};
use crate::par::Exec;
use crate::trace::{
    serialize_state_into, write_checkpoint, Checkpoint, Digest, Event, EventKind, TraceError, TraceHeader,
    TraceWriter, FORMAT_VERSION, HASH_ALGORITHM, ISA_VERSION,
};

use super::{shared, EngineError, ExitReason, NthTracker, PreStep, RecordOptions, RunSummary, POLL_EVERY};

/// Result of a recording.
#[derive(Debug)]
pub struct RecordOutcome {
    pub summary: RunSummary,
    pub header: TraceHeader,
    /// Final guest state.
    pub machine: Machine,
    pub devices: Devices,
}

/// Result of plain emulation.
#[derive(Debug)]
pub struct PlainOutcome {
    pub exit_reason: ExitReason,
    pub machine: Machine,
    pub devices: Devices,
    pub wall_time_ms: u64,
}

enum Msg {
    Events(Vec<Event>),
    Hash {
        seq: u64,
        icount: u64,
        rx: Receiver<Result<Digest, TraceError>>,
    },
}

/// Events written and the digest of the last state hash.
type WriterResult = Result<(u64, Option<Digest>), TraceError>;

/// Front end of the background writer. Events go out in `seq` order; state
/// hashes are computed as jobs and the writer waits for each in turn.
struct Sink {
    tx: Option<SyncSender<Msg>>,
    writer: Option<JoinHandle<WriterResult>>,
    seq: u64,
    exec: Exec,
    path: PathBuf,
    pool: Arc<Mutex<Vec<Vec<u8>>>>,
    batch: Vec<Event>,
}

/// Events handed to the writer thread at once.
const EVENT_BATCH: usize = 256;

impl Sink {
    fn start(mut w: TraceWriter, exec: Exec) -> Sink {
        let path = w.path().to_path_buf();
        let (tx, rx) = mpsc::sync_channel::<Msg>(64);
        let writer = std::thread::Builder::new()
            .name("ervm-log-writer".into())
            .spawn(move || {
                let mut last = None;
                for msg in rx {
                    match msg {
                        Msg::Events(evs) => {
                            for e in evs {
                                w.append(e)?;
                            }
                        }
                        Msg::Hash { seq, icount, rx } => {
                            let hash = rx.recv().expect("hash job dropped its result")?;
                            last = Some(hash);
                            w.append(Event {
                                seq,
                                icount,
                                kind: EventKind::StateHash { hash },
                            })?;
                        }
                    }
                }
                Ok((w.finish()?, last))
            })
            .expect("spawn log writer");
        Sink {
            tx: Some(tx),
            writer: Some(writer),
            seq: 0,
            exec,
            path,
            pool: Arc::default(),
            batch: Vec::with_capacity(EVENT_BATCH),
        }
    }

    /// `false` once the writer has stopped; [`Sink::finish`] reports why.
    fn event(&mut self, kind: EventKind, icount: u64) -> bool {
        let seq = self.seq;
        self.seq += 1;
        self.batch.push(Event { seq, icount, kind });
        self.batch.len() < EVENT_BATCH || self.flush()
    }

    fn flush(&mut self) -> bool {
        if self.batch.is_empty() {
            return true;
        }
        let evs = std::mem::replace(&mut self.batch, Vec::with_capacity(EVENT_BATCH));
        self.send(Msg::Events(evs))
    }

    fn hash(&mut self, m: &Machine, icount: u64, dev: &Devices, checkpoint: Option<&Counter>) -> bool {
        // Recycled buffers: a fresh 1 MiB allocation costs more in page
        // faults than the copy itself.
        let mut state = self.pool.lock().unwrap().pop().unwrap_or_default();
        serialize_state_into(&mut state, m, icount, dev);
        let seq = self.seq;
        self.seq += 1;
        let ckpt = checkpoint.map(|c| (m.retired, c.state().raw, c.state().mode_switch_snapshot));
        let path = self.path.clone();
        let pool = Arc::clone(&self.pool);
        if !self.flush() {
            return false;
        }
        let rx = self.exec.spawn(move || {
            let state_hash = Digest::of(&state);
            let res = match ckpt {
                Some((retired, counter_raw, counter_snapshot)) => {
                    let c = Checkpoint {
                        icount: retired,
                        log_cursor: seq + 1,
                        counter_raw,
                        counter_snapshot,
                        state,
                        state_hash,
                    };
                    let res = write_checkpoint(&path, &c);
                    state = c.state;
                    res
                }
                None => Ok(()),
            };
            pool.lock().unwrap().push(state);
            res.map(|()| state_hash)
        });
        self.send(Msg::Hash { seq, icount, rx })
    }

    fn send(&mut self, msg: Msg) -> bool {
        self.tx.as_ref().is_some_and(|tx| tx.send(msg).is_ok())
    }

    fn finish(mut self) -> Result<(u64, Option<Digest>), TraceError> {
        self.flush();
        drop(self.tx.take());
        self.writer
            .take()
            .expect("writer joined once")
            .join()
            .expect("log writer panicked")
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Run the guest live, logging every nondeterministic event to `out`.
pub fn record(
    kernel: &[u8],
    disk: &[u8],
    mut stimulus: Stimulus,
    clock: &mut dyn HostClock,
    out: &Path,
    opts: &RecordOptions,
) -> Result<RecordOutcome, EngineError> {
    let config = opts.config;
    config.validate()?;
    if !config.profile.is_compensable() && !opts.allow_unusable_counter {
        return Err(CounterError::UnusableCounter.into());
    }
    assert!(opts.checkpoint_interval > 0, "checkpoint interval must be positive");
    let started = Instant::now();
    let mut m = Machine::reset(kernel, opts.mem_size)?;
    let mut dev = Devices::new(shared(disk));
    let mut counter = Counter::new(config);
    let header = TraceHeader {
        format_version: FORMAT_VERSION,
        isa_version: ISA_VERSION,
        hash_algorithm: HASH_ALGORITHM.into(),
        mem_size: opts.mem_size as u64,
        kernel_image_hash: Digest::of(kernel),
        disk_image_hash: Digest::of(disk),
        counter_config: config,
        checkpoint_interval: opts.checkpoint_interval,
        max_instructions: opts.max_instructions,
        created_at: unix_now(),
    };
    for stale in crate::trace::list_checkpoints(out)? {
        let p = crate::trace::checkpoint_path(out, stale);
        std::fs::remove_file(&p).map_err(TraceError::io(p))?;
    }
    let mut sink = Sink::start(TraceWriter::create(out, &header)?, opts.exec);

    let mut tracker = NthTracker::default();
    let mut next_ckpt = opts.checkpoint_interval;
    let mut now_ms = 0;
    let mut until_poll = 0u64;
    let exit_reason;
    loop {
        let ts = counter.timestamp();
        if m.halted || m.retired >= opts.max_instructions {
            exit_reason = if m.halted { ExitReason::Halted } else { ExitReason::Limit };
            let kind = if m.halted { EventKind::Halt } else { EventKind::Limit };
            let _ = sink.hash(&m, ts, &dev, None) && sink.event(kind, ts);
            break;
        }
        if until_poll == 0 {
            until_poll = POLL_EVERY;
            now_ms = clock.now_ms(m.retired);
            m.pending_irqs |= dev.poll(now_ms, &mut stimulus)?;
        }
        until_poll -= 1;
        if m.retired == next_ckpt {
            next_ckpt += opts.checkpoint_interval;
            tracker.reset();
            if !sink.hash(&m, ts, &dev, Some(&counter)) {
                exit_reason = ExitReason::Halted;
                break;
            }
        }
        if m.status.ie {
            let nth = tracker.observe(ts);
            if let Some(line) = m.deliverable_irq() {
                tracker.reset();
                if !sink.event(EventKind::IrqDelivery { line, nth }, ts) {
                    exit_reason = ExitReason::Halted;
                    break;
                }
                let pre = PreStep::of(&m);
                m.pending_irqs &= !(1 << line);
                m.deliver_interrupt(TrapCause::irq(line));
                pre.account(&m, &mut counter);
                continue;
            }
        }
        let pre = PreStep::of(&m);
        let mut bus = DeviceBus::new(&mut dev, Io::Record { now_ms, icount: ts });
        m.step(&mut bus, IrqGate::Closed);
        let logged = bus.logged;
        pre.account(&m, &mut counter);
        if let Some((icount, kind)) = logged {
            tracker.reset();
            if !sink.event(kind, icount) {
                exit_reason = ExitReason::Halted;
                break;
            }
            continue;
        }
        if !fast_forward(&mut m, &mut dev, &mut counter, &mut tracker, &mut until_poll, now_ms, next_ckpt.min(opts.max_instructions))
            .is_none_or(|(kind, icount)| sink.event(kind, icount))
        {
            exit_reason = ExitReason::Halted;
            break;
        }
    }
    let (event_count, last_hash) = sink.finish()?;
    let summary = RunSummary {
        final_icount: counter.timestamp(),
        final_retired: m.retired,
        exit_reason,
        final_state_hash: last_hash.expect("a final state hash is always logged"),
        event_count,
        wall_time_ms: started.elapsed().as_millis() as u64,
        divergence: None,
    };
    Ok(RecordOutcome {
        summary,
        header,
        machine: m,
        devices: dev,
    })
}

/// Continue stepping while nothing the per-boundary schedule checks can
/// change: no poll due, below `stop_at` retired, and mode, MARK, `ie` and
/// pending interrupts as they are now (so no interrupt becomes deliverable).
/// Returns the event a device read produced, if that is what stopped it.
///
/// The counter is advanced in bulk, so this only runs for counters without
/// per-retire side effects.
#[inline]
fn fast_forward(
    m: &mut Machine,
    dev: &mut Devices,
    counter: &mut Counter,
    tracker: &mut NthTracker,
    until_poll: &mut u64,
    now_ms: u64,
    stop_at: u64,
) -> Option<(EventKind, u64)> {
    if m.halted || m.deliverable_irq().is_some() || !counter.is_plain() {
        return None;
    }
    let (mark, ie, switches) = (m.marked(), m.status.ie, m.mode_switches);
    let admitted = counter.config().admits(m.mode(), mark) as u64;
    let start = counter.timestamp();
    let retired_at_start = m.retired;
    // Every step but the last retires exactly one instruction (anything else
    // traps, halts or switches mode and ends the run), so the count before
    // step `i` is `start + i * admitted`. The bus is built once; a logged
    // read is restamped with the count before the step that made it.
    let budget = (*until_poll).min(stop_at.saturating_sub(m.retired));
    let mut bus = DeviceBus::new(dev, Io::Record { now_ms, icount: start });
    let mut steps = 0;
    while steps < budget {
        steps += 1;
        let out = m.step(&mut bus, IrqGate::Closed);
        if out != StepOutcome::Retired
            || bus.logged.is_some()
            || m.mode_switches != switches
            || m.status.ie != ie
            || m.marked() != mark
        {
            break;
        }
    }
    let logged = bus.logged;
    *until_poll -= steps;
    if ie && steps > 0 {
        tracker.observe_run(start, steps, admitted);
    }
    counter.add_admitted((m.retired - retired_at_start) * admitted);
    for _ in switches..m.mode_switches {
        counter.on_mode_switch(mark);
    }
    logged.map(|(_, kind)| {
        tracker.reset();
        (kind, start + (steps - 1) * admitted)
    })
}

/// The same guest under the same host inputs with no counter, log or
/// checkpoints. The baseline record overhead is measured against.
pub fn run_plain(
    kernel: &[u8],
    disk: &[u8],
    mut stimulus: Stimulus,
    clock: &mut dyn HostClock,
    max_instructions: u64,
    mem_size: usize,
) -> Result<PlainOutcome, EngineError> {
    let started = Instant::now();
    let mut m = Machine::reset(kernel, mem_size)?;
    let mut dev = Devices::new(shared(disk));
    let mut now_ms = 0;
    let mut until_poll = 0u64;
    while !m.halted && m.retired < max_instructions {
        if until_poll == 0 {
            until_poll = POLL_EVERY;
            now_ms = clock.now_ms(m.retired);
            m.pending_irqs |= dev.poll(now_ms, &mut stimulus)?;
        }
        until_poll -= 1;
        let mut bus = DeviceBus::new(&mut dev, Io::Live { now_ms });
        m.step(&mut bus, IrqGate::Open);
    }
    Ok(PlainOutcome {
        exit_reason: if m.halted { ExitReason::Halted } else { ExitReason::Limit },
        machine: m,
        devices: dev,
        wall_time_ms: started.elapsed().as_millis() as u64,
    })
}
