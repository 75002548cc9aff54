#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ervm::counter::CounterConfig;
use ervm::devices::{SimClock, Stimulus, StimulusScript};
use ervm::engine::{record, RecordOptions, RecordOutcome};
use ervm::guest::{GuestImage, Sample};
use ervm::trace::{EventKind, TraceLog};

/// Instructions per simulated millisecond used across the tests.
pub const RATE: u64 = 4000;

pub struct Recorded {
    pub image: GuestImage,
    pub outcome: RecordOutcome,
    pub log: PathBuf,
}

impl Recorded {
    pub fn trace(&self) -> TraceLog {
        TraceLog::open(&self.log).unwrap()
    }
}

pub fn record_with(
    image: GuestImage,
    script: StimulusScript,
    clock: SimClock,
    opts: &RecordOptions,
    dir: &Path,
    name: &str,
) -> Recorded {
    let log = dir.join(format!("{name}.log"));
    let mut clock = clock;
    let outcome = record(&image.kernel, &image.disk, Stimulus::script(script), &mut clock, &log, opts).unwrap();
    Recorded { image, outcome, log }
}

pub fn record_sample(sample: Sample, phase: u64, config: CounterConfig, dir: &Path) -> Recorded {
    let opts = RecordOptions {
        config,
        ..RecordOptions::default()
    };
    record_with(
        sample.build().unwrap(),
        sample.stimulus(20),
        SimClock::new(RATE, phase),
        &opts,
        dir,
        &format!("{}-{phase}", sample.name()),
    )
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LogStats {
    pub timer_irqs: usize,
    pub console_irqs: usize,
    pub console_reads: usize,
    pub hashes: usize,
}

pub fn stats(log: &TraceLog) -> LogStats {
    let mut s = LogStats::default();
    for e in &log.events {
        match e.kind {
            EventKind::IrqDelivery { line: 0, .. } => s.timer_irqs += 1,
            EventKind::IrqDelivery { .. } => s.console_irqs += 1,
            EventKind::DeviceRead { addr, .. } if addr == ervm::devices::CONSOLE_RX => s.console_reads += 1,
            EventKind::StateHash { .. } => s.hashes += 1,
            _ => {}
        }
    }
    s
}

pub fn shared_word(m: &ervm::isa::Machine) -> u32 {
    m.read_word(ervm::guest::abi::SHARED).unwrap()
}
