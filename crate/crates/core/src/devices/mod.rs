//! Virtual devices: console, timer and a sector disk.
//!
//! Console and timer are the only ways nondeterminism enters the machine.
//! Reads of their registers are logged while recording and served back from
//! the log while replaying. The disk is synchronous and its base image is
//! pinned by hash, so it is part of the deterministic machine and never logged.

mod clock;
mod stimulus;

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use thiserror::Error;

use crate::engine::Divergence;
use crate::isa::Bus;
use crate::trace::EventKind;

pub use clock::{HostClock, RealClock, SimClock};
pub use stimulus::{Stimulus, StimulusEntry, StimulusScript};

pub const CONSOLE_STATUS: u32 = 0xF000_0000;
pub const CONSOLE_RX: u32 = 0xF000_0004;
pub const CONSOLE_TX: u32 = 0xF000_0008;
pub const TIMER_NOW: u32 = 0xF000_0010;
pub const TIMER_CMP: u32 = 0xF000_0014;
pub const DISK_SECTOR: u32 = 0xF000_0020;
pub const DISK_BUF: u32 = 0xF000_0024;
pub const DISK_CMD: u32 = 0xF000_0028;
pub const DISK_STATUS: u32 = 0xF000_002C;

pub const IRQ_TIMER: u32 = 0;
pub const IRQ_CONSOLE: u32 = 1;

pub const SECTOR_SIZE: usize = 512;

pub const DISK_CMD_READ: u32 = 1;
pub const DISK_CMD_WRITE: u32 = 2;
pub const DISK_STATUS_ERROR: u32 = 1;

/// Registers whose value depends on the host (keyboard, clock).
pub fn is_nondeterministic(addr: u32) -> bool {
    matches!(addr, CONSOLE_STATUS | CONSOLE_RX | TIMER_NOW)
}

pub fn register_name(addr: u32) -> Option<&'static str> {
    Some(match addr {
        CONSOLE_STATUS => "CONSOLE_STATUS",
        CONSOLE_RX => "CONSOLE_RX",
        CONSOLE_TX => "CONSOLE_TX",
        TIMER_NOW => "TIMER_NOW",
        TIMER_CMP => "TIMER_CMP",
        DISK_SECTOR => "DISK_SECTOR",
        DISK_BUF => "DISK_BUF",
        DISK_CMD => "DISK_CMD",
        DISK_STATUS => "DISK_STATUS",
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("stimulus injected during replay; replay input comes only from the log")]
    InjectInReplay,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Console {
    pub rx: VecDeque<u8>,
    pub tx: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Timer {
    /// Host-clock deadline; only ever set outside replay.
    pub deadline_ms: Option<u64>,
}

/// Copy-on-write disk: an immutable base image plus an overlay of written
/// sectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Disk {
    base: Arc<[u8]>,
    pub overlay: BTreeMap<u32, Box<[u8; SECTOR_SIZE]>>,
    pub sector_reg: u32,
    pub buf_reg: u32,
    pub status_reg: u32,
}

impl Disk {
    pub fn new(base: Arc<[u8]>) -> Self {
        Disk {
            base,
            overlay: BTreeMap::new(),
            sector_reg: 0,
            buf_reg: 0,
            status_reg: 0,
        }
    }

    pub fn base(&self) -> &[u8] {
        &self.base
    }

    pub fn sectors(&self) -> u32 {
        self.base.len().div_ceil(SECTOR_SIZE) as u32
    }

    /// Current content of a sector, overlay first. A short final base sector
    /// reads as zero-padded.
    pub fn sector(&self, idx: u32) -> Option<[u8; SECTOR_SIZE]> {
        if idx >= self.sectors() {
            return None;
        }
        if let Some(s) = self.overlay.get(&idx) {
            return Some(**s);
        }
        let mut out = [0u8; SECTOR_SIZE];
        let start = idx as usize * SECTOR_SIZE;
        let end = (start + SECTOR_SIZE).min(self.base.len());
        out[..end - start].copy_from_slice(&self.base[start..end]);
        Some(out)
    }

    fn command(&mut self, cmd: u32, mem: &mut [u8]) {
        let buf = self.buf_reg as usize;
        let in_mem = buf.checked_add(SECTOR_SIZE).is_some_and(|e| e <= mem.len());
        let ok = match cmd {
            DISK_CMD_READ if in_mem => match self.sector(self.sector_reg) {
                Some(data) => {
                    mem[buf..buf + SECTOR_SIZE].copy_from_slice(&data);
                    true
                }
                None => false,
            },
            DISK_CMD_WRITE if in_mem && self.sector_reg < self.sectors() => {
                let mut data = Box::new([0u8; SECTOR_SIZE]);
                data.copy_from_slice(&mem[buf..buf + SECTOR_SIZE]);
                self.overlay.insert(self.sector_reg, data);
                true
            }
            _ => false,
        };
        self.status_reg = if ok { 0 } else { DISK_STATUS_ERROR };
    }
}

/// How device reads are resolved for the current step.
pub enum Io<'a> {
    /// Plain emulation: live values, nothing logged.
    Live { now_ms: u64 },
    /// Live values, every nondeterministic read reported for logging.
    Record { now_ms: u64, icount: u64 },
    /// Values come from the log.
    Replay {
        icount: u64,
        source: &'a mut dyn ReadSource,
    },
}

/// Supplies logged device reads during replay.
pub trait ReadSource {
    /// Value the guest read from `addr` at `icount` in the recording, or the
    /// divergence if the log says something else happens next.
    fn next_read(&mut self, addr: u32, icount: u64) -> Result<u32, Box<Divergence>>;
}

/// Result of a guest load from the MMIO window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MmioRead {
    pub value: u32,
    /// Set in record mode when the register was nondeterministic.
    pub logged: Option<(u64, EventKind)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Devices {
    pub console: Console,
    pub timer: Timer,
    pub disk: Disk,
    replay: bool,
}

impl Devices {
    pub fn new(disk_image: Arc<[u8]>) -> Self {
        Devices {
            console: Console::default(),
            timer: Timer::default(),
            disk: Disk::new(disk_image),
            replay: false,
        }
    }

    pub fn for_replay(disk_image: Arc<[u8]>) -> Self {
        Devices {
            replay: true,
            ..Devices::new(disk_image)
        }
    }

    pub fn is_replay(&self) -> bool {
        self.replay
    }

    fn read_live(&mut self, addr: u32, now_ms: u64) -> u32 {
        match addr {
            CONSOLE_STATUS => !self.console.rx.is_empty() as u32,
            CONSOLE_RX => self.console.rx.pop_front().map_or(0, u32::from),
            TIMER_NOW => now_ms as u32,
            _ => self.read_deterministic(addr),
        }
    }

    fn read_deterministic(&self, addr: u32) -> u32 {
        match addr {
            DISK_SECTOR => self.disk.sector_reg,
            DISK_BUF => self.disk.buf_reg,
            DISK_STATUS => self.disk.status_reg,
            _ => 0,
        }
    }

    pub fn mmio_read(&mut self, addr: u32, io: &mut Io<'_>) -> Result<MmioRead, Box<Divergence>> {
        if !is_nondeterministic(addr) {
            return Ok(MmioRead {
                value: self.read_deterministic(addr),
                logged: None,
            });
        }
        match io {
            Io::Live { now_ms } => Ok(MmioRead {
                value: self.read_live(addr, *now_ms),
                logged: None,
            }),
            Io::Record { now_ms, icount } => {
                let value = self.read_live(addr, *now_ms);
                Ok(MmioRead {
                    value,
                    logged: Some((*icount, EventKind::DeviceRead { addr, value })),
                })
            }
            Io::Replay { icount, source } => Ok(MmioRead {
                value: source.next_read(addr, *icount)?,
                logged: None,
            }),
        }
    }

    pub fn mmio_write(&mut self, addr: u32, value: u32, mem: &mut [u8], io: &Io<'_>) {
        match addr {
            CONSOLE_TX => self.console.tx.push(value as u8),
            TIMER_CMP => match io {
                Io::Live { now_ms } | Io::Record { now_ms, .. } => {
                    self.timer.deadline_ms = Some(now_ms + value as u64)
                }
                // The expiry was logged as an interrupt delivery.
                Io::Replay { .. } => {}
            },
            DISK_SECTOR => self.disk.sector_reg = value,
            DISK_BUF => self.disk.buf_reg = value,
            DISK_CMD => self.disk.command(value, mem),
            _ => {}
        }
    }

    /// Queue console input and report the IRQ line to raise.
    pub fn inject_stimulus(&mut self, bytes: &[u8]) -> Result<Option<u32>, DeviceError> {
        if self.replay {
            return Err(DeviceError::InjectInReplay);
        }
        if bytes.is_empty() {
            return Ok(None);
        }
        self.console.rx.extend(bytes);
        Ok(Some(IRQ_CONSOLE))
    }

    /// Host-side housekeeping at an instruction boundary: expire the timer and
    /// feed due stimulus. Returns the mask of IRQ lines to raise.
    pub fn poll(&mut self, now_ms: u64, stimulus: &mut Stimulus) -> Result<u16, DeviceError> {
        let mut raised = 0u16;
        if self.timer.deadline_ms.is_some_and(|d| d <= now_ms) {
            self.timer.deadline_ms = None;
            raised |= 1 << IRQ_TIMER;
        }
        while let Some(bytes) = stimulus.next_due(now_ms) {
            if let Some(line) = self.inject_stimulus(&bytes)? {
                raised |= 1 << line;
            }
        }
        Ok(raised)
    }
}

/// [`Bus`] adapter that routes MMIO to [`Devices`] for one step.
pub struct DeviceBus<'d, 'io> {
    pub devices: &'d mut Devices,
    pub io: Io<'io>,
    pub logged: Option<(u64, EventKind)>,
    pub divergence: Option<Box<Divergence>>,
}

impl<'d, 'io> DeviceBus<'d, 'io> {
    pub fn new(devices: &'d mut Devices, io: Io<'io>) -> Self {
        DeviceBus {
            devices,
            io,
            logged: None,
            divergence: None,
        }
    }
}

impl Bus for DeviceBus<'_, '_> {
    fn read(&mut self, addr: u32) -> u32 {
        match self.devices.mmio_read(addr, &mut self.io) {
            Ok(r) => {
                debug_assert!(self.logged.is_none() || r.logged.is_none());
                if r.logged.is_some() {
                    self.logged = r.logged;
                }
                r.value
            }
            Err(d) => {
                self.divergence.get_or_insert(d);
                0
            }
        }
    }

    fn write(&mut self, addr: u32, value: u32, mem: &mut [u8]) {
        self.devices.mmio_write(addr, value, mem, &self.io);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Divergence, Observation};

    fn disk_with_sectors(n: usize) -> Arc<[u8]> {
        (0..n * SECTOR_SIZE)
            .map(|i| (i / SECTOR_SIZE) as u8 ^ (i as u8))
            .collect::<Vec<_>>()
            .into()
    }

    #[test]
    fn record_console_rx_is_logged() {
        let mut d = Devices::new(disk_with_sectors(1));
        d.inject_stimulus(&[0x41]).unwrap();
        let mut io = Io::Record { now_ms: 0, icount: 77 };
        let r = d.mmio_read(CONSOLE_RX, &mut io).unwrap();
        assert_eq!(r.value, 0x41);
        assert_eq!(
            r.logged,
            Some((77, EventKind::DeviceRead { addr: CONSOLE_RX, value: 0x41 }))
        );
        // empty FIFO reads 0
        assert_eq!(d.mmio_read(CONSOLE_RX, &mut io).unwrap().value, 0);
    }

    #[test]
    fn deterministic_registers_are_never_logged() {
        let mut d = Devices::new(disk_with_sectors(1));
        let mut io = Io::Record { now_ms: 0, icount: 0 };
        let r = d.mmio_read(DISK_STATUS, &mut io).unwrap();
        assert_eq!(r.logged, None);
    }

    struct OneRead(u32, u64, u32);
    impl ReadSource for OneRead {
        fn next_read(&mut self, addr: u32, icount: u64) -> Result<u32, Box<Divergence>> {
            if addr == self.0 && icount == self.1 {
                Ok(self.2)
            } else {
                Err(Box::new(Divergence {
                    at_seq: 0,
                    expected: None,
                    actual: Observation::DeviceRead { icount, addr },
                    nearest_checkpoint_icount: 0,
                }))
            }
        }
    }

    #[test]
    fn replay_reads_come_from_the_log() {
        let mut d = Devices::for_replay(disk_with_sectors(1));
        let mut src = OneRead(CONSOLE_RX, 500, 0x41);
        let mut io = Io::Replay { icount: 500, source: &mut src };
        assert_eq!(d.mmio_read(CONSOLE_RX, &mut io).unwrap().value, 0x41);
        let mut io = Io::Replay { icount: 500, source: &mut src };
        assert!(d.mmio_read(TIMER_NOW, &mut io).is_err());
    }

    #[test]
    fn tx_appends_to_sink() {
        let mut d = Devices::new(disk_with_sectors(1));
        d.mmio_write(CONSOLE_TX, 0x68, &mut [], &Io::Live { now_ms: 0 });
        assert_eq!(d.console.tx, b"h");
    }

    #[test]
    fn timer_arms_relative_and_fires_once() {
        let mut d = Devices::new(disk_with_sectors(1));
        let mut stim = Stimulus::None;
        d.mmio_write(TIMER_CMP, 10, &mut [], &Io::Live { now_ms: 5 });
        assert_eq!(d.poll(14, &mut stim).unwrap(), 0);
        assert_eq!(d.poll(15, &mut stim).unwrap(), 1 << IRQ_TIMER);
        assert_eq!(d.poll(40, &mut stim).unwrap(), 0);
    }

    #[test]
    fn timer_is_inert_in_replay() {
        let mut d = Devices::for_replay(disk_with_sectors(1));
        let mut src = OneRead(0, 0, 0);
        d.mmio_write(TIMER_CMP, 10, &mut [], &Io::Replay { icount: 0, source: &mut src });
        assert_eq!(d.timer.deadline_ms, None);
    }

    fn run_cmd(d: &mut Devices, mem: &mut [u8], sector: u32, buf: u32, cmd: u32) {
        let io = Io::Live { now_ms: 0 };
        d.mmio_write(DISK_SECTOR, sector, mem, &io);
        d.mmio_write(DISK_BUF, buf, mem, &io);
        d.mmio_write(DISK_CMD, cmd, mem, &io);
    }

    #[test]
    fn disk_read_matches_image_bytes() {
        let image = disk_with_sectors(8);
        let mut d = Devices::new(image.clone());
        let mut mem = vec![0u8; 4096];
        run_cmd(&mut d, &mut mem, 3, 0x400, DISK_CMD_READ);
        assert_eq!(d.disk.status_reg, 0);
        assert_eq!(&mem[0x400..0x600], &image[3 * 512..4 * 512]);
    }

    #[test]
    fn disk_writes_go_to_overlay() {
        let image = disk_with_sectors(8);
        let mut d = Devices::new(image.clone());
        let mut mem = vec![0u8; 4096];
        mem[0..512].fill(0xAB);
        run_cmd(&mut d, &mut mem, 3, 0, DISK_CMD_WRITE);
        run_cmd(&mut d, &mut mem, 3, 0x800, DISK_CMD_READ);
        assert!(mem[0x800..0xA00].iter().all(|&b| b == 0xAB));
        assert_eq!(d.disk.base(), &image[..]);
    }

    #[test]
    fn disk_errors_are_guest_visible() {
        let mut d = Devices::new(disk_with_sectors(2));
        let mut mem = vec![0u8; 1024];
        run_cmd(&mut d, &mut mem, 2, 0, DISK_CMD_READ);
        assert_eq!(d.disk.status_reg, DISK_STATUS_ERROR);
        run_cmd(&mut d, &mut mem, 0, 1000, DISK_CMD_READ);
        assert_eq!(d.disk.status_reg, DISK_STATUS_ERROR);
        run_cmd(&mut d, &mut mem, 0, 0, 9);
        assert_eq!(d.disk.status_reg, DISK_STATUS_ERROR);
        run_cmd(&mut d, &mut mem, 1, 0, DISK_CMD_READ);
        assert_eq!(d.disk.status_reg, 0);
    }

    #[test]
    fn inject_in_replay_is_refused() {
        let mut d = Devices::for_replay(disk_with_sectors(1));
        assert_eq!(d.inject_stimulus(b"x"), Err(DeviceError::InjectInReplay));
    }

    #[test]
    fn script_bytes_arrive_when_due() {
        let mut d = Devices::new(disk_with_sectors(1));
        let mut stim = Stimulus::Script(StimulusScript::parse("AT 10 CONSOLE 68 69\n").unwrap().cursor());
        assert_eq!(d.poll(9, &mut stim).unwrap(), 0);
        assert_eq!(d.poll(10, &mut stim).unwrap(), 1 << IRQ_CONSOLE);
        assert_eq!(d.console.rx, [0x68, 0x69]);
    }

    #[test]
    fn empty_script_raises_nothing() {
        let mut d = Devices::new(disk_with_sectors(1));
        let mut stim = Stimulus::Script(StimulusScript::default().cursor());
        assert_eq!(d.poll(1_000_000, &mut stim).unwrap(), 0);
    }
}
