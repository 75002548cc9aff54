//! Canonical byte serialization of the replayed state.
//!
//! Layout, all integers little-endian:
//!
//! | field                                        | size            |
//! |----------------------------------------------|-----------------|
//! | r0..r15                                      | 16 x u32        |
//! | pc                                           | u32             |
//! | status word                                  | u32             |
//! | CSRs 0..5                                    | 6 x u32         |
//! | halted                                       | u32             |
//! | retired, mode_switches                       | 2 x u64         |
//! | memory length, memory bytes                  | u64 + len       |
//! | corrected counter value                      | u64             |
//! | disk sector, buffer, status registers        | 3 x u32         |
//! | overlay count, then (sector u32, 512 bytes)  | u32 + n x 516   |
//!
//! Host-side state that has not yet crossed into the guest (pending IRQ
//! latches, queued console bytes, the host timer deadline) is left out, as are
//! the counter's raw registers: replay never has the first group, and the
//! second depends on the counter profile while the corrected value does not.

use std::sync::Arc;

use crate::counter::Counter;
use crate::devices::{Devices, SECTOR_SIZE};
use crate::isa::{Csrs, Machine, Status};

use super::Digest;

pub fn serialize_state(machine: &Machine, counter: &Counter, devices: &Devices) -> Vec<u8> {
    let mut out = Vec::with_capacity(machine.mem.len() + 256);
    serialize_state_into(&mut out, machine, counter.timestamp(), devices);
    out
}

/// Like [`serialize_state`] but reuses `out` and takes the counter value
/// directly.
pub fn serialize_state_into(out: &mut Vec<u8>, machine: &Machine, counter_value: u64, devices: &Devices) {
    out.clear();
    for r in machine.regs {
        out.extend_from_slice(&r.to_le_bytes());
    }
    out.extend_from_slice(&machine.pc.to_le_bytes());
    out.extend_from_slice(&machine.status.word().to_le_bytes());
    for i in 0..6 {
        out.extend_from_slice(&machine.csr_read(i).unwrap().to_le_bytes());
    }
    out.extend_from_slice(&(machine.halted as u32).to_le_bytes());
    out.extend_from_slice(&machine.retired.to_le_bytes());
    out.extend_from_slice(&machine.mode_switches.to_le_bytes());
    out.extend_from_slice(&(machine.mem.len() as u64).to_le_bytes());
    out.extend_from_slice(&machine.mem);
    out.extend_from_slice(&counter_value.to_le_bytes());
    let disk = &devices.disk;
    for r in [disk.sector_reg, disk.buf_reg, disk.status_reg] {
        out.extend_from_slice(&r.to_le_bytes());
    }
    out.extend_from_slice(&(disk.overlay.len() as u32).to_le_bytes());
    for (idx, data) in &disk.overlay {
        out.extend_from_slice(&idx.to_le_bytes());
        out.extend_from_slice(&data[..]);
    }
}

pub fn state_hash(machine: &Machine, counter: &Counter, devices: &Devices) -> Digest {
    Digest::of(&serialize_state(machine, counter, devices))
}

/// A parsed serialization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub machine: Machine,
    pub counter_value: u64,
    pub disk_regs: [u32; 3],
    pub overlay: Vec<(u32, Box<[u8; SECTOR_SIZE]>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.buf.len() < n {
            return Err("truncated state".into());
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }
    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Snapshot {
    pub fn parse(bytes: &[u8]) -> Result<Snapshot, String> {
        let mut r = Reader { buf: bytes };
        let mut regs = [0u32; 16];
        for reg in regs.iter_mut() {
            *reg = r.u32()?;
        }
        let pc = r.u32()?;
        let status = Status::from_word(r.u32()?);
        let _status_csr = r.u32()?;
        let csrs = Csrs {
            ivec: r.u32()?,
            epc: r.u32()?,
            estatus: r.u32()?,
            cause: r.u32()?,
            mark: r.u32()?,
        };
        let halted = r.u32()? != 0;
        let retired = r.u64()?;
        let mode_switches = r.u64()?;
        let mem_len = r.u64()? as usize;
        let mem = r.take(mem_len)?.to_vec();
        let counter_value = r.u64()?;
        let disk_regs = [r.u32()?, r.u32()?, r.u32()?];
        let n = r.u32()? as usize;
        let mut overlay = Vec::with_capacity(n);
        for _ in 0..n {
            let idx = r.u32()?;
            let mut data = Box::new([0u8; SECTOR_SIZE]);
            data.copy_from_slice(r.take(SECTOR_SIZE)?);
            overlay.push((idx, data));
        }
        if !r.buf.is_empty() {
            return Err(format!("{} trailing bytes after state", r.buf.len()));
        }
        if regs[0] != 0 {
            return Err("r0 is not zero".into());
        }
        Ok(Snapshot {
            machine: Machine {
                regs,
                pc,
                status,
                csrs,
                mem,
                pending_irqs: 0,
                halted,
                retired,
                mode_switches,
            },
            counter_value,
            disk_regs,
            overlay,
        })
    }

    /// Rebuild replay-side devices on top of `disk_image`.
    pub fn devices(&self, disk_image: Arc<[u8]>) -> Devices {
        let mut d = Devices::for_replay(disk_image);
        [d.disk.sector_reg, d.disk.buf_reg, d.disk.status_reg] = self.disk_regs;
        d.disk.overlay = self.overlay.iter().cloned().collect();
        d
    }
}
