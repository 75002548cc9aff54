//! Fixed memory layout shared by the guest kernel and the debugger.
//!
//! The kernel source sees every constant here as a predefined symbol; the
//! same list is published as `guest/abi.inc`.

use std::collections::BTreeMap;

use crate::devices;
use crate::isa;

pub const NUM_TASKS: u32 = 0x1000;
pub const CURRENT: u32 = 0x1004;
pub const TASK_TABLE: u32 = 0x1008;
/// Descriptor size: state, saved pc, saved r0..r15.
pub const DESC_SIZE: u32 = 18 * 4;
pub const DESC_STATE: u32 = 0;
pub const DESC_PC: u32 = 4;
pub const DESC_REGS: u32 = 8;
/// Trap entry spills r1..r15 here (r1 at +4).
pub const SAVE_AREA: u32 = 0x1300;
/// Sector 0 of the disk is read here at boot.
pub const DISK_HDR: u32 = 0x1400;
const _: () = assert!(SAVE_AREA + 16 * 4 <= DISK_HDR);
/// Word the racey sample fights over.
pub const SHARED: u32 = 0x2000;
pub const IVEC_ADDR: u32 = 0x100;
/// The kernel image must end below this address.
pub const KERNEL_LIMIT: u32 = NUM_TASKS;
pub const TASK_BASE: u32 = 0x1_0000;
pub const TASK_STRIDE: u32 = 0x4000;
/// Top of each task region kept free for the stack.
pub const STACK_RESERVE: u32 = 0x1000;
pub const MAX_TASKS: u32 = 8;
pub const TIME_SLICE_MS: u32 = 10;
pub const DISK_MAGIC: u32 = 0x4B53_4456;

pub const ST_READY: u32 = 0;
pub const ST_RUNNING: u32 = 1;
pub const ST_BLOCKED: u32 = 2;
pub const ST_EXITED: u32 = 3;

pub const SYS_YIELD: u32 = 0;
pub const SYS_PUTCHAR: u32 = 1;
pub const SYS_GETCHAR: u32 = 2;
pub const SYS_GETTIME: u32 = 3;
pub const SYS_EXIT: u32 = 4;

pub fn task_base(i: u32) -> u32 {
    TASK_BASE + i * TASK_STRIDE
}

pub fn descriptor(i: u32) -> u32 {
    TASK_TABLE + i * DESC_SIZE
}

pub fn state_name(code: u32) -> Option<&'static str> {
    Some(match code {
        ST_READY => "ready",
        ST_RUNNING => "running",
        ST_BLOCKED => "blocked",
        ST_EXITED => "exited",
        _ => return None,
    })
}

/// Every ABI constant by its assembler name, in publishing order.
pub fn constants() -> Vec<(&'static str, u32)> {
    let mmio = |a: u32| a - isa::MMIO_BASE;
    vec![
        ("NUM_TASKS", NUM_TASKS),
        ("CURRENT", CURRENT),
        ("TASK_TABLE", TASK_TABLE),
        ("DESC_SIZE", DESC_SIZE),
        ("DESC_STATE", DESC_STATE),
        ("DESC_PC", DESC_PC),
        ("DESC_REGS", DESC_REGS),
        ("SAVE_AREA", SAVE_AREA),
        ("DISK_HDR", DISK_HDR),
        ("SHARED", SHARED),
        ("IVEC_ADDR", IVEC_ADDR),
        ("TASK_BASE", TASK_BASE),
        ("TASK_STRIDE", TASK_STRIDE),
        ("MAX_TASKS", MAX_TASKS),
        ("TIME_SLICE", TIME_SLICE_MS),
        ("DISK_MAGIC", DISK_MAGIC),
        ("ST_READY", ST_READY),
        ("ST_RUNNING", ST_RUNNING),
        ("ST_BLOCKED", ST_BLOCKED),
        ("ST_EXITED", ST_EXITED),
        ("SYS_YIELD", SYS_YIELD),
        ("SYS_PUTCHAR", SYS_PUTCHAR),
        ("SYS_GETCHAR", SYS_GETCHAR),
        ("SYS_GETTIME", SYS_GETTIME),
        ("SYS_EXIT", SYS_EXIT),
        ("MMIO_HI", isa::MMIO_BASE >> 16),
        ("CONSOLE_STATUS", mmio(devices::CONSOLE_STATUS)),
        ("CONSOLE_RX", mmio(devices::CONSOLE_RX)),
        ("CONSOLE_TX", mmio(devices::CONSOLE_TX)),
        ("TIMER_NOW", mmio(devices::TIMER_NOW)),
        ("TIMER_CMP", mmio(devices::TIMER_CMP)),
        ("DISK_SECTOR", mmio(devices::DISK_SECTOR)),
        ("DISK_BUF", mmio(devices::DISK_BUF)),
        ("DISK_CMD", mmio(devices::DISK_CMD)),
        ("DISK_STATUS", mmio(devices::DISK_STATUS)),
        ("DISK_CMD_READ", devices::DISK_CMD_READ),
        ("IRQ_TIMER", devices::IRQ_TIMER),
        ("IRQ_CONSOLE", devices::IRQ_CONSOLE),
        ("CAUSE_ECALL", isa::TrapCause::ECALL.0),
    ]
}

pub fn symbols() -> BTreeMap<String, u32> {
    constants().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// `.equ` listing of [`constants`]. Device registers are offsets from the
/// MMIO base (`LUI rX, MMIO_HI`).
pub fn abi_inc() -> String {
    let mut out = String::from("; Guest ABI constants. Generated; do not edit.\n");
    for (k, v) in constants() {
        out.push_str(&format!(".equ {k}, 0x{v:x}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_fits_below_save_area() {
        assert!(descriptor(MAX_TASKS) <= SAVE_AREA);
        assert!(task_base(MAX_TASKS) as usize <= isa::DEFAULT_MEM_SIZE);
    }

    #[test]
    fn inc_assembles() {
        let p = super::super::asm::assemble(&abi_inc()).unwrap();
        assert!(p.image.is_empty());
        assert_eq!(p.symbols["DESC_SIZE"], 72);
        assert_eq!(p.symbols["CONSOLE_RX"], 4);
    }
}
