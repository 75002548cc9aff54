//! The guest CPU: a 32-bit, word-aligned RISC with two privilege modes,
//! vectored traps and a memory-mapped I/O window.
//!
//! Everything here is a pure function of [`Machine`] plus whatever the [`Bus`]
//! returns for MMIO loads, so two machines in the same state that see the same
//! bus values step identically.

use std::fmt;

use thiserror::Error;

pub const DEFAULT_MEM_SIZE: usize = 1 << 20;

pub const MMIO_BASE: u32 = 0xF000_0000;
pub const MMIO_SIZE: u32 = 0x1000;

/// Number of external interrupt lines.
pub const IRQ_LINES: u32 = 16;

pub const CSR_STATUS: u16 = 0;
pub const CSR_IVEC: u16 = 1;
pub const CSR_EPC: u16 = 2;
pub const CSR_ESTATUS: u16 = 3;
pub const CSR_CAUSE: u16 = 4;
pub const CSR_MARK: u16 = 5;

const STATUS_IE: u32 = 1 << 0;
const STATUS_SUPERVISOR: u32 = 1 << 1;

#[inline]
pub fn is_mmio(addr: u32) -> bool {
    addr & !(MMIO_SIZE - 1) == MMIO_BASE
}

/// Trap cause codes. `0..16` are the asynchronous IRQ lines; the rest are
/// raised synchronously by instruction semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrapCause(pub u32);

impl TrapCause {
    pub const ECALL: TrapCause = TrapCause(32);
    pub const ILLEGAL: TrapCause = TrapCause(33);
    pub const MEM_FAULT: TrapCause = TrapCause(34);
    pub const PRIVILEGE: TrapCause = TrapCause(35);

    pub fn irq(line: u32) -> TrapCause {
        debug_assert!(line < IRQ_LINES);
        TrapCause(line)
    }

    pub fn is_async(self) -> bool {
        self.0 < IRQ_LINES
    }
}

impl fmt::Display for TrapCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TrapCause::ECALL => f.write_str("ecall"),
            TrapCause::ILLEGAL => f.write_str("illegal instruction"),
            TrapCause::MEM_FAULT => f.write_str("memory fault"),
            TrapCause::PRIVILEGE => f.write_str("privilege violation"),
            TrapCause(line) => write!(f, "irq {line}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Halt,
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Addi,
    Lui,
    Ld,
    St,
    Beq,
    Bne,
    Blt,
    Jal,
    Jalr,
    Ecall,
    Eret,
    Csrr,
    Csrw,
    /// Any byte not in the table. Decodes fine, traps when executed.
    Illegal(u8),
}

/// How the bits of a word are laid out for a given opcode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// No operands.
    None,
    /// `rd, rs1, rs2`
    R,
    /// `rd, rs1, simm16`
    I,
    /// `rd, uimm16`
    U,
    /// `rs1, rs2, simm16` with the registers in the rd/rs1 slots.
    B,
    /// `rd, simm16`
    J,
    /// `rd, csr`
    CsrRead,
    /// `csr, rs1`
    CsrWrite,
}

impl Opcode {
    pub const ALL: [Opcode; 21] = [
        Opcode::Halt,
        Opcode::Add,
        Opcode::Sub,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Shl,
        Opcode::Shr,
        Opcode::Addi,
        Opcode::Lui,
        Opcode::Ld,
        Opcode::St,
        Opcode::Beq,
        Opcode::Bne,
        Opcode::Blt,
        Opcode::Jal,
        Opcode::Jalr,
        Opcode::Ecall,
        Opcode::Eret,
        Opcode::Csrr,
        Opcode::Csrw,
    ];

    pub fn from_byte(b: u8) -> Opcode {
        match b {
            0x00 => Opcode::Halt,
            0x01 => Opcode::Add,
            0x02 => Opcode::Sub,
            0x03 => Opcode::And,
            0x04 => Opcode::Or,
            0x05 => Opcode::Xor,
            0x06 => Opcode::Shl,
            0x07 => Opcode::Shr,
            0x10 => Opcode::Addi,
            0x11 => Opcode::Lui,
            0x20 => Opcode::Ld,
            0x21 => Opcode::St,
            0x30 => Opcode::Beq,
            0x31 => Opcode::Bne,
            0x32 => Opcode::Blt,
            0x40 => Opcode::Jal,
            0x41 => Opcode::Jalr,
            0x50 => Opcode::Ecall,
            0x51 => Opcode::Eret,
            0x60 => Opcode::Csrr,
            0x61 => Opcode::Csrw,
            other => Opcode::Illegal(other),
        }
    }

    pub fn byte(self) -> u8 {
        match self {
            Opcode::Halt => 0x00,
            Opcode::Add => 0x01,
            Opcode::Sub => 0x02,
            Opcode::And => 0x03,
            Opcode::Or => 0x04,
            Opcode::Xor => 0x05,
            Opcode::Shl => 0x06,
            Opcode::Shr => 0x07,
            Opcode::Addi => 0x10,
            Opcode::Lui => 0x11,
            Opcode::Ld => 0x20,
            Opcode::St => 0x21,
            Opcode::Beq => 0x30,
            Opcode::Bne => 0x31,
            Opcode::Blt => 0x32,
            Opcode::Jal => 0x40,
            Opcode::Jalr => 0x41,
            Opcode::Ecall => 0x50,
            Opcode::Eret => 0x51,
            Opcode::Csrr => 0x60,
            Opcode::Csrw => 0x61,
            Opcode::Illegal(b) => b,
        }
    }

    pub fn format(self) -> Format {
        use Opcode::*;
        match self {
            Halt | Ecall | Eret | Illegal(_) => Format::None,
            Add | Sub | And | Or | Xor | Shl | Shr => Format::R,
            Addi | Ld | St | Jalr => Format::I,
            Lui => Format::U,
            Beq | Bne | Blt => Format::B,
            Jal => Format::J,
            Csrr => Format::CsrRead,
            Csrw => Format::CsrWrite,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        use Opcode::*;
        match self {
            Halt => "HALT",
            Add => "ADD",
            Sub => "SUB",
            And => "AND",
            Or => "OR",
            Xor => "XOR",
            Shl => "SHL",
            Shr => "SHR",
            Addi => "ADDI",
            Lui => "LUI",
            Ld => "LD",
            St => "ST",
            Beq => "BEQ",
            Bne => "BNE",
            Blt => "BLT",
            Jal => "JAL",
            Jalr => "JALR",
            Ecall => "ECALL",
            Eret => "ERET",
            Csrr => "CSRR",
            Csrw => "CSRW",
            Illegal(_) => "ILLEGAL",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Opcode::ALL
            .iter()
            .copied()
            .find(|op| op.mnemonic().eq_ignore_ascii_case(s))
    }

    fn imm_is_signed(self) -> bool {
        matches!(self.format(), Format::I | Format::B | Format::J)
    }
}

/// A decoded instruction. Fields an opcode's format does not use are zero.
///
/// Immediates are held sign-extended for signed formats (`I`, `B`, `J`) and
/// zero-extended for `LUI` and the CSR forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub op: Opcode,
    pub rd: u8,
    pub rs1: u8,
    pub rs2: u8,
    pub imm: i32,
}

impl Instruction {
    pub const HALT: Instruction = Instruction {
        op: Opcode::Halt,
        rd: 0,
        rs1: 0,
        rs2: 0,
        imm: 0,
    };

    pub fn r(op: Opcode, rd: u8, rs1: u8, rs2: u8) -> Self {
        Instruction { op, rd, rs1, rs2, imm: 0 }
    }

    pub fn i(op: Opcode, rd: u8, rs1: u8, imm: i32) -> Self {
        Instruction { op, rd, rs1, rs2: 0, imm }
    }

    pub fn branch(op: Opcode, rs1: u8, rs2: u8, offset: i32) -> Self {
        Instruction { op, rd: 0, rs1, rs2, imm: offset }
    }

    pub fn bare(op: Opcode) -> Self {
        Instruction { op, rd: 0, rs1: 0, rs2: 0, imm: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("register index {0} out of range (0..=15)")]
    Register(u8),
    #[error("immediate {value} out of range for {op} ({min}..={max})")]
    Immediate {
        op: &'static str,
        value: i64,
        min: i64,
        max: i64,
    },
}

pub fn decode(word: u32) -> Instruction {
    let op = Opcode::from_byte((word >> 24) as u8);
    let a = ((word >> 20) & 0xF) as u8;
    let b = ((word >> 16) & 0xF) as u8;
    let c = ((word >> 12) & 0xF) as u8;
    let uimm = word & 0xFFFF;
    let simm = uimm as u16 as i16 as i32;
    let mut ins = Instruction::bare(op);
    match op.format() {
        Format::None => {}
        Format::R => {
            ins.rd = a;
            ins.rs1 = b;
            ins.rs2 = c;
        }
        Format::I => {
            ins.rd = a;
            ins.rs1 = b;
            ins.imm = simm;
        }
        Format::U | Format::CsrRead => {
            ins.rd = a;
            ins.imm = uimm as i32;
        }
        Format::B => {
            ins.rs1 = a;
            ins.rs2 = b;
            ins.imm = simm;
        }
        Format::J => {
            ins.rd = a;
            ins.imm = simm;
        }
        Format::CsrWrite => {
            ins.rs1 = b;
            ins.imm = uimm as i32;
        }
    }
    ins
}

pub fn encode(ins: &Instruction) -> Result<u32, EncodeError> {
    for r in [ins.rd, ins.rs1, ins.rs2] {
        if r > 15 {
            return Err(EncodeError::Register(r));
        }
    }
    let (min, max) = if ins.op.imm_is_signed() {
        (i16::MIN as i64, i16::MAX as i64)
    } else {
        (0, u16::MAX as i64)
    };
    let imm = ins.imm as i64;
    if ins.op.format() != Format::None && ins.op.format() != Format::R && !(min..=max).contains(&imm)
    {
        return Err(EncodeError::Immediate {
            op: ins.op.mnemonic(),
            value: imm,
            min,
            max,
        });
    }
    let op = (ins.op.byte() as u32) << 24;
    let imm16 = (ins.imm as u32) & 0xFFFF;
    let (rd, rs1, rs2) = (ins.rd as u32, ins.rs1 as u32, ins.rs2 as u32);
    Ok(match ins.op.format() {
        Format::None => op,
        Format::R => op | rd << 20 | rs1 << 16 | rs2 << 12,
        Format::I => op | rd << 20 | rs1 << 16 | imm16,
        Format::U | Format::CsrRead | Format::J => op | rd << 20 | imm16,
        Format::B => op | rs1 << 20 | rs2 << 16 | imm16,
        Format::CsrWrite => op | rs1 << 16 | imm16,
    })
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.op.mnemonic();
        match self.op.format() {
            Format::None => match self.op {
                Opcode::Illegal(b) => write!(f, ".word 0x{:08x}", (b as u32) << 24),
                _ => f.write_str(m),
            },
            Format::R => write!(f, "{m} r{}, r{}, r{}", self.rd, self.rs1, self.rs2),
            Format::I if matches!(self.op, Opcode::Ld | Opcode::St) => {
                write!(f, "{m} r{}, {}(r{})", self.rd, self.imm, self.rs1)
            }
            Format::I => write!(f, "{m} r{}, r{}, {}", self.rd, self.rs1, self.imm),
            Format::U => write!(f, "{m} r{}, 0x{:x}", self.rd, self.imm),
            Format::B => write!(f, "{m} r{}, r{}, {}", self.rs1, self.rs2, self.imm),
            Format::J => write!(f, "{m} r{}, {}", self.rd, self.imm),
            Format::CsrRead => write!(f, "{m} r{}, {}", self.rd, csr_name(self.imm as u16)),
            Format::CsrWrite => write!(f, "{m} {}, r{}", csr_name(self.imm as u16), self.rs1),
        }
    }
}

pub fn csr_name(idx: u16) -> String {
    match idx {
        CSR_STATUS => "STATUS".into(),
        CSR_IVEC => "IVEC".into(),
        CSR_EPC => "EPC".into(),
        CSR_ESTATUS => "ESTATUS".into(),
        CSR_CAUSE => "CAUSE".into(),
        CSR_MARK => "MARK".into(),
        other => other.to_string(),
    }
}

pub fn csr_index(name: &str) -> Option<u16> {
    match name.to_ascii_uppercase().as_str() {
        "STATUS" => Some(CSR_STATUS),
        "IVEC" => Some(CSR_IVEC),
        "EPC" => Some(CSR_EPC),
        "ESTATUS" => Some(CSR_ESTATUS),
        "CAUSE" => Some(CSR_CAUSE),
        "MARK" => Some(CSR_MARK),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    User,
    #[default]
    Supervisor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Status {
    pub mode: Mode,
    pub ie: bool,
}

impl Status {
    pub fn word(self) -> u32 {
        let mut w = 0;
        if self.ie {
            w |= STATUS_IE;
        }
        if self.mode == Mode::Supervisor {
            w |= STATUS_SUPERVISOR;
        }
        w
    }

    pub fn from_word(w: u32) -> Status {
        Status {
            mode: if w & STATUS_SUPERVISOR != 0 {
                Mode::Supervisor
            } else {
                Mode::User
            },
            ie: w & STATUS_IE != 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Csrs {
    pub ivec: u32,
    pub epc: u32,
    pub estatus: u32,
    pub cause: u32,
    pub mark: u32,
}

/// Memory-mapped I/O target for loads and stores that hit the MMIO window.
pub trait Bus {
    fn read(&mut self, addr: u32) -> u32;
    /// `mem` is guest memory, for devices that DMA.
    fn write(&mut self, addr: u32, value: u32, mem: &mut [u8]);
}

/// Bus with nothing attached: reads return zero, writes vanish.
#[derive(Debug, Default)]
pub struct NullBus;

impl Bus for NullBus {
    fn read(&mut self, _addr: u32) -> u32 {
        0
    }
    fn write(&mut self, _addr: u32, _value: u32, _mem: &mut [u8]) {}
}

/// Whether `step` may deliver a pending external interrupt on its own.
/// Replay keeps this closed and delivers only logged interrupts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IrqGate {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Retired,
    Trapped(TrapCause),
    Halted,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("kernel image of {image} bytes does not fit in {mem} bytes of memory")]
pub struct ResetError {
    pub image: usize,
    pub mem: usize,
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Machine {
    /// `regs[0]` is always zero.
    pub regs: [u32; 16],
    pub pc: u32,
    pub status: Status,
    pub csrs: Csrs,
    pub mem: Vec<u8>,
    pub pending_irqs: u16,
    pub halted: bool,
    /// Ground-truth count of completed instructions.
    pub retired: u64,
    /// User<->supervisor transitions in either direction.
    pub mode_switches: u64,
}

impl fmt::Debug for Machine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Machine")
            .field("regs", &self.regs)
            .field("pc", &format_args!("{:#x}", self.pc))
            .field("status", &self.status)
            .field("csrs", &self.csrs)
            .field("mem_size", &self.mem.len())
            .field("pending_irqs", &self.pending_irqs)
            .field("halted", &self.halted)
            .field("retired", &self.retired)
            .field("mode_switches", &self.mode_switches)
            .finish()
    }
}

impl Machine {
    pub fn reset(kernel_image: &[u8], mem_size: usize) -> Result<Machine, ResetError> {
        if kernel_image.len() > mem_size {
            return Err(ResetError {
                image: kernel_image.len(),
                mem: mem_size,
            });
        }
        let mut mem = vec![0u8; mem_size];
        mem[..kernel_image.len()].copy_from_slice(kernel_image);
        Ok(Machine {
            regs: [0; 16],
            pc: 0,
            status: Status {
                mode: Mode::Supervisor,
                ie: false,
            },
            csrs: Csrs::default(),
            mem,
            pending_irqs: 0,
            halted: false,
            retired: 0,
            mode_switches: 0,
        })
    }

    #[inline]
    pub fn mode(&self) -> Mode {
        self.status.mode
    }

    #[inline]
    pub fn marked(&self) -> bool {
        self.csrs.mark != 0
    }

    pub fn raise_irq(&mut self, line: u32) {
        debug_assert!(line < IRQ_LINES);
        self.pending_irqs |= 1 << line;
    }

    /// Lowest pending line, if an interrupt could be taken right now.
    #[inline]
    pub fn deliverable_irq(&self) -> Option<u32> {
        if self.status.ie && self.pending_irqs != 0 && !self.halted {
            Some(self.pending_irqs.trailing_zeros())
        } else {
            None
        }
    }

    /// Aligned word read from RAM; `None` when outside memory or misaligned.
    #[inline]
    pub fn read_word(&self, addr: u32) -> Option<u32> {
        let a = addr as usize;
        if addr & 3 != 0 || a + 4 > self.mem.len() {
            return None;
        }
        Some(u32::from_le_bytes(self.mem[a..a + 4].try_into().unwrap()))
    }

    #[inline]
    fn write_word(&mut self, addr: u32, value: u32) -> bool {
        let a = addr as usize;
        if addr & 3 != 0 || a + 4 > self.mem.len() {
            return false;
        }
        self.mem[a..a + 4].copy_from_slice(&value.to_le_bytes());
        true
    }

    #[inline]
    fn set_reg(&mut self, r: u8, v: u32) {
        if r != 0 {
            self.regs[r as usize] = v;
        }
    }

    pub fn csr_read(&self, idx: u16) -> Option<u32> {
        Some(match idx {
            CSR_STATUS => self.status.word(),
            CSR_IVEC => self.csrs.ivec,
            CSR_EPC => self.csrs.epc,
            CSR_ESTATUS => self.csrs.estatus,
            CSR_CAUSE => self.csrs.cause,
            CSR_MARK => self.csrs.mark,
            _ => return None,
        })
    }

    fn csr_write(&mut self, idx: u16, v: u32) -> bool {
        match idx {
            // Mode changes only through trap entry and ERET.
            CSR_STATUS => self.status.ie = v & STATUS_IE != 0,
            CSR_IVEC => self.csrs.ivec = v,
            CSR_EPC => self.csrs.epc = v,
            CSR_ESTATUS => self.csrs.estatus = v,
            CSR_CAUSE => self.csrs.cause = v,
            CSR_MARK => self.csrs.mark = v,
            _ => return false,
        }
        true
    }

    /// Vector to the trap handler. Does not retire anything.
    pub fn deliver_interrupt(&mut self, cause: TrapCause) {
        debug_assert!(!cause.is_async() || self.status.ie);
        if self.status.mode == Mode::User {
            self.mode_switches += 1;
        }
        self.csrs.epc = self.pc;
        self.csrs.estatus = self.status.word();
        self.csrs.cause = cause.0;
        self.status = Status {
            mode: Mode::Supervisor,
            ie: false,
        };
        self.pc = self.csrs.ivec;
    }

    fn eret(&mut self) {
        let restored = Status::from_word(self.csrs.estatus);
        if restored.mode == Mode::User && self.status.mode == Mode::Supervisor {
            self.mode_switches += 1;
        }
        self.status = restored;
        self.pc = self.csrs.epc;
    }

    fn trap(&mut self, cause: TrapCause) -> StepOutcome {
        self.deliver_interrupt(cause);
        StepOutcome::Trapped(cause)
    }

    /// Take one step: deliver the lowest pending interrupt if the gate and
    /// `ie` allow it, otherwise execute one instruction.
    pub fn step<B: Bus>(&mut self, bus: &mut B, gate: IrqGate) -> StepOutcome {
        debug_assert!(!self.halted, "step on a halted machine");
        if gate == IrqGate::Open {
            if let Some(line) = self.deliverable_irq() {
                self.pending_irqs &= !(1 << line);
                return self.trap(TrapCause::irq(line));
            }
        }
        self.execute(bus)
    }

    fn execute<B: Bus>(&mut self, bus: &mut B) -> StepOutcome {
        let pc = self.pc;
        let word = match self.read_word(pc) {
            Some(w) => w,
            None => return self.trap(TrapCause::MEM_FAULT),
        };
        let ins = decode(word);
        let user = self.status.mode == Mode::User;
        let rs1 = self.regs[ins.rs1 as usize];
        let rs2 = self.regs[ins.rs2 as usize];
        let next = pc.wrapping_add(4);
        let mut new_pc = next;

        match ins.op {
            Opcode::Halt => {
                self.retired += 1;
                self.halted = true;
                return StepOutcome::Halted;
            }
            Opcode::Add => self.set_reg(ins.rd, rs1.wrapping_add(rs2)),
            Opcode::Sub => self.set_reg(ins.rd, rs1.wrapping_sub(rs2)),
            Opcode::And => self.set_reg(ins.rd, rs1 & rs2),
            Opcode::Or => self.set_reg(ins.rd, rs1 | rs2),
            Opcode::Xor => self.set_reg(ins.rd, rs1 ^ rs2),
            Opcode::Shl => self.set_reg(ins.rd, rs1.wrapping_shl(rs2 & 31)),
            Opcode::Shr => self.set_reg(ins.rd, rs1.wrapping_shr(rs2 & 31)),
            Opcode::Addi => self.set_reg(ins.rd, rs1.wrapping_add(ins.imm as u32)),
            Opcode::Lui => self.set_reg(ins.rd, (ins.imm as u32) << 16),
            Opcode::Ld => {
                let addr = rs1.wrapping_add(ins.imm as u32);
                let v = if is_mmio(addr) && addr & 3 == 0 {
                    bus.read(addr)
                } else {
                    match self.read_word(addr) {
                        Some(v) => v,
                        None => return self.trap(TrapCause::MEM_FAULT),
                    }
                };
                self.set_reg(ins.rd, v);
            }
            Opcode::St => {
                let addr = rs1.wrapping_add(ins.imm as u32);
                let v = self.regs[ins.rd as usize];
                if is_mmio(addr) && addr & 3 == 0 {
                    bus.write(addr, v, &mut self.mem);
                } else if !self.write_word(addr, v) {
                    return self.trap(TrapCause::MEM_FAULT);
                }
            }
            Opcode::Beq | Opcode::Bne | Opcode::Blt => {
                // Branch registers live in the rd/rs1 slots.
                let a = self.regs[ins.rs1 as usize];
                let b = self.regs[ins.rs2 as usize];
                let taken = match ins.op {
                    Opcode::Beq => a == b,
                    Opcode::Bne => a != b,
                    _ => (a as i32) < (b as i32),
                };
                if taken {
                    new_pc = next.wrapping_add((ins.imm as u32).wrapping_mul(4));
                }
            }
            Opcode::Jal => {
                self.set_reg(ins.rd, next);
                new_pc = next.wrapping_add((ins.imm as u32).wrapping_mul(4));
            }
            Opcode::Jalr => {
                let target = rs1.wrapping_add(ins.imm as u32);
                self.set_reg(ins.rd, next);
                new_pc = target;
            }
            Opcode::Ecall => {
                // ECALL completes, then traps with EPC at the return point.
                self.retired += 1;
                self.pc = next;
                return self.trap(TrapCause::ECALL);
            }
            Opcode::Eret => {
                if user {
                    return self.trap(TrapCause::PRIVILEGE);
                }
                self.eret();
                self.retired += 1;
                return StepOutcome::Retired;
            }
            Opcode::Csrr => {
                if user {
                    return self.trap(TrapCause::PRIVILEGE);
                }
                match self.csr_read(ins.imm as u16) {
                    Some(v) => self.set_reg(ins.rd, v),
                    None => return self.trap(TrapCause::ILLEGAL),
                }
            }
            Opcode::Csrw => {
                if user {
                    return self.trap(TrapCause::PRIVILEGE);
                }
                if !self.csr_write(ins.imm as u16, rs1) {
                    return self.trap(TrapCause::ILLEGAL);
                }
            }
            Opcode::Illegal(_) => return self.trap(TrapCause::ILLEGAL),
        }
        self.pc = new_pc;
        self.retired += 1;
        StepOutcome::Retired
    }
}
