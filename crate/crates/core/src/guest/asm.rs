//! Two-pass assembler and a disassembler whose output reassembles to the
//! same bytes.
//!
//! Syntax, one statement per line:
//!
//! ```text
//! label:  MNEMONIC operands      ; comment (also `#`)
//!         .org ADDR
//!         .word EXPR, EXPR...
//!         .ascii "text\n"        ; zero-padded to a word
//!         .equ NAME, EXPR
//! ```
//!
//! Expressions are sums of numbers (`12`, `0x1f`, `0b101`, `'a'`) and
//! symbols. Branch and jump operands are absolute target addresses; the
//! assembler computes the relative word offset. `LD`/`ST` take `rd, imm(rs1)`.
//! Pseudo-instructions: `LI rd, EXPR` (always `LUI` + `ADDI`), `NOP`,
//! `MV rd, rs`, `J target`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::isa::{csr_index, decode, encode, Format, Instruction, Opcode};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct AsmError {
    pub line: usize,
    pub message: String,
}

/// One emitted statement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListingLine {
    pub addr: u32,
    pub line: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsmProgram {
    /// Address of `image[0]`.
    pub base: u32,
    pub image: Vec<u8>,
    /// Labels and `.equ` names defined by the source.
    pub symbols: BTreeMap<String, u32>,
    /// The subset of `symbols` that are code or data labels.
    pub labels: BTreeSet<String>,
    pub listing: Vec<ListingLine>,
}

impl AsmProgram {
    /// Address one past the last emitted byte.
    pub fn end(&self) -> u32 {
        self.base + self.image.len() as u32
    }

    pub fn words(&self) -> impl Iterator<Item = u32> + '_ {
        self.image
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
    }
}

pub fn assemble(src: &str) -> Result<AsmProgram, AsmError> {
    assemble_with(src, 0, &BTreeMap::new())
}

/// Assemble for loading at `base`, with `predefined` symbols visible (they
/// are not copied into the result's symbol table).
pub fn assemble_with(src: &str, base: u32, predefined: &BTreeMap<String, u32>) -> Result<AsmProgram, AsmError> {
    Assembler::new(base, predefined).run(src)
}

#[derive(Debug, Clone)]
enum Item {
    Org(String),
    Word(Vec<String>),
    Ascii(Vec<u8>),
    Equ(String, String),
    Ins(String, Vec<String>),
}

struct Stmt {
    line: usize,
    text: String,
    addr: u32,
    item: Item,
}

struct Assembler<'p> {
    base: u32,
    predefined: &'p BTreeMap<String, u32>,
    symbols: BTreeMap<String, u32>,
    labels: BTreeSet<String>,
}

fn err(line: usize, message: impl Into<String>) -> AsmError {
    AsmError {
        line,
        message: message.into(),
    }
}

impl<'p> Assembler<'p> {
    fn new(base: u32, predefined: &'p BTreeMap<String, u32>) -> Self {
        Assembler {
            base,
            predefined,
            symbols: BTreeMap::new(),
            labels: BTreeSet::new(),
        }
    }

    fn run(mut self, src: &str) -> Result<AsmProgram, AsmError> {
        let mut stmts = Vec::new();
        let mut pc = self.base as u64;
        for (i, raw) in src.lines().enumerate() {
            let line = i + 1;
            let code = strip_comment(raw);
            let (labels, rest) = split_labels(code);
            for l in labels {
                self.define(line, l, pc)?;
                self.labels.insert(l.to_string());
            }
            let rest = rest.trim();
            if rest.is_empty() {
                continue;
            }
            let item = parse_item(line, rest)?;
            let size: u64 = match &item {
                Item::Org(e) => {
                    let to = self.eval(line, e, true)?;
                    if to < pc as i64 {
                        return Err(err(line, format!(".org {to:#x} moves backwards from {pc:#x}")));
                    }
                    if to % 4 != 0 || to > u32::MAX as i64 {
                        return Err(err(line, format!(".org {to:#x} is not a word-aligned address")));
                    }
                    pc = to as u64;
                    continue;
                }
                Item::Equ(name, e) => {
                    let v = self.eval(line, e, true)?;
                    self.define(line, name, v as u32 as u64)?;
                    continue;
                }
                Item::Word(vs) => 4 * vs.len() as u64,
                Item::Ascii(bytes) => bytes.len().div_ceil(4) as u64 * 4,
                Item::Ins(m, _) => match m.as_str() {
                    "LI" => 8,
                    _ => 4,
                },
            };
            stmts.push(Stmt {
                line,
                text: rest.to_string(),
                addr: pc as u32,
                item,
            });
            pc += size;
            if pc > u32::MAX as u64 + 1 {
                return Err(err(line, "program runs past the end of the address space"));
            }
        }

        let end = stmts.last().map_or(self.base as u64, |s| {
            s.addr as u64 + self.size_of(&s.item)
        });
        let mut image = vec![0u8; (end - self.base as u64) as usize];
        let mut listing = Vec::with_capacity(stmts.len());
        for s in &stmts {
            let words = self.emit(s)?;
            let mut off = (s.addr - self.base) as usize;
            match &s.item {
                Item::Ascii(bytes) => {
                    image[off..off + bytes.len()].copy_from_slice(bytes);
                }
                _ => {
                    for w in words {
                        image[off..off + 4].copy_from_slice(&w.to_le_bytes());
                        off += 4;
                    }
                }
            }
            listing.push(ListingLine {
                addr: s.addr,
                line: s.line,
                text: s.text.clone(),
            });
        }
        Ok(AsmProgram {
            base: self.base,
            image,
            symbols: self.symbols,
            labels: self.labels,
            listing,
        })
    }

    fn size_of(&self, item: &Item) -> u64 {
        match item {
            Item::Word(vs) => 4 * vs.len() as u64,
            Item::Ascii(b) => b.len().div_ceil(4) as u64 * 4,
            Item::Ins(m, _) if m == "LI" => 8,
            Item::Ins(..) => 4,
            Item::Org(_) | Item::Equ(..) => 0,
        }
    }

    fn define(&mut self, line: usize, name: &str, value: u64) -> Result<(), AsmError> {
        if !is_ident(name) {
            return Err(err(line, format!("bad symbol name `{name}`")));
        }
        if parse_reg(name).is_some() {
            return Err(err(line, format!("`{name}` is a register name")));
        }
        if self.symbols.contains_key(name) || self.predefined.contains_key(name) {
            return Err(err(line, format!("duplicate symbol `{name}`")));
        }
        self.symbols.insert(name.to_string(), value as u32);
        Ok(())
    }

    fn lookup(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).or_else(|| self.predefined.get(name)).copied()
    }

    /// `first_pass` only changes the error wording for forward references.
    fn eval(&self, line: usize, expr: &str, first_pass: bool) -> Result<i64, AsmError> {
        let s = expr.trim();
        if s.is_empty() {
            return Err(err(line, "missing expression"));
        }
        let mut total: i64 = 0;
        let mut sign: i64 = 1;
        let mut expect_term = true;
        let bytes = s.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if expect_term {
                if c == '-' {
                    sign = -sign;
                    i += 1;
                    continue;
                }
                if c == '+' {
                    i += 1;
                    continue;
                }
                let start = i;
                let value = if c == '\'' {
                    let (v, used) = parse_char(&s[i..]).ok_or_else(|| err(line, format!("bad character literal in `{s}`")))?;
                    i += used;
                    v as i64
                } else {
                    while i < bytes.len() && !matches!(bytes[i], b'+' | b'-') && !(bytes[i] as char).is_whitespace() {
                        i += 1;
                    }
                    let tok = &s[start..i];
                    if tok.as_bytes()[0].is_ascii_digit() {
                        parse_number(tok).ok_or_else(|| err(line, format!("bad number `{tok}`")))?
                    } else if is_ident(tok) {
                        match self.lookup(tok) {
                            Some(v) => v as i64,
                            None if first_pass => {
                                return Err(err(line, format!("`{tok}` must be defined before this point")))
                            }
                            None => return Err(err(line, format!("undefined symbol `{tok}`"))),
                        }
                    } else {
                        return Err(err(line, format!("bad term `{tok}`")));
                    }
                };
                total = total
                    .checked_add(sign * value)
                    .ok_or_else(|| err(line, "expression overflows"))?;
                sign = 1;
                expect_term = false;
            } else {
                match c {
                    '+' => sign = 1,
                    '-' => sign = -1,
                    _ => return Err(err(line, format!("expected `+` or `-` in `{s}`"))),
                }
                expect_term = true;
                i += 1;
            }
        }
        if expect_term {
            return Err(err(line, format!("expression `{s}` ends with an operator")));
        }
        Ok(total)
    }

    fn emit(&self, s: &Stmt) -> Result<Vec<u32>, AsmError> {
        let line = s.line;
        match &s.item {
            Item::Word(vs) => vs
                .iter()
                .map(|e| {
                    let v = self.eval(line, e, false)?;
                    to_word(line, v)
                })
                .collect(),
            Item::Ascii(_) => Ok(Vec::new()),
            Item::Ins(m, ops) => self.emit_ins(line, s.addr, m, ops),
            Item::Org(_) | Item::Equ(..) => Ok(Vec::new()),
        }
    }

    fn emit_ins(&self, line: usize, pc: u32, m: &str, ops: &[String]) -> Result<Vec<u32>, AsmError> {
        let want = |n: usize| -> Result<(), AsmError> {
            if ops.len() != n {
                return Err(err(line, format!("{m} takes {n} operand(s), got {}", ops.len())));
            }
            Ok(())
        };
        let reg = |i: usize| -> Result<u8, AsmError> {
            parse_reg(ops[i].trim()).ok_or_else(|| err(line, format!("expected a register, got `{}`", ops[i].trim())))
        };
        let enc = |ins: Instruction| encode(&ins).map_err(|e| err(line, e.to_string()));
        let rel = |target: i64| -> Result<i32, AsmError> {
            let delta = target - (pc as i64 + 4);
            if delta % 4 != 0 {
                return Err(err(line, format!("target {target:#x} is not word-aligned")));
            }
            Ok(i32::try_from(delta / 4).unwrap_or(i32::MAX))
        };
        let csr = |i: usize| -> Result<i32, AsmError> {
            let t = ops[i].trim();
            match csr_index(t) {
                Some(c) => Ok(c as i32),
                None => Ok(self.eval(line, t, false)? as i32),
            }
        };
        match m {
            "LI" => {
                want(2)?;
                let rd = reg(0)?;
                let v = self.eval(line, &ops[1], false)?;
                let w = to_word(line, v)?;
                let lo = w as u16 as i16 as i32;
                let hi = (w.wrapping_sub(lo as u32) >> 16) as i32;
                return Ok(vec![
                    enc(Instruction::i(Opcode::Lui, rd, 0, hi))?,
                    enc(Instruction::i(Opcode::Addi, rd, rd, lo))?,
                ]);
            }
            "NOP" => {
                want(0)?;
                return Ok(vec![enc(Instruction::i(Opcode::Addi, 0, 0, 0))?]);
            }
            "MV" => {
                want(2)?;
                return Ok(vec![enc(Instruction::i(Opcode::Addi, reg(0)?, reg(1)?, 0))?]);
            }
            "J" => {
                want(1)?;
                let t = self.eval(line, &ops[0], false)?;
                return Ok(vec![enc(Instruction::i(Opcode::Jal, 0, 0, rel(t)?))?]);
            }
            _ => {}
        }
        let op = Opcode::from_mnemonic(m).ok_or_else(|| err(line, format!("unknown mnemonic `{m}`")))?;
        let ins = match op.format() {
            Format::None => {
                want(0)?;
                Instruction::bare(op)
            }
            Format::R => {
                want(3)?;
                Instruction::r(op, reg(0)?, reg(1)?, reg(2)?)
            }
            Format::I if matches!(op, Opcode::Ld | Opcode::St) => {
                want(2)?;
                let (imm, base) = split_mem(&ops[1]).ok_or_else(|| err(line, format!("expected imm(rs1), got `{}`", ops[1].trim())))?;
                let rs1 = parse_reg(base).ok_or_else(|| err(line, format!("bad base register `{base}`")))?;
                let imm = if imm.trim().is_empty() { 0 } else { self.eval(line, imm, false)? };
                Instruction::i(op, reg(0)?, rs1, clamp(imm))
            }
            Format::I => {
                want(3)?;
                let imm = self.eval(line, &ops[2], false)?;
                Instruction::i(op, reg(0)?, reg(1)?, clamp(imm))
            }
            Format::U => {
                want(2)?;
                let imm = self.eval(line, &ops[1], false)?;
                Instruction::i(op, reg(0)?, 0, clamp(imm))
            }
            Format::B => {
                want(3)?;
                let t = self.eval(line, &ops[2], false)?;
                Instruction::branch(op, reg(0)?, reg(1)?, rel(t)?)
            }
            Format::J => {
                want(2)?;
                let t = self.eval(line, &ops[1], false)?;
                Instruction::i(op, reg(0)?, 0, rel(t)?)
            }
            Format::CsrRead => {
                want(2)?;
                Instruction::i(op, reg(0)?, 0, csr(1)?)
            }
            Format::CsrWrite => {
                want(2)?;
                Instruction {
                    op,
                    rd: 0,
                    rs1: reg(1)?,
                    rs2: 0,
                    imm: csr(0)?,
                }
            }
        };
        Ok(vec![enc(ins)?])
    }
}

fn clamp(v: i64) -> i32 {
    v.clamp(i32::MIN as i64, i32::MAX as i64) as i32
}

fn to_word(line: usize, v: i64) -> Result<u32, AsmError> {
    if !(i32::MIN as i64..=u32::MAX as i64).contains(&v) {
        return Err(err(line, format!("value {v} does not fit in 32 bits")));
    }
    Ok(v as u32)
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut in_chr = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        if escaped {
            escaped = false;
            continue;
        }
        match c {
            '\\' if in_str || in_chr => escaped = true,
            '"' if !in_chr => in_str = !in_str,
            '\'' if !in_str => in_chr = !in_chr,
            ';' | '#' if !in_str && !in_chr => return &line[..i],
            _ => {}
        }
    }
    line
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn split_labels(code: &str) -> (Vec<&str>, &str) {
    let mut labels = Vec::new();
    let mut rest = code;
    loop {
        let t = rest.trim_start();
        let Some(colon) = t.find(':') else { break };
        let name = &t[..colon];
        if !is_ident(name) {
            break;
        }
        labels.push(name);
        rest = &t[colon + 1..];
    }
    (labels, rest)
}

fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_chr = false;
    let mut escaped = false;
    for c in s.chars() {
        if escaped {
            escaped = false;
            cur.push(c);
            continue;
        }
        match c {
            '\\' if in_chr => {
                escaped = true;
                cur.push(c);
            }
            '\'' => {
                in_chr = !in_chr;
                cur.push(c);
            }
            ',' if !in_chr => out.push(std::mem::take(&mut cur).trim().to_string()),
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_item(line: usize, s: &str) -> Result<Item, AsmError> {
    let (head, tail) = match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim()),
        None => (s, ""),
    };
    let lower = head.to_ascii_lowercase();
    match lower.as_str() {
        ".org" => Ok(Item::Org(tail.to_string())),
        ".word" => {
            let vs = split_operands(tail);
            if vs.is_empty() || vs.iter().any(|v| v.is_empty()) {
                return Err(err(line, ".word needs at least one value"));
            }
            Ok(Item::Word(vs))
        }
        ".ascii" => parse_string(tail)
            .map(Item::Ascii)
            .ok_or_else(|| err(line, format!("bad string literal {tail}"))),
        ".equ" => {
            let ops = split_operands(tail);
            if ops.len() != 2 {
                return Err(err(line, ".equ takes NAME, VALUE"));
            }
            Ok(Item::Equ(ops[0].clone(), ops[1].clone()))
        }
        d if d.starts_with('.') => Err(err(line, format!("unknown directive `{head}`"))),
        _ => Ok(Item::Ins(head.to_ascii_uppercase(), split_operands(tail))),
    }
}

pub(crate) fn parse_reg(s: &str) -> Option<u8> {
    let n = s.strip_prefix('r').or_else(|| s.strip_prefix('R'))?;
    if n.is_empty() || (n.len() > 1 && n.starts_with('0')) {
        return None;
    }
    let v: u8 = n.parse().ok()?;
    (v < 16).then_some(v)
}

fn split_mem(s: &str) -> Option<(&str, &str)> {
    let s = s.trim();
    let inner = s.strip_suffix(')')?;
    let open = inner.rfind('(')?;
    Some((&inner[..open], inner[open + 1..].trim()))
}

/// Decimal (possibly negative), `0x` hex or `0b` binary; `_` separators allowed.
pub fn parse_number(tok: &str) -> Option<i64> {
    let t = tok.replace('_', "");
    let (digits, radix) = if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        (h.to_string(), 16)
    } else if let Some(b) = t.strip_prefix("0b").or_else(|| t.strip_prefix("0B")) {
        (b.to_string(), 2)
    } else {
        (t, 10)
    };
    i64::from_str_radix(&digits, radix).ok()
}

fn unescape(chars: &mut std::iter::Peekable<std::str::CharIndices<'_>>) -> Option<u8> {
    let (_, c) = chars.next()?;
    Some(match c {
        'n' => b'\n',
        'r' => b'\r',
        't' => b'\t',
        '0' => 0,
        '\\' => b'\\',
        '"' => b'"',
        '\'' => b'\'',
        'x' => {
            let hi = chars.next()?.1.to_digit(16)?;
            let lo = chars.next()?.1.to_digit(16)?;
            (hi * 16 + lo) as u8
        }
        _ => return None,
    })
}

/// `'c'` at the start of `s`; returns the byte and the length consumed.
fn parse_char(s: &str) -> Option<(u8, usize)> {
    let mut it = s.char_indices().peekable();
    if it.next()?.1 != '\'' {
        return None;
    }
    let v = match it.next()? {
        (_, '\\') => unescape(&mut it)?,
        (_, c) if c.is_ascii() && c != '\'' => c as u8,
        _ => return None,
    };
    let (end, q) = it.next()?;
    (q == '\'').then_some((v, end + 1))
}

fn parse_string(s: &str) -> Option<Vec<u8>> {
    let inner = s.strip_prefix('"')?.strip_suffix('"')?;
    let mut out = Vec::new();
    let mut it = inner.char_indices().peekable();
    while let Some((_, c)) = it.next() {
        match c {
            '\\' => out.push(unescape(&mut it)?),
            '"' => return None,
            c if c.is_ascii() => out.push(c as u8),
            _ => return None,
        }
    }
    Some(out)
}

/// One word in disassembled form.
pub fn disassemble_word(word: u32, pc: u32) -> String {
    let ins = decode(word);
    if matches!(ins.op, Opcode::Illegal(_)) || encode(&ins) != Ok(word) {
        return format!(".word 0x{word:08x}");
    }
    let target = |imm: i32| {
        let t = pc as i64 + 4 + imm as i64 * 4;
        if t < 0 {
            t.to_string()
        } else {
            format!("0x{t:x}")
        }
    };
    match ins.op.format() {
        Format::B => format!("{} r{}, r{}, {}", ins.op.mnemonic(), ins.rs1, ins.rs2, target(ins.imm)),
        Format::J => format!("{} r{}, {}", ins.op.mnemonic(), ins.rd, target(ins.imm)),
        _ => ins.to_string(),
    }
}

/// Source text that assembles back to `image` loaded at `base`. A trailing
/// partial word is zero-padded.
pub fn disassemble(image: &[u8], base: u32) -> String {
    let mut out = format!(".org 0x{base:x}\n");
    for (i, chunk) in image.chunks(4).enumerate() {
        let mut w = [0u8; 4];
        w[..chunk.len()].copy_from_slice(chunk);
        let pc = base + 4 * i as u32;
        out.push_str(&format!("    {:<32} ; {pc:#07x}\n", disassemble_word(u32::from_le_bytes(w), pc)));
    }
    out
}

impl fmt::Display for AsmProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&disassemble(&self.image, self.base))
    }
}
