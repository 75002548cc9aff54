//! Address-to-name map for code and data labels.
//!
//! Text form, one symbol per line: `0x00010000 echo.loop`. Blank lines and
//! `;` comments are ignored.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SymbolTable {
    by_addr: BTreeMap<u32, Vec<String>>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("symbol file line {line}: {message}")]
pub struct SymbolError {
    pub line: usize,
    pub message: String,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, addr: u32, name: impl Into<String>) {
        let names = self.by_addr.entry(addr).or_default();
        let name = name.into();
        if !names.contains(&name) {
            names.push(name);
            names.sort();
        }
    }

    pub fn len(&self) -> usize {
        self.by_addr.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_addr.is_empty()
    }

    pub fn lookup(&self, name: &str) -> Option<u32> {
        self.iter().find(|(_, n)| *n == name).map(|(a, _)| a)
    }

    /// Closest symbol at or below `addr`, with the offset from it.
    pub fn nearest(&self, addr: u32) -> Option<(&str, u32)> {
        let (&a, names) = self.by_addr.range(..=addr).next_back()?;
        Some((names[0].as_str(), addr - a))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> + '_ {
        self.by_addr
            .iter()
            .flat_map(|(&a, ns)| ns.iter().map(move |n| (a, n.as_str())))
    }

    pub fn parse(text: &str) -> Result<SymbolTable, SymbolError> {
        let mut t = SymbolTable::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(';').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| SymbolError { line: i + 1, message };
            let mut parts = line.split_whitespace();
            let (Some(addr), Some(name), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected `ADDRESS NAME`".into()));
            };
            let addr = super::asm::parse_number(addr)
                .and_then(|v| u32::try_from(v).ok())
                .ok_or_else(|| bad(format!("bad address `{addr}`")))?;
            t.insert(addr, name);
        }
        Ok(t)
    }
}

impl fmt::Display for SymbolTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (a, n) in self.iter() {
            writeln!(f, "0x{a:08x} {n}")?;
        }
        Ok(())
    }
}

impl FromIterator<(u32, String)> for SymbolTable {
    fn from_iter<I: IntoIterator<Item = (u32, String)>>(iter: I) -> Self {
        let mut t = SymbolTable::new();
        for (a, n) in iter {
            t.insert(a, n);
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_and_round_trip() {
        let t: SymbolTable = [(0x100, "trap".to_string()), (0x10000, "echo.loop".into()), (0x100, "a".into())]
            .into_iter()
            .collect();
        assert_eq!(t.nearest(0x104), Some(("a", 4)));
        assert_eq!(t.nearest(0xff), None);
        assert_eq!(t.nearest(0x10008), Some(("echo.loop", 8)));
        assert_eq!(t.lookup("trap"), Some(0x100));
        assert_eq!(SymbolTable::parse(&t.to_string()).unwrap(), t);
        assert_eq!(t.len(), 3);
    }

    #[test]
    fn parse_errors_carry_lines() {
        let e = SymbolTable::parse("; header\n0x10 ok\nnope\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(SymbolTable::parse("0xzz name").is_err());
    }
}
