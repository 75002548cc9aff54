//! Console input sources for record mode.
//!
//! Script format, one entry per line:
//!
//! ```text
//! # comment
//! AT 10 CONSOLE 68 69
//! AT 25 CONSOLE 0a
//! ```
//!
//! Times are milliseconds of host clock since the recording started.

use std::fmt;
use std::sync::mpsc::Receiver;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StimulusEntry {
    pub at_ms: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StimulusScript {
    pub entries: Vec<StimulusEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("stimulus line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

impl StimulusScript {
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut entries: Vec<StimulusEntry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| ScriptError { line, message };
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut toks = body.split_whitespace();
            if !toks.next().is_some_and(|t| t.eq_ignore_ascii_case("AT")) {
                return Err(err("expected `AT <ms> CONSOLE <hex bytes>`".into()));
            }
            let at_ms: u64 = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err("missing or bad millisecond offset".into()))?;
            if !toks.next().is_some_and(|t| t.eq_ignore_ascii_case("CONSOLE")) {
                return Err(err("only CONSOLE stimulus is supported".into()));
            }
            let mut payload = Vec::new();
            for t in toks {
                let bytes = hex::decode(t).map_err(|e| err(format!("bad hex `{t}`: {e}")))?;
                payload.extend(bytes);
            }
            if payload.is_empty() {
                return Err(err("no payload bytes".into()));
            }
            if entries.last().is_some_and(|prev| prev.at_ms > at_ms) {
                return Err(err(format!("time {at_ms} goes backwards")));
            }
            entries.push(StimulusEntry { at_ms, payload });
        }
        Ok(StimulusScript { entries })
    }

    pub fn byte_count(&self) -> usize {
        self.entries.iter().map(|e| e.payload.len()).sum()
    }

    pub fn cursor(self) -> ScriptCursor {
        ScriptCursor { script: self, next: 0 }
    }
}

impl fmt::Display for StimulusScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            write!(f, "AT {} CONSOLE", e.at_ms)?;
            for b in &e.payload {
                write!(f, " {b:02x}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ScriptCursor {
    script: StimulusScript,
    next: usize,
}

/// Where console input comes from while recording.
#[derive(Debug, Default)]
pub enum Stimulus {
    #[default]
    None,
    Script(ScriptCursor),
    /// Bytes pushed by another thread (e.g. a host keyboard reader). Drained
    /// only at instruction boundaries.
    Channel(Receiver<Vec<u8>>),
}

impl Stimulus {
    pub fn script(script: StimulusScript) -> Self {
        Stimulus::Script(script.cursor())
    }

    pub(crate) fn next_due(&mut self, now_ms: u64) -> Option<Vec<u8>> {
        match self {
            Stimulus::None => None,
            Stimulus::Script(c) => {
                let e = c.script.entries.get(c.next)?;
                if e.at_ms <= now_ms {
                    c.next += 1;
                    Some(e.payload.clone())
                } else {
                    None
                }
            }
            Stimulus::Channel(rx) => rx.try_recv().ok(),
        }
    }
}
