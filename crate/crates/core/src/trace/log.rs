use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{check_order, Checkpoint, Event, TraceError, TraceHeader};

/// Single-writer append handle.
pub struct TraceWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last: Option<Event>,
    count: u64,
}

impl TraceWriter {
    pub fn create(path: impl AsRef<Path>, header: &TraceHeader) -> Result<Self, TraceError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(TraceError::io(&path))?;
        let mut out = BufWriter::with_capacity(1 << 16, file);
        let line = serde_json::to_string(header).expect("header serializes");
        writeln!(out, "{line}").map_err(TraceError::io(&path))?;
        Ok(TraceWriter {
            path,
            out,
            last: None,
            count: 0,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn event_count(&self) -> u64 {
        self.count
    }

    pub fn append(&mut self, event: Event) -> Result<(), TraceError> {
        check_order(self.last.as_ref(), &event)?;
        writeln!(self.out, "{}", event.to_json()).map_err(TraceError::io(&self.path))?;
        self.last = Some(event);
        self.count += 1;
        Ok(())
    }

    pub fn write_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), TraceError> {
        super::write_checkpoint(&self.path, ckpt)
    }

    /// Make everything appended so far visible to readers.
    pub fn flush(&mut self) -> Result<(), TraceError> {
        self.out.flush().map_err(TraceError::io(&self.path))
    }

    pub fn finish(mut self) -> Result<u64, TraceError> {
        self.flush()?;
        self.out
            .get_ref()
            .sync_data()
            .map_err(TraceError::io(&self.path))?;
        Ok(self.count)
    }
}

/// A log read back from disk.
#[derive(Debug, Clone)]
pub struct TraceLog {
    pub path: PathBuf,
    pub header: TraceHeader,
    pub events: Vec<Event>,
}

impl TraceLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(TraceError::io(&path))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or(TraceError::Corrupt {
                line: 1,
                reason: "empty log".into(),
            })?
            .map_err(TraceError::io(&path))?;
        let header: TraceHeader = serde_json::from_str(&first).map_err(|e| TraceError::Corrupt {
            line: 1,
            reason: format!("bad header: {e}"),
        })?;
        if header.format_version != super::FORMAT_VERSION {
            return Err(TraceError::Corrupt {
                line: 1,
                reason: format!("unsupported format version {}", header.format_version),
            });
        }
        let mut events: Vec<Event> = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(TraceError::io(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let ev = Event::from_json(&line).map_err(|reason| TraceError::Corrupt { line: lineno, reason })?;
            check_order(events.last(), &ev).map_err(|e| TraceError::Corrupt {
                line: lineno,
                reason: e.to_string(),
            })?;
            events.push(ev);
        }
        Ok(TraceLog { path, header, events })
    }

    /// Ends with Halt or Limit.
    pub fn is_complete(&self) -> bool {
        self.events.last().is_some_and(|e| e.kind.is_terminal())
    }

    pub fn final_icount(&self) -> u64 {
        self.events.last().map_or(0, |e| e.icount)
    }

    /// Index of the event with sequence number `seq`.
    pub fn position_of(&self, seq: u64) -> Option<usize> {
        self.events.binary_search_by_key(&seq, |e| e.seq).ok()
    }

    pub fn checkpoints(&self) -> Result<Vec<u64>, TraceError> {
        super::list_checkpoints(&self.path)
    }

    /// Latest checkpoint at or before `icount`; `None` means start from reset.
    pub fn load_checkpoint(&self, icount: u64) -> Result<Option<Checkpoint>, TraceError> {
        super::load_checkpoint(&self.path, icount)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counter::CounterConfig;
    use crate::trace::{Digest, EventKind};

    pub(crate) fn header() -> TraceHeader {
        TraceHeader {
            format_version: super::super::FORMAT_VERSION,
            isa_version: super::super::ISA_VERSION,
            hash_algorithm: "sha256".into(),
            mem_size: 4096,
            kernel_image_hash: Digest::of(b"k"),
            disk_image_hash: Digest::of(b"d"),
            counter_config: CounterConfig::default(),
            checkpoint_interval: 100,
            max_instructions: 1000,
            created_at: 1,
        }
    }

    fn ev(seq: u64, icount: u64) -> Event {
        Event {
            seq,
            icount,
            kind: EventKind::IrqDelivery { line: 0, nth: 0 },
        }
    }

    #[test]
    fn equal_icounts_are_fine_decreasing_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = TraceWriter::create(dir.path().join("log"), &header()).unwrap();
        w.append(ev(1, 100)).unwrap();
        w.append(ev(2, 100)).unwrap();
        assert!(matches!(w.append(ev(3, 99)), Err(TraceError::NonMonotonic { .. })));
        assert!(matches!(w.append(ev(2, 101)), Err(TraceError::NonMonotonic { .. })));
    }

    #[test]
    fn nothing_after_halt() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = TraceWriter::create(dir.path().join("log"), &header()).unwrap();
        w.append(Event { seq: 0, icount: 5, kind: EventKind::Halt }).unwrap();
        assert!(matches!(w.append(ev(1, 6)), Err(TraceError::AfterTerminal)));
    }

    #[test]
    fn thousand_events_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log");
        let mut w = TraceWriter::create(&path, &header()).unwrap();
        let mut written = Vec::new();
        for i in 0..1000u64 {
            let kind = match i % 3 {
                0 => EventKind::IrqDelivery { line: (i % 2) as u32, nth: (i % 5) as u32 },
                1 => EventKind::DeviceRead { addr: 0xF000_0004, value: i as u32 },
                _ => EventKind::StateHash { hash: Digest::of(&i.to_le_bytes()) },
            };
            let e = Event { seq: i, icount: i * 7 / 3, kind };
            w.append(e).unwrap();
            written.push(e);
        }
        w.finish().unwrap();
        let log = TraceLog::open(&path).unwrap();
        assert_eq!(log.header, header());
        assert_eq!(log.events, written);
        assert!(!log.is_complete());
    }

    #[test]
    fn reader_flags_corruption_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log");
        let mut text = serde_json::to_string(&header()).unwrap();
        text.push('\n');
        text.push_str(&ev(1, 10).to_json());
        text.push('\n');
        text.push_str(&ev(2, 9).to_json());
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        match TraceLog::open(&path) {
            Err(TraceError::Corrupt { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected corruption, got {other:?}"),
        }
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(TraceLog::open(&path), Err(TraceError::Corrupt { line: 1, .. })));
    }
}
