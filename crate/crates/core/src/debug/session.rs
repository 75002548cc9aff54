use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::engine::{Boundary, Divergence, EngineError, ExitReason, Replayer, Retire};
use crate::guest::asm::disassemble_word;
use crate::guest::SymbolTable;
use crate::isa::{Machine, Mode};
use crate::trace::Digest;

use super::{read_tasks, running_task, Breakpoint, LayoutError, StopEvent, StopReason, TaskId, TaskView};

/// A pause point: the first settled boundary after `retired` instructions
/// completed, then `extra` steps that retired nothing (faults).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Position {
    pub retired: u64,
    pub extra: u64,
}

impl Position {
    pub const START: Position = Position { retired: 0, extra: 0 };

    pub fn at(retired: u64) -> Position {
        Position { retired, extra: 0 }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Divergence(Box<Divergence>),
    #[error(transparent)]
    Engine(EngineError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("no earlier instruction of task {0} in this recording")]
    AtStart(TaskId),
    #[error("{len} bytes at {addr:#x} are outside guest memory")]
    BadRange { addr: u32, len: u32 },
    #[error("session ended after a divergence")]
    Ended,
}

impl From<EngineError> for SessionError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Divergence(d) => SessionError::Divergence(d),
            other => SessionError::Engine(other),
        }
    }
}

/// `where`: the pause point in guest terms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Location {
    pub pc: u32,
    pub mode: &'static str,
    pub task_id: TaskId,
    pub icount: u64,
    pub retired: u64,
    pub symbol: Option<String>,
    pub offset: Option<u32>,
    pub instruction: String,
}

/// A replay under debugger control, always paused at a settled boundary
/// between calls.
pub struct Session {
    replayer: Replayer,
    symbols: SymbolTable,
    breakpoints: Vec<Breakpoint>,
    next_bp: u32,
    extra: u64,
    pause: Arc<AtomicBool>,
    ended: bool,
}

type Result<T, E = SessionError> = std::result::Result<T, E>;

impl Session {
    /// Take over `replayer` and pause at its first boundary.
    pub fn new(replayer: Replayer, symbols: SymbolTable) -> Result<Session> {
        let mut s = Session {
            replayer,
            symbols,
            breakpoints: Vec::new(),
            next_bp: 1,
            extra: 0,
            pause: Arc::default(),
            ended: false,
        };
        s.settle()?;
        Ok(s)
    }

    pub fn replayer(&self) -> &Replayer {
        &self.replayer
    }

    pub fn machine(&self) -> &Machine {
        self.replayer.machine()
    }

    pub fn symbols(&self) -> &SymbolTable {
        &self.symbols
    }

    pub fn position(&self) -> Position {
        Position {
            retired: self.replayer.retired(),
            extra: self.extra,
        }
    }

    pub fn icount(&self) -> u64 {
        self.replayer.icount()
    }

    pub fn finished(&self) -> Option<ExitReason> {
        self.replayer.finished()
    }

    /// True once a divergence ended the session.
    pub fn ended(&self) -> bool {
        self.ended
    }

    /// Setting this makes a running `continue` or step stop at the next
    /// boundary with reason `pause`. The caller clears it.
    pub fn pause_flag(&self) -> Arc<AtomicBool> {
        self.pause.clone()
    }

    pub fn state_hash(&mut self) -> Digest {
        self.replayer.state_hash()
    }

    pub fn tasks(&self) -> Result<Vec<TaskView>, LayoutError> {
        read_tasks(self.machine())
    }

    /// Owner of the next instruction.
    pub fn running_task(&self) -> TaskId {
        running_task(self.machine())
    }

    pub fn read_mem(&self, addr: u32, len: u32) -> Result<&[u8]> {
        let mem = &self.machine().mem;
        let end = addr as u64 + len as u64;
        if end > mem.len() as u64 {
            return Err(SessionError::BadRange { addr, len });
        }
        Ok(&mem[addr as usize..end as usize])
    }

    pub fn breakpoints(&self) -> &[Breakpoint] {
        &self.breakpoints
    }

    /// Watch `addr` (optionally only for `task`). Setting an identical
    /// breakpoint again returns the existing id.
    pub fn set_breakpoint(&mut self, addr: u32, task: Option<u32>) -> u32 {
        if let Some(b) = self.breakpoints.iter().find(|b| b.addr == addr && b.task_id == task) {
            return b.id;
        }
        let id = self.next_bp;
        self.next_bp += 1;
        self.breakpoints.push(Breakpoint { id, addr, task_id: task });
        id
    }

    pub fn clear_breakpoint(&mut self, id: u32) -> bool {
        let before = self.breakpoints.len();
        self.breakpoints.retain(|b| b.id != id);
        self.breakpoints.len() != before
    }

    pub fn location(&self) -> Location {
        let m = self.machine();
        let nearest = self.symbols.nearest(m.pc);
        Location {
            pc: m.pc,
            mode: match m.mode() {
                Mode::User => "user",
                Mode::Supervisor => "supervisor",
            },
            task_id: self.running_task(),
            icount: self.icount(),
            retired: m.retired,
            symbol: nearest.map(|(n, _)| n.to_string()),
            offset: nearest.map(|(_, o)| o),
            instruction: m
                .read_word(m.pc)
                .map_or_else(|| "??".to_string(), |w| disassemble_word(w, m.pc)),
        }
    }

    pub fn stop(&self, reason: StopReason, breakpoint: Option<u32>) -> StopEvent {
        let m = self.machine();
        StopEvent {
            reason,
            icount: self.icount(),
            retired: m.retired,
            task_id: self.running_task(),
            pc: m.pc,
            breakpoint,
        }
    }

    fn live(&self) -> Result<()> {
        if self.ended {
            return Err(SessionError::Ended);
        }
        Ok(())
    }

    fn end(&mut self, d: Box<Divergence>) -> SessionError {
        self.ended = true;
        SessionError::Divergence(d)
    }

    /// Apply the current boundary's events. `true` when the replay is over.
    fn settle(&mut self) -> Result<bool> {
        match self.replayer.settle() {
            Ok(Boundary::Finished(_)) => Ok(true),
            Ok(Boundary::Running) => Ok(false),
            Err(d) => Err(self.end(d)),
        }
    }

    /// Execute one instruction from a settled boundary, reporting who it
    /// belonged to.
    fn advance(&mut self) -> Result<Option<(Retire, TaskId)>> {
        let who = self.running_task();
        match self.replayer.exec_one() {
            Ok(Some(r)) => {
                if self.replayer.retired() == r.retired_before {
                    self.extra += 1;
                } else {
                    self.extra = 0;
                }
                Ok(Some((r, who)))
            }
            Ok(None) => Ok(None),
            Err(d) => Err(self.end(d)),
        }
    }

    fn pause_requested(&self) -> bool {
        self.pause.load(Ordering::Relaxed)
    }

    fn finish_stop(&mut self, reason: StopReason) -> Result<StopEvent> {
        if self.settle()? {
            return Ok(self.stop(StopReason::Halt, None));
        }
        Ok(self.stop(reason, None))
    }

    /// Run until a breakpoint fires, the replay ends, or a pause arrives.
    /// A breakpoint at the current pause point does not fire again.
    pub fn cont(&mut self) -> Result<StopEvent> {
        self.live()?;
        let mut first = true;
        loop {
            if self.settle()? {
                return Ok(self.stop(StopReason::Halt, None));
            }
            if !first {
                let m = self.machine();
                if let Some(b) = self.breakpoints.iter().find(|b| b.hits(m)) {
                    return Ok(self.stop(StopReason::Breakpoint, Some(b.id)));
                }
                if self.pause_requested() {
                    return Ok(self.stop(StopReason::Pause, None));
                }
            }
            first = false;
            self.advance()?;
        }
    }

    /// Run until exactly one more instruction attributed to `task` retires.
    /// Everything else runs through unobserved.
    pub fn step_task(&mut self, task: TaskId) -> Result<StopEvent> {
        self.live()?;
        let mut first = true;
        loop {
            if self.settle()? {
                return Ok(self.stop(StopReason::Halt, None));
            }
            if !first && self.pause_requested() {
                return Ok(self.stop(StopReason::Pause, None));
            }
            first = false;
            match self.advance()? {
                Some((r, who)) if who == task && r.retired() => return self.finish_stop(StopReason::Step),
                Some(_) => {}
                None => return Ok(self.stop(StopReason::Halt, None)),
            }
        }
    }

    /// Go back to just before the most recent instruction of `task` that
    /// retired before the current pause point.
    pub fn reverse_step(&mut self, task: TaskId) -> Result<StopEvent> {
        self.live()?;
        let here = self.position();
        let mut starts: Vec<u64> = self.replayer.checkpoints().iter().copied().filter(|&c| c <= here.retired).collect();
        starts.push(0);
        starts.sort_unstable();
        starts.dedup();
        let mut upper = here;
        for &c in starts.iter().rev() {
            let start = Position::at(c);
            if start >= upper {
                continue;
            }
            self.goto_position(start)?;
            let mut last = None;
            while self.position() < upper {
                if self.settle()? {
                    break;
                }
                let before = self.position();
                match self.advance()? {
                    Some((r, who)) if who == task && r.retired() => last = Some(before),
                    Some(_) => {}
                    None => break,
                }
            }
            if let Some(p) = last {
                self.goto_position(p)?;
                return Ok(self.stop(StopReason::Step, None));
            }
            upper = start;
        }
        self.goto_position(here)?;
        Err(SessionError::AtStart(task))
    }

    /// Pause at the first boundary with corrected count `icount`, in either
    /// direction. Past the end of the recording this stops at the end.
    pub fn run_to_icount(&mut self, icount: u64) -> Result<StopEvent> {
        self.live()?;
        let b = self.replayer.seek(icount).map_err(|e| self.engine_error(e))?;
        self.extra = 0;
        Ok(match b {
            Boundary::Finished(_) => self.stop(StopReason::Halt, None),
            Boundary::Running => self.stop(StopReason::Icount, None),
        })
    }

    /// Pause exactly at `pos`.
    pub fn goto_position(&mut self, pos: Position) -> Result<()> {
        self.live()?;
        let cur = self.position();
        if pos < cur {
            self.replayer.rewind(pos.retired).map_err(|e| self.engine_error(e))?;
        }
        if pos < cur || pos.retired != cur.retired {
            self.extra = 0;
        }
        let b = self.replayer.seek_retired(pos.retired).map_err(|e| self.engine_error(e))?;
        if b == Boundary::Running && self.replayer.retired() == pos.retired {
            while self.extra < pos.extra {
                if self.settle()? || self.advance()?.is_none() {
                    break;
                }
            }
        }
        self.settle()?;
        Ok(())
    }

    fn engine_error(&mut self, e: EngineError) -> SessionError {
        match e {
            EngineError::Divergence(d) => self.end(d),
            other => SessionError::Engine(other),
        }
    }
}
