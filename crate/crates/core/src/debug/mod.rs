//! Time-travel debugger over a replay.
//!
//! The debugger never touches the guest: tasks are decoded from the kernel's
//! fixed task table, breakpoints are address watches checked by the engine,
//! and every movement (including backwards) is a replay of the log.

mod protocol;
mod server;
mod session;

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::guest::abi;
use crate::isa::{Machine, Mode};

pub use protocol::{handle_request, handshake, Reply, Request, PROTOCOL_VERSION};
pub use server::{serve_tcp, serve_ws, Client, ClientSender, Hub};
pub use session::{Location, Position, Session, SessionError};

/// Guest task index, or [`KERNEL_TASK`] for supervisor-mode execution.
pub type TaskId = i32;
pub const KERNEL_TASK: TaskId = -1;

/// One guest task as the kernel's task table describes it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskView {
    pub task_id: TaskId,
    pub state: &'static str,
    pub pc: u32,
    pub regs: [u32; 16],
    pub is_current: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("task table claims {0} tasks; at most {max} exist", max = abi::MAX_TASKS)]
    TooManyTasks(u32),
    #[error("task {task} has unknown state code {code}")]
    BadState { task: u32, code: u32 },
    #[error("task table lies outside guest memory")]
    Unmapped,
}

/// Decode the task table. The running task's descriptor is stale, so in user
/// mode its pc and registers come from the machine; in supervisor mode every
/// task is shown as its descriptor has it.
pub fn read_tasks(m: &Machine) -> Result<Vec<TaskView>, LayoutError> {
    let word = |a: u32| m.read_word(a).ok_or(LayoutError::Unmapped);
    let n = word(abi::NUM_TASKS)?;
    if n > abi::MAX_TASKS {
        return Err(LayoutError::TooManyTasks(n));
    }
    let current = running_task(m);
    (0..n)
        .map(|i| {
            let d = abi::descriptor(i);
            let code = word(d + abi::DESC_STATE)?;
            let state = abi::state_name(code).ok_or(LayoutError::BadState { task: i, code })?;
            let is_current = current == i as TaskId;
            let (pc, regs) = if is_current {
                (m.pc, m.regs)
            } else {
                let mut regs = [0; 16];
                for (r, slot) in regs.iter_mut().enumerate() {
                    *slot = word(d + abi::DESC_REGS + 4 * r as u32)?;
                }
                (word(d + abi::DESC_PC)?, regs)
            };
            Ok(TaskView {
                task_id: i as TaskId,
                state,
                pc,
                regs,
                is_current,
            })
        })
        .collect()
}

/// Who the next instruction belongs to: `CURRENT` in user mode, the kernel
/// otherwise (or when `CURRENT` does not name a task).
pub fn running_task(m: &Machine) -> TaskId {
    if m.mode() != Mode::User {
        return KERNEL_TASK;
    }
    let n = m.read_word(abi::NUM_TASKS).unwrap_or(0);
    match m.read_word(abi::CURRENT) {
        Some(c) if c < n.min(abi::MAX_TASKS) => c as TaskId,
        _ => KERNEL_TASK,
    }
}

/// An engine-side address watch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Breakpoint {
    pub id: u32,
    pub addr: u32,
    /// Only stop when this task is running.
    pub task_id: Option<u32>,
}

impl Breakpoint {
    /// Does this watch fire at a boundary with `m` about to execute?
    pub fn hits(&self, m: &Machine) -> bool {
        m.pc == self.addr
            && m.mode() == Mode::User
            && self.task_id.is_none_or(|t| running_task(m) == t as TaskId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Breakpoint,
    Step,
    Icount,
    Halt,
    /// Interrupted by a pause request.
    Pause,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Breakpoint => "breakpoint",
            StopReason::Step => "step",
            StopReason::Icount => "icount",
            StopReason::Halt => "halt",
            StopReason::Pause => "pause",
        })
    }
}

/// Where and why execution paused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StopEvent {
    pub reason: StopReason,
    pub icount: u64,
    pub retired: u64,
    pub task_id: TaskId,
    pub pc: u32,
    /// Set when `reason` is `breakpoint`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub breakpoint: Option<u32>,
}

impl StopEvent {
    /// The unsolicited wire message.
    pub fn to_message(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("stop events serialize");
        v["event"] = "stopped".into();
        v
    }
}

impl fmt::Display for StopEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stopped ({}) at icount {} pc {:#x} task {}",
            self.reason, self.icount, self.pc, self.task_id
        )?;
        if let Some(b) = self.breakpoint {
            write!(f, " breakpoint {b}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn machine_with_table(n: u32, current: u32) -> Machine {
        let mut m = Machine::reset(&[], 1 << 20).unwrap();
        let put = |m: &mut Machine, a: u32, v: u32| m.mem[a as usize..a as usize + 4].copy_from_slice(&v.to_le_bytes());
        put(&mut m, abi::NUM_TASKS, n);
        put(&mut m, abi::CURRENT, current);
        for i in 0..n.min(abi::MAX_TASKS) {
            let d = abi::descriptor(i);
            put(&mut m, d + abi::DESC_STATE, abi::ST_READY);
            put(&mut m, d + abi::DESC_PC, abi::task_base(i));
            put(&mut m, d + abi::DESC_REGS + 4, 100 + i);
        }
        m
    }

    #[test]
    fn current_task_is_live_in_user_mode() {
        let mut m = machine_with_table(2, 1);
        m.status.mode = Mode::User;
        m.pc = 0x12345 & !3;
        m.regs[1] = 7;
        let t = read_tasks(&m).unwrap();
        assert!(t[1].is_current && !t[0].is_current);
        assert_eq!((t[1].pc, t[1].regs[1]), (m.pc, 7));
        assert_eq!((t[0].pc, t[0].regs[1]), (abi::task_base(0), 100));
        assert_eq!(running_task(&m), 1);
    }

    #[test]
    fn supervisor_mode_shows_descriptors() {
        let m = machine_with_table(2, 1);
        let t = read_tasks(&m).unwrap();
        assert!(t.iter().all(|t| !t.is_current));
        assert_eq!(t[1].regs[1], 101);
        assert_eq!(running_task(&m), KERNEL_TASK);
    }

    #[test]
    fn implausible_tables_are_rejected() {
        assert_eq!(read_tasks(&machine_with_table(9, 0)), Err(LayoutError::TooManyTasks(9)));
        let mut m = machine_with_table(1, 0);
        m.mem[abi::descriptor(0) as usize] = 7;
        assert_eq!(read_tasks(&m), Err(LayoutError::BadState { task: 0, code: 7 }));
        assert_eq!(read_tasks(&machine_with_table(0, 0)).unwrap(), vec![]);
        let small = Machine::reset(&[], 64).unwrap();
        assert_eq!(read_tasks(&small), Err(LayoutError::Unmapped));
    }

    #[test]
    fn stop_message_shape() {
        let s = StopEvent {
            reason: StopReason::Breakpoint,
            icount: 5,
            retired: 5,
            task_id: 0,
            pc: 0x10000,
            breakpoint: Some(1),
        };
        let v = s.to_message();
        assert_eq!(v["event"], "stopped");
        assert_eq!(v["reason"], "breakpoint");
        assert_eq!(v["task_id"], 0);
    }
}
