//! JSON request/response protocol. Transport-independent: one request in,
//! one response out, plus an optional stop event to broadcast.

use serde::Deserialize;
use serde_json::{json, Value};

use super::session::{Session, SessionError};
use super::{StopEvent, TaskId};

pub const PROTOCOL_VERSION: u32 = 1;

/// Largest `read-mem` and `events` reply.
const MAX_READ: u32 = 1 << 16;
const MAX_EVENTS: u64 = 10_000;

#[derive(Debug, Clone, Deserialize)]
pub struct Request {
    #[serde(default)]
    pub id: Value,
    pub cmd: String,
    #[serde(default)]
    pub args: Value,
}

impl Request {
    pub fn parse(line: &str) -> Result<Request, String> {
        serde_json::from_str(line).map_err(|e| format!("malformed request: {e}"))
    }
}

/// Outcome of one request.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub response: Value,
    /// Execution moved; tell every client.
    pub stop: Option<StopEvent>,
    /// The client asked to detach.
    pub close: bool,
}

impl Reply {
    fn ok(id: &Value, data: Value) -> Reply {
        Reply {
            response: json!({"id": id, "ok": true, "data": data}),
            stop: None,
            close: false,
        }
    }

    /// A failed request. `kind` is one of `usage`, `read-only`, `layout`,
    /// `divergence`, `at-start`, `range`, `ended` or `engine`.
    pub fn error(id: &Value, kind: &str, msg: impl std::fmt::Display) -> Reply {
        Reply {
            response: json!({"id": id, "ok": false, "error": msg.to_string(), "kind": kind}),
            stop: None,
            close: false,
        }
    }

    fn stopped(id: &Value, stop: StopEvent) -> Reply {
        Reply {
            stop: Some(stop),
            ..Reply::ok(id, serde_json::to_value(stop).expect("stop events serialize"))
        }
    }
}

/// First message on every connection.
pub fn handshake(s: &Session) -> Value {
    let log = s.replayer().log();
    let h = &log.header;
    json!({
        "event": "hello",
        "protocol": PROTOCOL_VERSION,
        "log": {
            "format_version": h.format_version,
            "isa_version": h.isa_version,
            "counter_profile": h.counter_config.profile.name(),
            "counter_config": h.counter_config,
            "checkpoint_interval": h.checkpoint_interval,
            "mem_size": h.mem_size,
            "kernel_image_hash": h.kernel_image_hash,
            "disk_image_hash": h.disk_image_hash,
            "events": log.events.len(),
            "final_icount": log.final_icount(),
        },
        "symbols": {"available": !s.symbols().is_empty(), "count": s.symbols().len()},
        "stopped": s.stop(super::StopReason::Icount, None),
    })
}

/// Accepts a JSON number or a decimal / `0x` string.
fn number(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n.as_i64(),
        Value::String(s) => crate::guest::asm::parse_number(s.trim()),
        _ => None,
    }
}

fn arg_u32(args: &Value, key: &str) -> Result<u32, String> {
    let v = args.get(key).ok_or_else(|| format!("missing argument `{key}`"))?;
    number(v)
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| format!("argument `{key}` must be a 32-bit unsigned number"))
}

fn arg_u64(args: &Value, key: &str) -> Result<u64, String> {
    let v = args.get(key).ok_or_else(|| format!("missing argument `{key}`"))?;
    number(v)
        .and_then(|n| u64::try_from(n).ok())
        .ok_or_else(|| format!("argument `{key}` must be a non-negative number"))
}

fn opt_task(args: &Value) -> Result<Option<TaskId>, String> {
    match args.get("task_id").or_else(|| args.get("task")) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => number(v)
            .and_then(|n| TaskId::try_from(n).ok())
            .filter(|&t| t >= -1)
            .map(Some)
            .ok_or_else(|| "argument `task_id` must be a task index or -1".to_string()),
    }
}

/// Dispatch one request against the session.
pub fn handle_request(s: &mut Session, focus: &mut Option<TaskId>, req: &Request) -> Reply {
    let id = &req.id;
    match dispatch(s, focus, req) {
        Ok(r) => r,
        Err(Failure::Usage(msg)) => Reply::error(id, "usage", msg),
        Err(Failure::ReadOnly) => Reply::error(id, "read-only", "read-only replay"),
        Err(Failure::Session(e)) => {
            let kind = match e {
                SessionError::Divergence(_) => "divergence",
                SessionError::Layout(_) => "layout",
                SessionError::AtStart(_) => "at-start",
                SessionError::BadRange { .. } => "range",
                SessionError::Ended => "ended",
                SessionError::Engine(_) => "engine",
            };
            Reply::error(id, kind, e)
        }
    }
}

enum Failure {
    Usage(String),
    ReadOnly,
    Session(SessionError),
}

impl From<String> for Failure {
    fn from(s: String) -> Self {
        Failure::Usage(s)
    }
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        Failure::Session(e)
    }
}

fn dispatch(s: &mut Session, focus: &mut Option<TaskId>, req: &Request) -> Result<Reply, Failure> {
    let id = &req.id;
    let args = &req.args;
    let reply = match req.cmd.as_str() {
        "attach" => {
            let task = opt_task(args)?;
            if let Some(t) = task.filter(|&t| t >= 0) {
                let n = s.tasks().map_err(SessionError::from)?.len();
                if t as usize >= n {
                    return Err(format!("no task {t}; the guest has {n}").into());
                }
            }
            *focus = task;
            Reply::ok(id, json!({"task_id": task, "stopped": s.stop(super::StopReason::Icount, None)}))
        }
        "detach" => {
            *focus = None;
            Reply {
                close: true,
                ..Reply::ok(id, Value::Null)
            }
        }
        "tasks" => Reply::ok(id, json!(s.tasks().map_err(SessionError::from)?)),
        "regs" => {
            let m = s.machine();
            match opt_task(args)? {
                Some(t) if t >= 0 => {
                    let tasks = s.tasks().map_err(SessionError::from)?;
                    let v = tasks.get(t as usize).ok_or_else(|| format!("no task {t}"))?;
                    Reply::ok(id, json!({"task_id": t, "pc": v.pc, "r": v.regs}))
                }
                _ => Reply::ok(
                    id,
                    json!({
                        "task_id": s.running_task(),
                        "pc": m.pc,
                        "r": m.regs,
                        "status": m.status.word(),
                        "mode": s.location().mode,
                        "icount": s.icount(),
                        "retired": m.retired,
                    }),
                ),
            }
        }
        "read-mem" => {
            let addr = arg_u32(args, "addr")?;
            let len = arg_u32(args, "len")?;
            if len > MAX_READ {
                return Err(format!("at most {MAX_READ} bytes per read").into());
            }
            let bytes = s.read_mem(addr, len)?;
            Reply::ok(id, json!({"addr": addr, "len": len, "hex": hex::encode(bytes)}))
        }
        "break-set" => {
            let addr = arg_u32(args, "addr")?;
            let task = match opt_task(args)? {
                Some(-1) => return Err("breakpoints watch user tasks; the kernel cannot be a filter".to_string().into()),
                t => t.map(|t| t as u32),
            };
            let bp = s.set_breakpoint(addr, task);
            Reply::ok(id, json!({"id": bp, "addr": addr, "task_id": task}))
        }
        "break-clear" => {
            let bp = arg_u32(args, "id")?;
            if !s.clear_breakpoint(bp) {
                return Err(format!("no breakpoint {bp}").into());
            }
            Reply::ok(id, json!({"id": bp}))
        }
        "break-list" => Reply::ok(id, json!(s.breakpoints())),
        "continue" => Reply::stopped(id, s.cont()?),
        "step" => {
            let t = opt_task(args)?.or(*focus).unwrap_or_else(|| s.running_task());
            Reply::stopped(id, s.step_task(t)?)
        }
        "reverse-step" => {
            let t = opt_task(args)?.or(*focus).unwrap_or_else(|| s.running_task());
            Reply::stopped(id, s.reverse_step(t)?)
        }
        "run-to-icount" => Reply::stopped(id, s.run_to_icount(arg_u64(args, "n")?)?),
        "pause" => Reply::ok(id, json!(s.stop(super::StopReason::Pause, None))),
        "where" => Reply::ok(id, json!(s.location())),
        "hash" => Reply::ok(id, json!({"hash": s.state_hash(), "icount": s.icount()})),
        "events" => {
            let events = &s.replayer().log().events;
            let from = args.get("from").map(|_| arg_u64(args, "from")).transpose()?.unwrap_or(0);
            let to = args
                .get("to")
                .map(|_| arg_u64(args, "to"))
                .transpose()?
                .unwrap_or(events.len() as u64);
            if to < from {
                return Err("`to` is before `from`".to_string().into());
            }
            let list: Vec<Value> = events
                .iter()
                .filter(|e| e.seq >= from && e.seq < to)
                .take(MAX_EVENTS as usize)
                .map(|e| e.to_value())
                .collect();
            Reply::ok(id, Value::Array(list))
        }
        c if c.starts_with("write-") => return Err(Failure::ReadOnly),
        other => return Err(format!("unknown command `{other}`").into()),
    };
    Ok(reply)
}
