//! Line-oriented debugger front end. Each command becomes one protocol
//! request on an in-process connection, so the REPL sees exactly what remote
//! clients see.

use std::io::{BufRead, Write};

use ervm::debug::Hub;
use ervm::guest::SymbolTable;
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    /// `q`.
    Quit,
    /// Input ran out.
    Eof,
    /// The last failed command hit a malformed task table.
    Layout,
}

const HELP: &str = "\
tasks              task table
regs [TASK]        registers (running context, or a task's saved context)
x ADDR LEN         memory dump
b ADDR [TASK]      breakpoint (ADDR may be a symbol)
d ID               delete breakpoint
bl                 list breakpoints
c                  continue
s [TASK]           step one instruction of TASK (-1 = kernel)
rs [TASK]          reverse-step
goto ICOUNT        run forwards or backwards to an instruction count
where              current location
events A B         log events with A <= seq < B
hash               state hash
q                  quit";

fn addr(symbols: &SymbolTable, s: &str) -> Result<Value, String> {
    if let Some(a) = symbols.lookup(s) {
        return Ok(json!(a));
    }
    ervm::guest::asm::parse_number(s)
        .filter(|n| u32::try_from(*n).is_ok())
        .map(|n| json!(n))
        .ok_or_else(|| format!("`{s}` is neither a number nor a known symbol"))
}

fn num(s: &str) -> Result<Value, String> {
    ervm::guest::asm::parse_number(s)
        .map(|n| json!(n))
        .ok_or_else(|| format!("`{s}` is not a number"))
}

/// Translate one command line into a protocol request.
pub fn parse(line: &str, symbols: &SymbolTable) -> Result<Option<Value>, String> {
    let words: Vec<&str> = line.split_whitespace().collect();
    let Some((&cmd, args)) = words.split_first() else {
        return Ok(None);
    };
    let arity = |lo: usize, hi: usize| {
        if args.len() < lo || args.len() > hi {
            Err(format!("`{cmd}` takes {lo}..={hi} arguments; try `help`"))
        } else {
            Ok(())
        }
    };
    let task = |i: usize| args.get(i).map(|t| num(t)).transpose();
    let req = match cmd {
        "tasks" => json!({"cmd": "tasks"}),
        "regs" => {
            arity(0, 1)?;
            json!({"cmd": "regs", "args": {"task_id": task(0)?}})
        }
        "x" => {
            arity(2, 2)?;
            json!({"cmd": "read-mem", "args": {"addr": addr(symbols, args[0])?, "len": num(args[1])?}})
        }
        "b" => {
            arity(1, 2)?;
            json!({"cmd": "break-set", "args": {"addr": addr(symbols, args[0])?, "task_id": task(1)?}})
        }
        "d" => {
            arity(1, 1)?;
            json!({"cmd": "break-clear", "args": {"id": num(args[0])?}})
        }
        "bl" => json!({"cmd": "break-list"}),
        "c" => json!({"cmd": "continue"}),
        "s" | "rs" => {
            arity(0, 1)?;
            let name = if cmd == "s" { "step" } else { "reverse-step" };
            json!({"cmd": name, "args": {"task_id": task(0)?}})
        }
        "goto" => {
            arity(1, 1)?;
            json!({"cmd": "run-to-icount", "args": {"n": num(args[0])?}})
        }
        "where" => json!({"cmd": "where"}),
        "events" => {
            arity(2, 2)?;
            json!({"cmd": "events", "args": {"from": num(args[0])?, "to": num(args[1])?}})
        }
        "hash" => json!({"cmd": "hash"}),
        "q" | "quit" => json!({"cmd": "detach"}),
        _ => return Err(format!("unknown command `{cmd}`; try `help`")),
    };
    Ok(Some(req))
}

fn hexdump(addr: u64, hex: &str) -> String {
    let bytes: Vec<&str> = (0..hex.len()).step_by(2).map(|i| &hex[i..i + 2]).collect();
    bytes
        .chunks(16)
        .enumerate()
        .map(|(i, row)| format!("{:08x}  {}", addr + 16 * i as u64, row.join(" ")))
        .collect::<Vec<_>>()
        .join("\n")
}

fn hexnum(v: &Value) -> String {
    v.as_u64().map_or_else(|| v.to_string(), |n| format!("{n:#010x}"))
}

fn regs(r: &Value) -> String {
    let r: Vec<String> = r
        .as_array()
        .map(|a| a.iter().map(hexnum).collect())
        .unwrap_or_default();
    r.chunks(4)
        .enumerate()
        .map(|(row, c)| {
            c.iter()
                .enumerate()
                .map(|(i, v)| format!("r{:<2} {v}", row * 4 + i))
                .collect::<Vec<_>>()
                .join("  ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn describe_pc(symbols: &SymbolTable, pc: u64) -> String {
    match symbols.nearest(pc as u32) {
        Some((name, 0)) => format!(" <{name}>"),
        Some((name, off)) => format!(" <{name}+{off:#x}>"),
        None => String::new(),
    }
}

/// Human-readable rendering of a successful response to `cmd`.
pub fn render(cmd: &str, data: &Value, symbols: &SymbolTable) -> String {
    match cmd {
        "tasks" => {
            let rows: Vec<String> = data
                .as_array()
                .into_iter()
                .flatten()
                .map(|t| {
                    let pc = t["pc"].as_u64().unwrap_or(0);
                    format!(
                        "{} {:>2} {:<8} pc {}{}",
                        if t["is_current"] == true { "*" } else { " " },
                        t["task_id"],
                        t["state"].as_str().unwrap_or("?"),
                        hexnum(&t["pc"]),
                        describe_pc(symbols, pc)
                    )
                })
                .collect();
            if rows.is_empty() {
                "no tasks yet".into()
            } else {
                rows.join("\n")
            }
        }
        "regs" => {
            let pc = data["pc"].as_u64().unwrap_or(0);
            let mut s = format!("task {} pc {}{}", data["task_id"], hexnum(&data["pc"]), describe_pc(symbols, pc));
            if let Some(mode) = data["mode"].as_str() {
                s += &format!(" {mode} icount {}", data["icount"]);
            }
            s + "\n" + &regs(&data["r"])
        }
        "read-mem" => hexdump(data["addr"].as_u64().unwrap_or(0), data["hex"].as_str().unwrap_or("")),
        "break-set" => format!("breakpoint {} at {}", data["id"], hexnum(&data["addr"])),
        "break-clear" => format!("deleted breakpoint {}", data["id"]),
        "break-list" => {
            let rows: Vec<String> = data
                .as_array()
                .into_iter()
                .flatten()
                .map(|b| {
                    let task = if b["task_id"].is_null() { String::new() } else { format!(" task {}", b["task_id"]) };
                    let a = b["addr"].as_u64().unwrap_or(0);
                    format!("{:>3} {}{}{task}", b["id"], hexnum(&b["addr"]), describe_pc(symbols, a))
                })
                .collect();
            if rows.is_empty() {
                "no breakpoints".into()
            } else {
                rows.join("\n")
            }
        }
        "continue" | "step" | "reverse-step" | "run-to-icount" => {
            let pc = data["pc"].as_u64().unwrap_or(0);
            let mut s = format!(
                "stopped ({}) at icount {} pc {}{} task {}",
                data["reason"].as_str().unwrap_or("?"),
                data["icount"],
                hexnum(&data["pc"]),
                describe_pc(symbols, pc),
                data["task_id"]
            );
            if let Some(b) = data.get("breakpoint") {
                s += &format!(" breakpoint {b}");
            }
            s
        }
        "where" => {
            let sym = match (data["symbol"].as_str(), data["offset"].as_u64()) {
                (Some(n), Some(0)) => format!(" <{n}>"),
                (Some(n), Some(o)) => format!(" <{n}+{o:#x}>"),
                _ => String::new(),
            };
            format!(
                "pc {}{sym} {} task {} icount {}: {}",
                hexnum(&data["pc"]),
                data["mode"].as_str().unwrap_or("?"),
                data["task_id"],
                data["icount"],
                data["instruction"].as_str().unwrap_or("?")
            )
        }
        "events" => data
            .as_array()
            .into_iter()
            .flatten()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join("\n"),
        "hash" => format!("{} at icount {}", data["hash"].as_str().unwrap_or("?"), data["icount"]),
        _ => data.to_string(),
    }
}

pub fn run(hub: &Hub, symbols: &SymbolTable, input: impl BufRead, mut out: impl Write) -> Exit {
    let client = hub.connect();
    if let Some(hello) = client.recv().and_then(|h| serde_json::from_str::<Value>(&h).ok()) {
        let log = &hello["log"];
        let _ = writeln!(
            out,
            "protocol {}, {} events, final icount {}, counter {}, symbols: {}",
            hello["protocol"],
            log["events"],
            log["final_icount"],
            log["counter_profile"].as_str().unwrap_or("?"),
            hello["symbols"]["count"]
        );
        let _ = writeln!(out, "paused at icount 0; `help` lists commands");
    }
    let mut last = Exit::Eof;
    let mut next_id = 1u64;
    for line in input.lines() {
        let Ok(line) = line else { break };
        let line = line.trim();
        if line == "help" || line == "?" {
            let _ = writeln!(out, "{HELP}");
            continue;
        }
        let mut req = match parse(line, symbols) {
            Ok(Some(r)) => r,
            Ok(None) => continue,
            Err(e) => {
                let _ = writeln!(out, "error: {e}");
                continue;
            }
        };
        req["id"] = json!(next_id);
        next_id += 1;
        let cmd = req["cmd"].as_str().unwrap_or_default().to_string();
        // Stop broadcasts duplicate the response; other clients' stops are
        // reported as they arrive.
        let Some(resp) = client.request(&req, |_| {}) else {
            let _ = writeln!(out, "debug engine stopped");
            return Exit::Quit;
        };
        if cmd == "detach" {
            return if last == Exit::Layout { Exit::Layout } else { Exit::Quit };
        }
        if resp["ok"] == true {
            last = Exit::Eof;
            let _ = writeln!(out, "{}", render(&cmd, &resp["data"], symbols));
        } else {
            if resp["kind"] == "layout" {
                last = Exit::Layout;
            }
            let _ = writeln!(out, "error: {}", resp["error"].as_str().unwrap_or("?"));
        }
        let _ = out.flush();
    }
    if last == Exit::Layout {
        Exit::Layout
    } else {
        Exit::Eof
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commands_map_to_requests() {
        let mut syms = SymbolTable::new();
        syms.insert(0x10004, "racey0.loop");
        let p = |l: &str| parse(l, &syms).unwrap().unwrap();
        assert_eq!(p("b racey0.loop 0"), json!({"cmd": "break-set", "args": {"addr": 0x10004, "task_id": 0}}));
        assert_eq!(p("b 0x20"), json!({"cmd": "break-set", "args": {"addr": 0x20, "task_id": null}}));
        assert_eq!(p("x 0x1000 16"), json!({"cmd": "read-mem", "args": {"addr": 0x1000, "len": 16}}));
        assert_eq!(p("rs -1"), json!({"cmd": "reverse-step", "args": {"task_id": -1}}));
        assert_eq!(p("goto 5000"), json!({"cmd": "run-to-icount", "args": {"n": 5000}}));
        assert_eq!(p("events 3 9"), json!({"cmd": "events", "args": {"from": 3, "to": 9}}));
        assert_eq!(p("q"), json!({"cmd": "detach"}));
        assert!(parse("", &syms).unwrap().is_none());
        assert!(parse("b nowhere", &syms).is_err());
        assert!(parse("x 1", &syms).is_err());
        assert!(parse("launch", &syms).is_err());
    }

    #[test]
    fn hexdump_rows() {
        let d = hexdump(0x1000, &"ab".repeat(18));
        let lines: Vec<&str> = d.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("00001010  ab ab"));
    }
}
