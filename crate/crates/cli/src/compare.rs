//! `ervm verify A B`.

use std::path::Path;

use ervm::trace::TraceLog;
use serde_json::Value;

use crate::{code, Failure};

fn open(path: &Path) -> Result<TraceLog, Failure> {
    let log = TraceLog::open(path)?;
    if !log.is_complete() {
        return Err(Failure::new(
            code::CORRUPT_LOG,
            format!("{} is incomplete: no halt or limit event", path.display()),
        ));
    }
    Ok(log)
}

/// The first way `a` and `b` differ, if any.
pub fn first_difference(a: &TraceLog, b: &TraceLog) -> Option<String> {
    if !a.header.same_run_parameters(&b.header) {
        let (Value::Object(ha), Value::Object(hb)) = (
            serde_json::to_value(&a.header).expect("headers serialize"),
            serde_json::to_value(&b.header).expect("headers serialize"),
        ) else {
            unreachable!("headers are objects")
        };
        let field = ha
            .iter()
            .find(|(k, v)| *k != "created_at" && hb.get(*k) != Some(v))
            .map(|(k, v)| format!("header field {k}: {v} vs {}", hb.get(k).unwrap_or(&Value::Null)));
        return Some(field.unwrap_or_else(|| "headers differ".into()));
    }
    for (x, y) in a.events.iter().zip(&b.events) {
        if x != y {
            return Some(format!("first difference at seq {}:\n  {x}\n  {y}", x.seq.min(y.seq)));
        }
    }
    let (na, nb) = (a.events.len(), b.events.len());
    (na != nb).then(|| format!("one log ends early: {na} vs {nb} events"))
}

pub fn run(a: &Path, b: &Path) -> Result<(), Failure> {
    let (la, lb) = (open(a)?, open(b)?);
    match first_difference(&la, &lb) {
        None => {
            println!("identical ({} events)", la.events.len());
            Ok(())
        }
        Some(d) => {
            println!("{d}");
            Err(Failure::new(code::DIVERGENCE, "logs differ"))
        }
    }
}
