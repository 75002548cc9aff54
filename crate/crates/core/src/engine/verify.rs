use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::par::Exec;
use crate::trace::TraceLog;

use super::{Boundary, EngineError, ExitReason, ReplayOptions, Replayer, RunSummary};

#[derive(Debug, Clone)]
pub struct SegmentReport {
    /// Number of independently replayed segments.
    pub segments: usize,
    pub summary: RunSummary,
}

/// Verify a log by replaying every checkpoint-to-checkpoint segment on its
/// own, in parallel when `exec` allows. Each segment starts from a restored
/// checkpoint and must reproduce every event up to and including the next
/// checkpoint's state hash. The earliest divergence wins.
pub fn verify_segments(log_path: &Path, kernel: &[u8], disk: &[u8], exec: Exec) -> Result<SegmentReport, EngineError> {
    let started = Instant::now();
    let log = Arc::new(TraceLog::open(log_path)?);
    // Fails early on image mismatch or an incomplete log.
    let probe = Replayer::new(log.clone(), kernel, disk, &ReplayOptions::default())?;
    let mut starts = vec![0u64];
    starts.extend(probe.checkpoints().iter().copied().filter(|&c| c > 0));
    drop(probe);
    let n = starts.len();
    let jobs: Vec<(u64, Option<u64>)> = (0..n).map(|i| (starts[i], starts.get(i + 1).copied())).collect();
    let results = exec.map(jobs, |(start, end)| -> Result<Option<RunSummary>, EngineError> {
        let mut r = Replayer::new(log.clone(), kernel, disk, &ReplayOptions::default())?;
        if start > 0 {
            r.restore(start)?;
        }
        match end {
            Some(end) => match r.run_while(|r| r.retired() < end) {
                Ok(Boundary::Running) => Ok(None),
                Ok(Boundary::Finished(_)) => Ok(Some(r.run_to_end())),
                Err(_) => Ok(Some(r.run_to_end())),
            },
            None => Ok(Some(r.run_to_end())),
        }
    });
    let mut last = None;
    for res in results {
        if let Some(summary) = res? {
            let stop = summary.exit_reason == ExitReason::Divergence;
            last = Some(summary);
            if stop {
                break;
            }
        }
    }
    let mut summary = last.expect("the final segment always summarizes");
    summary.wall_time_ms = started.elapsed().as_millis() as u64;
    Ok(SegmentReport { segments: n, summary })
}
