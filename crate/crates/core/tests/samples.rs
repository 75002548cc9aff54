mod common;

use common::*;
use ervm::counter::{CounterConfig, CounterProfile};
use ervm::engine::{replay, ExitReason, ReplayOptions};
use ervm::guest::Sample;

#[test]
fn samples_record_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    for sample in [Sample::Echo, Sample::Racey] {
        let r = record_sample(sample, 0, CounterConfig::all(CounterProfile::Exact), dir.path());
        let s = stats(&r.trace());
        let tx = String::from_utf8_lossy(&r.outcome.devices.console.tx).to_string();
        eprintln!("{}: {:?} {:?} tx={tx:?}", sample.name(), r.outcome.summary, s);
        assert_eq!(r.outcome.summary.exit_reason, ExitReason::Halted);
        let rep = replay(&r.log, &r.image.kernel, &r.image.disk, &ReplayOptions::default()).unwrap();
        assert!(rep.same_outcome(&r.outcome.summary), "{rep:?}");
    }
}
