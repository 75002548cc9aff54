use criterion::{criterion_group, criterion_main, Criterion};
use ervm::counter::CounterConfig;
use ervm::devices::{SimClock, Stimulus};
use ervm::engine::{record, replay, verify_segments, RecordOptions, ReplayOptions};
use ervm::guest::Sample;
use ervm::par::Exec;

fn bench(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let img = Sample::Ticker.build().unwrap();
    let log = dir.path().join("ticker.log");
    let opts = RecordOptions {
        config: CounterConfig::default(),
        max_instructions: 5_000_000,
        ..RecordOptions::default()
    };
    record(
        &img.kernel,
        &img.disk,
        Stimulus::script(Sample::Ticker.stimulus(20)),
        &mut SimClock::new(4000, 0),
        &log,
        &opts,
    )
    .unwrap();

    let mut g = c.benchmark_group("verify");
    g.sample_size(10);
    g.bench_function("replay", |b| {
        b.iter(|| replay(&log, &img.kernel, &img.disk, &ReplayOptions::default()).unwrap())
    });
    for (name, exec) in [("segments_sequential", Exec::Sequential), ("segments_parallel", Exec::Parallel)] {
        g.bench_function(name, |b| b.iter(|| verify_segments(&log, &img.kernel, &img.disk, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
