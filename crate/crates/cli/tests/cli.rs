use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn ervm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ervm"))
}

fn run(args: &[&str]) -> Output {
    ervm().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn guest_src(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/guest").join(name).display().to_string()
}

struct Guest {
    kernel: String,
    disk: String,
    stim: String,
}

fn sample(dir: &Path, name: &str) -> Guest {
    let out = run(&["sample", name, "-o", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let p = |f: String| dir.join(f).display().to_string();
    Guest {
        kernel: p(format!("{name}-kernel.img")),
        disk: p(format!("{name}-disk.img")),
        stim: p(format!("{name}.stim")),
    }
}

fn record(g: &Guest, log: &Path, clock: &str) -> Output {
    let out = run(&[
        "record",
        "--kernel",
        &g.kernel,
        "--disk",
        &g.disk,
        "--stimulus",
        &g.stim,
        "--out",
        log.to_str().unwrap(),
        "--clock",
        clock,
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    out
}

fn replay(g: &Guest, log: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["replay", "--log", log.to_str().unwrap(), "--kernel", &g.kernel, "--disk", &g.disk];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn record_then_replay_reproduces_console_output() {
    let dir = tempfile::tempdir().unwrap();
    let g = sample(dir.path(), "echo");
    let log = dir.path().join("echo.log");
    let rec = record(&g, &log, "sim:4000");
    assert!(!rec.stdout.is_empty());
    assert!(text(&rec.stderr).contains("recorded: halted"));

    let rep = replay(&g, &log, &[]);
    assert_eq!(code(&rep), 0, "{}", text(&rep.stderr));
    assert_eq!(rep.stdout, rec.stdout);
    assert!(text(&rep.stderr).contains("replayed: halted"));

    let fast = replay(&g, &log, &["--verify-only"]);
    assert_eq!(code(&fast), 0, "{}", text(&fast.stderr));
    assert!(text(&fast.stderr).contains("segments"));

    let ppc = replay(&g, &log, &["--counter-profile", "ppc"]);
    assert_eq!(code(&ppc), 0, "{}", text(&ppc.stderr));
}

#[test]
fn bad_inputs_get_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let g = sample(dir.path(), "echo");
    let log = dir.path().join("echo.log");
    record(&g, &log, "sim:4000");

    let mut disk = std::fs::read(&g.disk).unwrap();
    disk[0] ^= 0xff;
    let other = dir.path().join("other-disk.img");
    std::fs::write(&other, disk).unwrap();
    let wrong = Guest {
        disk: other.display().to_string(),
        ..sample(dir.path(), "echo")
    };
    let out = replay(&wrong, &log, &[]);
    assert_eq!(code(&out), 4, "{}", text(&out.stderr));

    let text_log = std::fs::read_to_string(&log).unwrap();
    let mut lines: Vec<&str> = text_log.lines().collect();
    let mid = lines.len() / 2;
    lines[mid] = "{not json";
    let corrupt = dir.path().join("corrupt.log");
    std::fs::write(&corrupt, lines.join("\n")).unwrap();
    assert_eq!(code(&replay(&g, &corrupt, &[])), 3);
    assert_eq!(code(&run(&["log", "dump", corrupt.to_str().unwrap()])), 3);

    // Cut short: no terminal event.
    let truncated = dir.path().join("truncated.log");
    std::fs::write(&truncated, text_log.lines().take(mid).collect::<Vec<_>>().join("\n")).unwrap();
    assert_eq!(code(&run(&["verify", truncated.to_str().unwrap(), log.to_str().unwrap()])), 3);

    assert_eq!(code(&run(&["record", "--kernel", &g.kernel])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["replay", "--log", "/nonexistent", "--kernel", &g.kernel, "--disk", &g.disk])), 1);
    let bad_clock = run(&[
        "record", "--kernel", &g.kernel, "--disk", &g.disk, "--stimulus", &g.stim, "--out", "/dev/null", "--clock",
        "sim:x",
    ]);
    assert_eq!(code(&bad_clock), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn flaky_counter_is_refused_without_the_override() {
    let dir = tempfile::tempdir().unwrap();
    let g = sample(dir.path(), "racey");
    let log = dir.path().join("flaky.log");
    let base = [
        "record",
        "--kernel",
        &g.kernel,
        "--disk",
        &g.disk,
        "--stimulus",
        &g.stim,
        "--out",
        log.to_str().unwrap(),
        "--clock",
        "sim:4000",
        "--counter-profile",
        "x86-flaky",
        "--flaky-seed",
        "3",
    ];
    assert_eq!(code(&run(&base)), 1);
    let mut forced = base.to_vec();
    forced.push("--allow-unusable-counter");
    assert_eq!(code(&run(&forced)), 0);
    let out = replay(&g, &log, &[]);
    assert_eq!(code(&out), 2, "{}", text(&out.stderr));
}

#[test]
fn log_dump_prints_header_then_events_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let g = sample(dir.path(), "echo");
    let log = dir.path().join("echo.log");
    record(&g, &log, "sim:4000");

    let out = run(&["log", "dump", log.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let dump = text(&out.stdout);
    let mut lines = dump.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert!(header.get("kernel_image_hash").is_some());
    let seqs: Vec<u64> = lines
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["seq"].as_u64().unwrap())
        .collect();
    assert!(seqs.len() > 50);
    assert!(seqs.iter().enumerate().all(|(i, &s)| s == i as u64));

    let out = run(&["log", "dump", log.to_str().unwrap(), "--from", "5", "--to", "9"]);
    let window: Vec<String> = text(&out.stdout).lines().skip(1).map(String::from).collect();
    assert_eq!(window.len(), 4);
    assert!(window[0].contains("\"seq\":5"));
}

#[test]
fn verify_reports_identity_and_first_difference() {
    let dir = tempfile::tempdir().unwrap();
    let g = sample(dir.path(), "racey");
    let a = dir.path().join("a.log");
    let b = dir.path().join("b.log");
    let again = dir.path().join("again.log");
    record(&g, &a, "sim:4000");
    record(&g, &again, "sim:4000");
    record(&g, &b, "sim:4000:997");

    let same = run(&["verify", a.to_str().unwrap(), again.to_str().unwrap()]);
    assert_eq!(code(&same), 0);
    assert!(text(&same.stdout).starts_with("identical"));

    let diff = run(&["verify", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(code(&diff), 2);
    assert!(text(&diff.stdout).contains("first difference at seq"), "{}", text(&diff.stdout));

    // What replay observes is what was recorded.
    let shadow = dir.path().join("shadow.log");
    let rep = replay(&g, &a, &["--shadow-log", shadow.to_str().unwrap()]);
    assert_eq!(code(&rep), 0);
    let check = run(&["verify", a.to_str().unwrap(), shadow.to_str().unwrap()]);
    assert_eq!(code(&check), 0, "{}", text(&check.stdout));
}

#[test]
fn asm_builds_bootable_images_and_rejects_bad_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f).display().to_string();
    let kernel = guest_src("kernel.s");
    let echo = format!("echo={}", guest_src("echo.s"));
    let compute = format!("compute={}", guest_src("compute.s"));
    let out = run(&["asm", &kernel, "-o", &d("k.img"), "--disk", &d("d.img"), "--task", &echo, "--task", &compute]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let syms = std::fs::read_to_string(d("k.img.sym")).unwrap();
    assert!(syms.contains("echo."), "{syms}");

    // Same sources as the built-in sample, so the same bytes.
    let g = sample(dir.path(), "echo");
    assert_eq!(std::fs::read(d("k.img")).unwrap(), std::fs::read(&g.kernel).unwrap());
    assert_eq!(std::fs::read(d("d.img")).unwrap(), std::fs::read(&g.disk).unwrap());

    let many: Vec<String> = (0..9).map(|i| format!("t{i}={}", guest_src("compute.s"))).collect();
    let mut args = vec!["asm".to_string(), kernel.clone(), "-o".into(), d("k9.img"), "--disk".into(), d("d9.img")];
    for m in &many {
        args.push("--task".into());
        args.push(m.clone());
    }
    let out = ervm().args(&args).output().unwrap();
    assert_eq!(code(&out), 5, "{}", text(&out.stderr));

    std::fs::write(d("bad.s"), "    frob r1, r2\n").unwrap();
    assert_eq!(code(&run(&["asm", &d("bad.s"), "-o", &d("bad.img")])), 1);

    std::fs::write(d("lone.s"), "start:\n    addi r1, r0, 1\n    halt\n").unwrap();
    let out = run(&["asm", &d("lone.s"), "-o", &d("lone.img"), "--base", "0x100"]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    assert_eq!(std::fs::read(d("lone.img")).unwrap().len(), 8);
    assert!(std::fs::read_to_string(d("lone.img.sym")).unwrap().contains("start"));
}

fn debug_session(g: &Guest, log: &Path, script: &str) -> Output {
    let mut child = ervm()
        .args(["debug", "--log", log.to_str().unwrap(), "--kernel", &g.kernel, "--disk", &g.disk])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(script.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

#[test]
fn debug_repl_drives_a_replay() {
    let dir = tempfile::tempdir().unwrap();
    let g = sample(dir.path(), "racey");
    let log = dir.path().join("racey.log");
    record(&g, &log, "sim:4000");

    let out = debug_session(
        &g,
        &log,
        "help\nb racey0.loop 0\nbl\nc\nwhere\ntasks\nregs\ns\nrs\nwhere\nx racey0.loop 8\nevents 0 3\nhash\nwat\nq\n",
    );
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let s = text(&out.stdout);
    assert!(s.contains("breakpoint 1 at"), "{s}");
    assert!(s.contains("stopped (breakpoint)"), "{s}");
    assert!(s.contains("<racey0.loop>"), "{s}");
    assert!(s.contains("error: unknown command"), "{s}");
    let wheres: Vec<&str> = s.lines().filter(|l| l.starts_with("pc ")).collect();
    assert_eq!(wheres.len(), 2);
    assert_eq!(wheres[0], wheres[1], "step then reverse-step returns to the same place");
    assert_eq!(s.lines().filter(|l| l.starts_with('{') && l.contains("\"seq\":")).count(), 3);

    // Stop positions are a function of the log alone.
    let again = debug_session(&g, &log, "b racey0.loop 0\nc\nc\ngoto 100000\nrs\n");
    let again2 = debug_session(&g, &log, "b racey0.loop 0\nc\nc\ngoto 100000\nrs\n");
    assert_eq!(code(&again), 0);
    assert_eq!(again.stdout, again2.stdout);

    // Reversing at the very start is refused but leaves the session usable.
    let start = debug_session(&g, &log, "rs\nwhere\n");
    assert_eq!(code(&start), 0);
    let s = text(&start.stdout);
    assert!(s.contains("error:"), "{s}");
    assert!(s.contains("icount 0"), "{s}");
}
