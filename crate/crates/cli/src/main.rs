//! `ervm`: assemble guests, record and replay runs, inspect logs, debug.

mod compare;
mod repl;

use std::fs;
use std::io::Read;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ervm::counter::{CounterConfig, CounterProfile};
use ervm::debug::{serve_tcp, serve_ws, Hub, Session};
use ervm::devices::{HostClock, RealClock, SimClock, Stimulus, StimulusScript};
use ervm::engine::{self, verify_segments, EngineError, ExitReason, RecordOptions, ReplayOptions, Replayer, RunSummary};
use ervm::guest::{abi, assemble_with, build_guest_image, ImageError, Sample, SymbolTable, TaskSource};
use ervm::par::Exec;
use ervm::trace::{TraceError, TraceLog};

/// Process exit codes.
pub mod code {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const DIVERGENCE: u8 = 2;
    pub const CORRUPT_LOG: u8 = 3;
    pub const IMAGE_MISMATCH: u8 = 4;
    pub const GUEST_LAYOUT: u8 = 5;
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl std::fmt::Display) -> Failure {
        Failure {
            code,
            message: message.to_string(),
        }
    }

    fn usage(message: impl std::fmt::Display) -> Failure {
        Failure::new(code::USAGE, message)
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        let code = match &e {
            EngineError::Divergence(_) => code::DIVERGENCE,
            EngineError::Trace(t) => return t_failure(t, e.to_string()),
            EngineError::IncompleteLog | EngineError::BadCheckpoint { .. } => code::CORRUPT_LOG,
            EngineError::Reset(_) => code::GUEST_LAYOUT,
            EngineError::Counter(_) | EngineError::Device(_) => code::USAGE,
        };
        Failure::new(code, e)
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        let msg = e.to_string();
        t_failure(&e, msg)
    }
}

fn t_failure(e: &TraceError, message: String) -> Failure {
    let code = match e {
        TraceError::Io { .. } => code::USAGE,
        TraceError::ImageMismatch { .. } => code::IMAGE_MISMATCH,
        _ => code::CORRUPT_LOG,
    };
    Failure { code, message }
}

type Result<T, E = Failure> = std::result::Result<T, E>;

#[derive(Parser)]
#[command(name = "ervm", version, about = "Deterministic record/replay VM with a time-travel debugger")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a source file. With `--task`, the source is a kernel and a
    /// bootable disk is built from the tasks.
    Asm(AsmArgs),
    /// Write a built-in sample guest (kernel, disk, symbols, stimulus).
    Sample(SampleArgs),
    /// Run a guest live and log every nondeterministic input.
    Record(RecordArgs),
    /// Re-execute a log, checking every logged event and state hash.
    Replay(ReplayArgs),
    /// Log inspection.
    #[command(subcommand)]
    Log(LogCommand),
    /// Replay under debugger control, paused at icount 0.
    Debug(DebugArgs),
    /// Compare two logs and report the first difference.
    Verify { a: PathBuf, b: PathBuf },
}

#[derive(Args)]
struct AsmArgs {
    src: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Task program `NAME=FILE`; repeatable, in task order.
    #[arg(long = "task", value_name = "NAME=FILE")]
    tasks: Vec<String>,
    /// Where to write the disk image (required with `--task`).
    #[arg(long)]
    disk: Option<PathBuf>,
    /// Load address for a lone source.
    #[arg(long, default_value = "0", value_parser = parse_u32)]
    base: u32,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(value_parser = ["echo", "racey", "ticker"])]
    name: String,
    /// Output directory.
    #[arg(short, long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Exact,
    Ppc,
    X86Flaky,
}

#[derive(Args)]
struct GuestArgs {
    #[arg(long)]
    kernel: PathBuf,
    #[arg(long)]
    disk: PathBuf,
}

#[derive(Args)]
struct RecordArgs {
    #[command(flatten)]
    guest: GuestArgs,
    /// Stimulus script (`AT <ms> CONSOLE <hex bytes>` per line).
    #[arg(long, required_unless_present = "interactive")]
    stimulus: Option<PathBuf>,
    /// Read console input from this terminal instead of a script.
    #[arg(long, conflicts_with = "stimulus")]
    interactive: bool,
    #[arg(long, value_enum, default_value = "exact")]
    counter_profile: Profile,
    /// Noise seed for the x86-flaky profile.
    #[arg(long, default_value_t = 0)]
    flaky_seed: u64,
    /// Required to record with a counter that cannot be compensated.
    #[arg(long)]
    allow_unusable_counter: bool,
    /// Count only user-mode instructions with MARK set.
    #[arg(long)]
    marked: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "max-instr", default_value_t = engine::DEFAULT_MAX_INSTRUCTIONS)]
    max_instr: u64,
    #[arg(long, default_value_t = ervm::trace::DEFAULT_CHECKPOINT_INTERVAL)]
    checkpoint_interval: u64,
    /// Host clock: `real`, or `sim:RATE[:PHASE]` (RATE instructions per
    /// millisecond, PHASE instructions of offset).
    #[arg(long, default_value = "real")]
    clock: String,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    log: PathBuf,
    #[command(flatten)]
    guest: GuestArgs,
    /// Only check the log; checkpoint segments are verified in parallel.
    #[arg(long)]
    verify_only: bool,
    /// Write the events replay observes to this log.
    #[arg(long, conflicts_with = "verify_only")]
    shadow_log: Option<PathBuf>,
    /// Replay with a different counter profile than the recording's.
    #[arg(long, value_enum)]
    counter_profile: Option<Profile>,
}

#[derive(Subcommand)]
enum LogCommand {
    /// Print the header, then events with `FROM <= seq < TO`.
    Dump {
        log: PathBuf,
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
    },
}

#[derive(Args)]
struct DebugArgs {
    #[arg(long)]
    log: PathBuf,
    #[command(flatten)]
    guest: GuestArgs,
    /// Serve newline-delimited JSON on HOST:PORT.
    #[arg(long)]
    listen: Option<String>,
    /// Serve the same protocol over WebSocket on HOST:PORT.
    #[arg(long)]
    ws: Option<String>,
    /// Symbol file (defaults to `<kernel>.sym` when present).
    #[arg(long)]
    symbols: Option<PathBuf>,
}

fn parse_u32(s: &str) -> Result<u32, String> {
    ervm::guest::asm::parse_number(s)
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| format!("`{s}` is not a 32-bit number"))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn sym_path(image: &Path) -> PathBuf {
    let mut s = image.as_os_str().to_os_string();
    s.push(".sym");
    PathBuf::from(s)
}

fn profile(p: Profile, seed: u64) -> CounterProfile {
    match p {
        Profile::Exact => CounterProfile::Exact,
        Profile::Ppc => CounterProfile::PpcMpc7441,
        Profile::X86Flaky => CounterProfile::X86Flaky { seed },
    }
}

fn image_failure(e: ImageError) -> Failure {
    match e {
        ImageError::Asm { .. } | ImageError::DuplicateName(_) => Failure::usage(e),
        _ => Failure::new(code::GUEST_LAYOUT, e),
    }
}

fn asm(a: AsmArgs) -> Result<()> {
    let src = read_text(&a.src)?;
    let symbols = if a.tasks.is_empty() {
        let p = assemble_with(&src, a.base, &abi::symbols())
            .map_err(|e| Failure::usage(format!("{}: {e}", a.src.display())))?;
        write(&a.out, &p.image)?;
        p.labels.iter().map(|l| (p.symbols[l], l.clone())).collect::<SymbolTable>()
    } else {
        let disk = a.disk.as_ref().ok_or_else(|| Failure::usage("--task needs --disk"))?;
        let mut named = Vec::new();
        for t in &a.tasks {
            let (name, file) = t
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("--task `{t}`: expected NAME=FILE")))?;
            named.push((name.to_string(), read_text(Path::new(file))?));
        }
        let sources: Vec<TaskSource<'_>> = named.iter().map(|(name, source)| TaskSource { name, source }).collect();
        let img = build_guest_image(&src, &sources).map_err(image_failure)?;
        write(&a.out, &img.kernel)?;
        write(disk, &img.disk)?;
        img.symbol_table()
    };
    write(&sym_path(&a.out), symbols.to_string())?;
    eprintln!("wrote {} ({} symbols)", a.out.display(), symbols.len());
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let s = Sample::from_name(&a.name).expect("clap checked the name");
    let img = s.build().map_err(image_failure)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::usage(format!("{}: {e}", a.out.display())))?;
    let kernel = a.out.join(format!("{}-kernel.img", a.name));
    write(&kernel, &img.kernel)?;
    write(&a.out.join(format!("{}-disk.img", a.name)), &img.disk)?;
    write(&sym_path(&kernel), img.symbol_table().to_string())?;
    write(&a.out.join(format!("{}.stim", a.name)), s.stimulus(20).to_string())?;
    eprintln!("wrote {} sample to {}", a.name, a.out.display());
    Ok(())
}

fn parse_clock(s: &str) -> Result<Box<dyn HostClock>> {
    if s == "real" {
        return Ok(Box::new(RealClock::new()));
    }
    let bad = || Failure::usage(format!("--clock `{s}`: expected `real` or `sim:RATE[:PHASE]`"));
    let rest = s.strip_prefix("sim:").ok_or_else(bad)?;
    let mut parts = rest.split(':').map(|p| p.parse::<u64>());
    let rate = parts.next().and_then(|r| r.ok()).filter(|&r| r > 0).ok_or_else(bad)?;
    let phase = match parts.next() {
        Some(p) => p.map_err(|_| bad())?,
        None => 0,
    };
    if parts.next().is_some() {
        return Err(bad());
    }
    Ok(Box::new(SimClock::new(rate, phase)))
}

/// Host console bytes, pushed as they are typed.
fn stdin_stimulus() -> Stimulus {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut buf = [0u8; 256];
        let mut stdin = std::io::stdin().lock();
        while let Ok(n) = stdin.read(&mut buf) {
            if n == 0 || tx.send(buf[..n].to_vec()).is_err() {
                break;
            }
        }
    });
    Stimulus::Channel(rx)
}

fn print_summary(verb: &str, s: &RunSummary) {
    eprintln!(
        "{verb}: {} after {} instructions (icount {}), {} events, final hash {}, {} ms",
        s.exit_reason,
        s.final_retired,
        s.final_icount,
        s.event_count,
        s.final_state_hash.to_hex(),
        s.wall_time_ms
    );
}

fn record(a: RecordArgs) -> Result<()> {
    let kernel = read(&a.guest.kernel)?;
    let disk = read(&a.guest.disk)?;
    let stimulus = match &a.stimulus {
        Some(p) => Stimulus::script(StimulusScript::parse(&read_text(p)?).map_err(Failure::usage)?),
        None => stdin_stimulus(),
    };
    let mut clock = parse_clock(&a.clock)?;
    let p = profile(a.counter_profile, a.flaky_seed);
    let config = if a.marked {
        CounterConfig::marked_user(p)
    } else {
        CounterConfig::all(p)
    };
    if a.checkpoint_interval == 0 {
        return Err(Failure::usage("--checkpoint-interval must be positive"));
    }
    let opts = RecordOptions {
        config,
        allow_unusable_counter: a.allow_unusable_counter,
        max_instructions: a.max_instr,
        checkpoint_interval: a.checkpoint_interval,
        ..RecordOptions::default()
    };
    let out = engine::record(&kernel, &disk, stimulus, clock.as_mut(), &a.out, &opts)?;
    print_console(&out.devices.console.tx);
    print_summary("recorded", &out.summary);
    Ok(())
}

fn print_console(tx: &[u8]) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(tx);
    let _ = out.flush();
}

fn replay(a: ReplayArgs) -> Result<()> {
    let kernel = read(&a.guest.kernel)?;
    let disk = read(&a.guest.disk)?;
    let summary = if a.verify_only {
        let report = verify_segments(&a.log, &kernel, &disk, Exec::default())?;
        eprintln!("checked {} segments", report.segments);
        report.summary
    } else {
        let opts = ReplayOptions {
            counter_profile: a.counter_profile.map(|p| profile(p, 0)),
            shadow_log: a.shadow_log,
        };
        let mut r = Replayer::open(&a.log, &kernel, &disk, &opts)?;
        let s = r.run_to_end();
        print_console(&r.devices().console.tx);
        s
    };
    print_summary("replayed", &summary);
    if let Some(d) = &summary.divergence {
        return Err(Failure::new(code::DIVERGENCE, d));
    }
    if summary.exit_reason == ExitReason::Divergence {
        return Err(Failure::new(code::DIVERGENCE, "replay diverged"));
    }
    Ok(())
}

fn log_dump(log: &Path, from: Option<u64>, to: Option<u64>) -> Result<()> {
    let log = TraceLog::open(log)?;
    println!("{}", serde_json::to_string(&log.header).expect("headers serialize"));
    let (from, to) = (from.unwrap_or(0), to.unwrap_or(u64::MAX));
    for e in log.events.iter().filter(|e| e.seq >= from && e.seq < to) {
        println!("{e}");
    }
    Ok(())
}

fn load_symbols(a: &DebugArgs) -> Result<SymbolTable> {
    let path = match &a.symbols {
        Some(p) => p.clone(),
        None => {
            let p = sym_path(&a.guest.kernel);
            if !p.exists() {
                return Ok(SymbolTable::new());
            }
            p
        }
    };
    SymbolTable::parse(&read_text(&path)?).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn bind(addr: &str) -> Result<TcpListener> {
    TcpListener::bind(addr).map_err(|e| Failure::usage(format!("cannot listen on {addr}: {e}")))
}

fn debug(a: DebugArgs) -> Result<()> {
    let kernel = read(&a.guest.kernel)?;
    let disk = read(&a.guest.disk)?;
    let symbols = load_symbols(&a)?;
    let replayer = Replayer::open(&a.log, &kernel, &disk, &ReplayOptions::default())?;
    let session = Session::new(replayer, symbols.clone()).map_err(|e| Failure::new(code::DIVERGENCE, e))?;
    let hub = Hub::start(session);
    let mut serving = false;
    if let Some(addr) = &a.listen {
        let l = bind(addr)?;
        eprintln!("protocol on tcp://{}", l.local_addr().map_or(addr.clone(), |a| a.to_string()));
        serve_tcp(l, hub.clone());
        serving = true;
    }
    if let Some(addr) = &a.ws {
        let l = bind(addr)?;
        eprintln!("protocol on ws://{}", l.local_addr().map_or(addr.clone(), |a| a.to_string()));
        serve_ws(l, hub.clone());
        serving = true;
    }
    let outcome = repl::run(&hub, &symbols, std::io::stdin().lock(), std::io::stdout());
    if outcome == repl::Exit::Eof && serving {
        // No terminal; keep serving remote clients.
        eprintln!("stdin closed; serving until interrupted");
        loop {
            std::thread::park();
        }
    }
    let session = hub.shutdown();
    match (outcome, session) {
        (_, Some(s)) if s.ended() => Err(Failure::new(code::DIVERGENCE, "replay diverged during the session")),
        (repl::Exit::Layout, _) => Err(Failure::new(code::GUEST_LAYOUT, "guest task table is not laid out as expected")),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Asm(a) => asm(a),
        Command::Sample(a) => sample(a),
        Command::Record(a) => record(a),
        Command::Replay(a) => replay(a),
        Command::Log(LogCommand::Dump { log, from, to }) => log_dump(&log, from, to),
        Command::Debug(a) => debug(a),
        Command::Verify { a, b } => compare::run(&a, &b),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { code::USAGE } else { code::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(code::OK),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
