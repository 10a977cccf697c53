use std::fs;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use busguard_core::bench::{monitor_config, run_suite, scenarios, splash_scenarios};
use busguard_core::capture::{export, load_trace, JsonlSink};
use busguard_core::eval::{evaluate, evaluate_files, EvalReport};
use busguard_core::simbot::{parse_kinds, GroundTruthLabel, Scenario};
use busguard_core::system::{MonitorConfig, System};
use busguard_gateway::{Gateway, GatewayConfig};

const TRACE: &str = "trace.jsonl";
const LABELS: &str = "labels.jsonl";
const ALARMS: &str = "alarms.jsonl";
const EVAL: &str = "eval.json";

/// Bad input the user can fix: missing files, unparseable config, bad flags.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "busguard", version, about = "Telemetry anomaly detection for pub-sub robots")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario through the full stack and write a run directory.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated injection kinds; replaces the scenario's own injections.
        #[arg(long)]
        inject: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Monitor config YAML; the shipped benchmark config by default.
        #[arg(long)]
        monitor: Option<PathBuf>,
        /// Pass invalid-data messages to the detectors.
        #[arg(long)]
        no_validity_filter: bool,
    },
    /// Score alarms against ground-truth labels.
    Eval {
        /// Run directory holding trace.jsonl, labels.jsonl and alarms.jsonl.
        #[arg(long, conflicts_with_all = ["trace", "labels", "alarms"])]
        run: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        alarms: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        window_ms: i64,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Convert a trace to csv, yaml or jsonl.
    Export {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Feed a recorded trace through the detection stack.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        monitor: Option<PathBuf>,
        #[arg(long)]
        no_validity_filter: bool,
        /// Write alarms.jsonl here; also scored when labels.jsonl sits next to the trace.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP and WebSocket API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        monitor: Option<PathBuf>,
        /// Simulated time per wall time.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long)]
        snapshot_dir: Option<PathBuf>,
    },
    /// Run the shipped benchmark suite.
    Bench {
        /// Also run the invalid-data suite with the filter off and on.
        #[arg(long)]
        splash: bool,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run {
            scenario,
            inject,
            seed,
            out,
            monitor,
            no_validity_filter,
        } => run(&scenario, inject.as_deref(), seed, &out, monitor.as_deref(), no_validity_filter),
        Cmd::Eval {
            run,
            trace,
            labels,
            alarms,
            window_ms,
            json,
        } => {
            let (t, l, a) = match (run, trace, labels, alarms) {
                (Some(dir), ..) => (dir.join(TRACE), dir.join(LABELS), dir.join(ALARMS)),
                (None, Some(t), Some(l), Some(a)) => (t, l, a),
                _ => return Err(config_err("give --run DIR or all of --trace, --labels and --alarms")),
            };
            for p in [&t, &l, &a] {
                if !p.exists() {
                    return Err(config_err(format!("{} not found", p.display())));
                }
            }
            let report = evaluate_files(&t, &l, &a, window_ms)?;
            print_report(&report, json)
        }
        Cmd::Export { trace, format, out } => {
            if !trace.exists() {
                return Err(config_err(format!("{} not found", trace.display())));
            }
            let n = export(&trace, &format, &out)?;
            println!("wrote {n} records to {}", out.display());
            Ok(())
        }
        Cmd::Replay {
            trace,
            monitor,
            no_validity_filter,
            out,
        } => replay(&trace, monitor.as_deref(), no_validity_filter, out.as_deref()),
        Cmd::Serve {
            addr,
            monitor,
            speed,
            snapshot_dir,
        } => {
            if !(speed > 0.0) {
                return Err(config_err("--speed must be positive"));
            }
            let gw = Gateway::new(GatewayConfig {
                monitor: load_monitor(monitor.as_deref())?,
                snapshot_dir,
                speed,
            })?;
            let rt = tokio::runtime::Runtime::new()?;
            println!("serving on http://{addr}/v1");
            rt.block_on(busguard_gateway::serve(gw, addr))?;
            Ok(())
        }
        Cmd::Bench { splash, json } => bench(splash, json),
    }
}

fn load_monitor(path: Option<&Path>) -> Result<MonitorConfig> {
    match path {
        None => Ok(monitor_config()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err(format!("monitor config {}: {e}", p.display())))?;
            MonitorConfig::from_yaml(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))
        }
    }
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("scenario file {}: {e}", path.display())))?;
    Scenario::from_yaml(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("create {}", path.display()))?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn print_report(r: &EvalReport, json: bool) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(r)?);
    } else {
        print!("{}", r.table());
    }
    Ok(())
}

fn run(scenario: &Path, inject: Option<&str>, seed: Option<u64>, out: &Path, monitor: Option<&Path>, no_filter: bool) -> Result<()> {
    let mut sc = load_scenario(scenario)?;
    let mut cfg = load_monitor(monitor)?;
    cfg.validity_filter = !no_filter;
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    if let Some(list) = inject {
        let kinds = parse_kinds(list).map_err(|e| config_err(e.to_string()))?;
        let seed = sc.seed;
        sc = sc.with_planned_injections(&kinds, seed);
    }
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let sink = JsonlSink::create(&out.join(TRACE))?;
    let mut sys = System::with_scenario(cfg.clone(), sc.clone(), Some(sink))?;
    sys.run_to_end()?;
    if let Some(stats) = sys.final_capture_stats() {
        if stats.capture_drops > 0 {
            eprintln!("warning: capture dropped {} records", stats.capture_drops);
        }
        if let Some(e) = &stats.sink_error {
            bail!("trace sink failed: {e}");
        }
    }
    let labels = sys.labels();
    write_jsonl(&out.join(LABELS), &labels)?;
    let mut w = BufWriter::new(fs::File::create(out.join(ALARMS))?);
    sys.desk().write_log(&mut w)?;
    let report = evaluate(&labels, sys.desk().alarms(), sc.duration_ms, cfg.features.window_ms);
    fs::write(out.join(EVAL), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{}: {} messages, {} frames, {} alarms", sc.name, sys.counters().messages, sys.counters().frames, sys.desk().alarms().len());
    print!("{}", report.table());
    println!("run written to {}", out.display());
    Ok(())
}

fn replay(trace: &Path, monitor: Option<&Path>, no_filter: bool, out: Option<&Path>) -> Result<()> {
    if !trace.exists() {
        return Err(config_err(format!("{} not found", trace.display())));
    }
    let mut cfg = load_monitor(monitor)?;
    cfg.validity_filter = !no_filter;
    let records = load_trace(trace)?;
    let mut sys = System::new(cfg.clone())?;
    let stats = sys.replay(&records)?;
    println!(
        "replayed {} records on {} topics: {} frames, {} alarms ({} presented)",
        stats.published,
        stats.topics,
        sys.counters().frames,
        sys.desk().alarms().len(),
        sys.desk().presented().count()
    );
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join(ALARMS))?);
        sys.desk().write_log(&mut w)?;
    }
    let labels_path = trace.with_file_name(LABELS);
    if labels_path.exists() {
        let labels: Vec<GroundTruthLabel> = busguard_core::eval::read_labels(&labels_path)?;
        let span = match (records.first(), records.last()) {
            (Some(a), Some(b)) => b.t_ms - a.t_ms,
            _ => 0,
        };
        print!("{}", evaluate(&labels, sys.desk().alarms(), span, cfg.features.window_ms).table());
    }
    Ok(())
}

fn bench(splash: bool, json: bool) -> Result<()> {
    let cfg = monitor_config();
    let suite = run_suite(&scenarios(), &cfg)?;
    if json {
        let mut v = serde_json::json!({"overall": suite.overall, "wall_s": suite.wall_s});
        if splash {
            let mut off = cfg.clone();
            off.validity_filter = false;
            v["splash_filter_off"] = serde_json::to_value(run_suite(&splash_scenarios(), &off)?.overall)?;
            v["splash_filter_on"] = serde_json::to_value(run_suite(&splash_scenarios(), &cfg)?.overall)?;
        }
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(());
    }
    for c in &suite.cases {
        println!(
            "{:<10} detected {}/{}  false alarms {}  ({:.2}s)",
            c.name, c.report.detected, c.report.injections, c.report.false_alarms, c.wall_s
        );
    }
    print!("{}", suite.overall.table());
    println!("suite wall time {:.2}s", suite.wall_s);
    if splash {
        for on in [false, true] {
            let mut c = cfg.clone();
            c.validity_filter = on;
            let r = run_suite(&splash_scenarios(), &c)?;
            println!(
                "invalid-data suite, filter {}: {} of {} splashes alarmed, {:.3} false alarms/min",
                if on { "on" } else { "off" },
                r.overall.non_detectable_alarmed,
                r.overall.non_detectable_labels,
                r.overall.false_alarm_rate_per_min
            );
        }
    }
    Ok(())
}
