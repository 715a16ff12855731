use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rmfs_core::engine::{
    read_jsonl, replay_metrics, run_experiment, write_jsonl, write_order_trace, write_results_csv, EngineConfig,
    EventKind, ExperimentConfig, PlannerChoice, ResultRow, Scenario, SimState, DEFAULT_HORIZON,
};
use rmfs_core::{
    emit_report, generate_layout, load_layout, run, serialize_layout, Aggregate, AgvId, AgvSpec, FailureConfig,
    OrderPattern, SchedulerPolicy,
};
use rmfs_telemetry::TelemetryOptions;

#[derive(Parser)]
#[command(
    name = "rmfs",
    version,
    about = "Warehouse fulfillment simulator: scheduling, multi-agent path planning and failure injection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seed and print its metrics.
    Run {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append the result row to this CSV (header written if the file is new).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the event log (JSON lines).
        #[arg(long)]
        events: Option<PathBuf>,
        /// Write the per-order trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run repeated seeds and print mean/stddev per metric.
    Experiment {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
        repeats: u32,
        /// First seed; runs use seed, seed+1, ...
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write one row per run to this CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run all three scenarios with every scheduler/planner pair instead
        /// of the single configuration given.
        #[arg(long)]
        matrix: bool,
        /// Run seeds one after another instead of in parallel.
        #[arg(long)]
        sequential: bool,
    },
    /// Generate a layout JSON file.
    GenLayout {
        #[arg(long, default_value_t = 20)]
        width: u32,
        #[arg(long, default_value_t = 15)]
        height: u32,
        #[arg(long, default_value_t = 32)]
        shelves: u32,
        #[arg(long, default_value_t = 8)]
        stations: u32,
        #[arg(long, default_value_t = 9)]
        agvs: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output path; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a layout JSON file.
    ValidateLayout { path: PathBuf },
    /// Run with the WebSocket telemetry service attached.
    Serve {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8080)]
        serve_port: u16,
        /// Steps per second.
        #[arg(long, default_value_t = 10.0)]
        speed: f64,
        /// Start paused; a client resumes or single-steps the run
        #[arg(long)]
        paused: bool,
        /// Exit once the run finishes.
        #[arg(long)]
        exit_when_finished: bool,
    },
    /// Recompute metrics from an event log and compare with the recorded ones.
    Replay { path: PathBuf },
    /// Summarise a results CSV as an environment × method table.
    Report { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FailureMode {
    Off,
    Random,
    Scripted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PatternKind {
    Os,
    Wave,
    Hotspot,
    Burst,
    Steady,
}

#[derive(Args, Clone)]
struct SimArgs {
    /// Layout JSON file; replaces the scenario's built-in layout.
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long, default_value = "homogeneous", value_parser = parse_scenario)]
    scenario: Scenario,
    #[arg(long, default_value = "ta", value_parser = parse_scheduler)]
    scheduler: SchedulerPolicy,
    #[arg(long, default_value = "astar", value_parser = parse_planner)]
    planner: PlannerChoice,
    #[arg(long, value_enum, default_value = "os")]
    pattern: PatternKind,
    /// Full order pattern as JSON (overrides --pattern and --orders).
    #[arg(long)]
    pattern_json: Option<String>,
    /// Order count for os/wave/hotspot patterns.
    #[arg(long, default_value_t = 30)]
    orders: u32,
    #[arg(long, default_value_t = DEFAULT_HORIZON, value_parser = clap::value_parser!(u32).range(1..))]
    horizon: u32,
    /// Report node expansions instead of milliseconds as CT.
    #[arg(long)]
    deterministic_ct: bool,
    /// Failure mode; defaults to random for the fault scenario, off otherwise.
    #[arg(long, value_enum)]
    failures: Option<FailureMode>,
    /// Per-step failure probability of each active AGV [default: 0.01]
    #[arg(long)]
    failure_prob: Option<f64>,
    /// Steps a failed AGV stays down [default: 40]
    #[arg(long)]
    down_steps: Option<u32>,
    /// CSV of `step,agv_id` rows for --failures scripted.
    #[arg(long)]
    failure_script: Option<PathBuf>,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse()
}

fn parse_scheduler(s: &str) -> Result<SchedulerPolicy, String> {
    s.parse()
}

fn parse_planner(s: &str) -> Result<PlannerChoice, String> {
    s.parse()
}

fn pattern(kind: PatternKind, n: u32) -> OrderPattern {
    match kind {
        PatternKind::Os => OrderPattern::OneShot { n },
        PatternKind::Wave => OrderPattern::Wave {
            waves: 3,
            per_wave: n.div_ceil(3),
            interval: 60,
        },
        PatternKind::Hotspot => OrderPattern::Hotspot { n, zipf_s: 1.0 },
        PatternKind::Burst => OrderPattern::Burst {
            base_rate: 0.05,
            burst_rate: 0.4,
            burst_start: 50,
            burst_len: 40,
            horizon: 200,
        },
        PatternKind::Steady => OrderPattern::Steady {
            rate: 0.1,
            horizon: 300,
        },
    }
}

fn read_script(path: &Path) -> Result<Vec<(u32, AgvId)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading failure script {}", path.display()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            bail!("{}:{}: expected `step,agv_id`", path.display(), i + 1);
        }
        match (rec[0].parse::<u32>(), rec[1].parse::<u32>()) {
            (Ok(step), Ok(agv)) => out.push((step, AgvId(agv))),
            // Header row.
            _ if i == 0 => continue,
            _ => bail!(
                "{}:{}: expected `step,agv_id`, got `{}`",
                path.display(),
                i + 1,
                rec.iter().collect::<Vec<_>>().join(",")
            ),
        }
    }
    Ok(out)
}

impl SimArgs {
    fn config(&self) -> Result<EngineConfig> {
        self.config_for(self.scenario, self.scheduler, self.planner.clone())
    }

    fn config_for(
        &self,
        scenario: Scenario,
        scheduler: SchedulerPolicy,
        planner: PlannerChoice,
    ) -> Result<EngineConfig> {
        let mut c = EngineConfig::scenario(scenario);
        if let Some(path) = &self.layout {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading layout {}", path.display()))?;
            c.layout = load_layout(&text)?;
            c.env_label = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("custom")
                .to_string();
        }
        c.scheduler = scheduler;
        c.planner = planner;
        c.pattern = match &self.pattern_json {
            Some(j) => serde_json::from_str(j).context("parsing --pattern-json")?,
            None => pattern(self.pattern, self.orders),
        };
        c.horizon = self.horizon;
        c.deterministic_ct = self.deterministic_ct;
        let mode = self.failures.unwrap_or(if scenario == Scenario::Fault {
            FailureMode::Random
        } else {
            FailureMode::Off
        });
        let mut f = FailureConfig::standard();
        if let Some(p) = self.failure_prob {
            f.per_step_probability = p;
        }
        if let Some(d) = self.down_steps {
            f.down_steps = d;
        }
        f.enabled = mode == FailureMode::Random;
        if mode == FailureMode::Off {
            f.per_step_probability = 0.0;
        }
        c.failures = f;
        match (mode, &self.failure_script) {
            (FailureMode::Scripted, Some(p)) => c.scripted_failures = read_script(p)?,
            (FailureMode::Scripted, None) => bail!("--failures scripted needs --failure-script <csv>"),
            (_, Some(_)) => bail!("--failure-script is only used with --failures scripted"),
            _ => {}
        }
        c.validate()?;
        Ok(c)
    }
}

fn append_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    write_results_csv(file, rows, fresh)?;
    Ok(())
}

fn print_aggregate(out: &mut impl Write, label: &str, agg: &Aggregate) -> io::Result<()> {
    writeln!(
        out,
        "{label}: runs {} | SR {:.2} ± {:.2} | CT {:.3} ± {:.3} | TP {:.4} ± {:.4} | makespan {:.1} | failures {:.2} | collisions {:.2}",
        agg.runs,
        agg.sr_mean,
        agg.sr_std,
        agg.ct_mean,
        agg.ct_std,
        agg.tp_mean,
        agg.tp_std,
        agg.makespan_mean,
        agg.failures_mean,
        agg.collisions_mean
    )
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Run {
            sim,
            seed,
            out,
            events,
            trace,
        } => {
            let mut config = sim.config()?;
            config.record_events = events.is_some();
            let r = run(&config, seed)?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&r.metrics)?)?;
            if let Some(p) = out {
                append_rows(&p, &[ResultRow::new(&config, seed, &r.metrics)])?;
            }
            if let Some(p) = events {
                write_jsonl(&r.events, io::BufWriter::new(File::create(&p)?))?;
            }
            if let Some(p) = trace {
                write_order_trace(File::create(&p)?, &r.orders)?;
            }
        }
        Command::Experiment {
            sim,
            repeats,
            seed,
            out,
            matrix,
            sequential,
        } => {
            let configs = if matrix {
                let mut v = Vec::new();
                for sc in [Scenario::Homogeneous, Scenario::Heterogeneous, Scenario::Fault] {
                    for sch in [SchedulerPolicy::Rd, SchedulerPolicy::Ta] {
                        for pl in [PlannerChoice::AStar, PlannerChoice::Cbs] {
                            v.push(sim.config_for(sc, sch, pl)?);
                        }
                    }
                }
                v
            } else {
                vec![sim.config()?]
            };
            for config in configs {
                let label = format!(
                    "{} {}+{} {}",
                    config.env_label,
                    config.scheduler.as_str().to_uppercase(),
                    config.planner,
                    config.pattern.label()
                );
                let mut exp = ExperimentConfig::new(config, repeats, seed);
                exp.parallel = !sequential;
                let results = run_experiment(&exp)?;
                print_aggregate(&mut stdout, &label, &Aggregate::from_results(&results))?;
                if let Some(p) = &out {
                    let rows: Vec<ResultRow> = results
                        .iter()
                        .map(|r| ResultRow::new(&exp.engine, r.seed, &r.metrics))
                        .collect();
                    append_rows(p, &rows)?;
                }
            }
        }
        Command::GenLayout {
            width,
            height,
            shelves,
            stations,
            agvs,
            seed,
            out,
        } => {
            let specs: Vec<AgvSpec> = (0..agvs).map(AgvSpec::unit).collect();
            let layout = generate_layout(width, height, shelves, stations, &specs, seed)?;
            let text = serialize_layout(&layout);
            match out {
                Some(p) => std::fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => writeln!(stdout, "{text}")?,
            }
        }
        Command::ValidateLayout { path } => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let l = load_layout(&text)?;
            writeln!(
                stdout,
                "ok: {}x{}, {} shelves, {} stations, {} agvs",
                l.width,
                l.height,
                l.shelves.len(),
                l.stations.len(),
                l.agvs.len()
            )?;
        }
        Command::Serve {
            sim,
            seed,
            serve_port,
            speed,
            paused,
            exit_when_finished,
        } => {
            if !(speed.is_finite() && speed > 0.0) {
                bail!("--speed must be positive");
            }
            let mut config = sim.config()?;
            config.record_events = false;
            let state = SimState::new(Arc::new(config), seed)?;
            let rt = tokio::runtime::Runtime::new()?;
            let opts = TelemetryOptions {
                speed,
                start_paused: paused,
                exit_when_finished,
            };
            let end = rt.block_on(rmfs_telemetry::serve(state, serve_port, opts))?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&end.metrics())?)?;
        }
        Command::Replay { path } => {
            let events = read_jsonl(BufReader::new(
                File::open(&path).with_context(|| format!("opening {}", path.display()))?,
            ))?;
            let metrics = replay_metrics(&events)?;
            let mut counts = std::collections::BTreeMap::new();
            for e in &events {
                *counts.entry(serde_json::to_string(&e.kind)?).or_insert(0u32) += 1;
            }
            for (k, n) in &counts {
                writeln!(stdout, "{:>16} {n}", k.trim_matches('"'))?;
            }
            writeln!(stdout, "{}", serde_json::to_string_pretty(&metrics)?)?;
            if let Some(end) = events.iter().find(|e| e.kind == EventKind::RunEnd) {
                let recorded: rmfs_core::Metrics = serde_json::from_value(end.payload.clone())?;
                if recorded != metrics {
                    bail!("replayed metrics differ from the recorded run_end");
                }
                writeln!(stdout, "matches recorded run_end")?;
            }
        }
        Command::Report { path } => {
            let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            write!(stdout, "{}", emit_report(file)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WAREROVER_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
