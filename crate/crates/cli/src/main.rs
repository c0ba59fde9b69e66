//! `twotsd` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::anyhow;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use twotsd_core::config::{self, ConfigError};
use twotsd_core::memory::MemoryModule;
use twotsd_core::report::{self, RunManifest, CSV_SCHEMA_VERSION};
use twotsd_core::semantics::{DeterministicEngine, EngineConfig, SemanticsEngine};
use twotsd_core::service::{Service, ServiceOptions};
use twotsd_core::simulation::{self, ScenarioConfig};
use twotsd_core::teacher::{Teacher, TeacherConfig};
use twotsd_llm::{RemoteEngine, RemoteEngineConfig};

#[derive(Parser, Debug)]
#[command(name = "twotsd", version, about = "Teacher-student trust semantics distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value`, applied after the file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replaces the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = EngineKind::Deterministic)]
    engine: EngineKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EngineKind {
    Deterministic,
    Remote,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write per-task metrics.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write the teacher memory of the first seed here.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Device-count sweep, one CSV per comparison.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a memory snapshot.
    Inspect {
        snapshot: PathBuf,
        /// Number of leaves to print in full.
        #[arg(long, default_value_t = 3)]
        leaves: usize,
    },
    /// Run the teacher as a TCP service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Load memory from here if it exists and save to it on writes.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        snapshot_every: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.into())
    }
}

trait Runtime<T> {
    fn runtime(self, what: &str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Runtime<T> for Result<T, E> {
    fn runtime(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into().context(what.to_string())))
    }
}

/// Service configuration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ServeConfig {
    engine: EngineConfig,
    teacher: TeacherConfig,
    remote: RemoteEngineConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { common, out, snapshot } => simulate(&common, &out, snapshot.as_deref()),
        Command::Compare { common, out } => compare(&common, &out),
        Command::Inspect { snapshot, leaves } => inspect(&snapshot, leaves),
        Command::Serve {
            common,
            listen,
            snapshot,
            snapshot_every,
        } => serve(&common, &listen, snapshot, snapshot_every),
    }
}

fn scenario(common: &Common) -> Result<ScenarioConfig, Failure> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Failure::Usage(anyhow!("--config is required")))?;
    if !path.is_file() {
        return Err(Failure::Usage(anyhow!("config file {} does not exist", path.display())));
    }
    if common.engine == EngineKind::Remote {
        return Err(Failure::Usage(anyhow!(
            "the simulator runs the deterministic engine only; --engine remote applies to serve"
        )));
    }
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(config::load_scenario(Some(path), &overrides)?)
}

/// Files written so far; removed again if the command fails.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
    done: bool,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).runtime("creating output directory")?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            done: false,
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        self.written.push(path.clone());
        fs::write(&tmp, bytes)
            .and_then(|_| fs::rename(&tmp, &path))
            .runtime(&format!("writing {}", path.display()))
    }

    fn names(&self) -> Vec<String> {
        self.written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect()
    }

    fn finish(mut self) {
        self.done = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.done {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn manifest(cfg: &ScenarioConfig, command: &str, outputs: Vec<String>) -> Vec<u8> {
    let m = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed: cfg.seed,
        seeds: cfg.seeds,
        config_sha256: config::config_sha256(cfg),
        csv_schema_version: CSV_SCHEMA_VERSION,
        engine: "deterministic".into(),
        outputs,
    };
    let mut bytes = serde_json::to_vec_pretty(&m).expect("manifest serializes");
    bytes.push(b'\n');
    bytes
}

fn simulate(common: &Common, out: &Path, snapshot: Option<&Path>) -> Result<(), Failure> {
    let cfg = scenario(common)?;
    let report = simulation::run_scenario(&cfg).runtime("simulation failed")?;
    let mut outputs = Outputs::new(out)?;
    let mut csv = Vec::new();
    report::write_metrics_csv(&report, &mut csv).runtime("rendering metrics")?;
    outputs.write("metrics.csv", &csv)?;
    outputs.write("config.resolved.toml", config::to_toml(&cfg).as_bytes())?;
    if let Some(path) = snapshot {
        let teacher = simulation::teacher_after_run(&cfg, cfg.seed).runtime("rebuilding teacher memory")?;
        teacher.memory().save(path).runtime("writing snapshot")?;
    }
    let names = outputs.names();
    outputs.write("manifest.json", &manifest(&cfg, "simulate", names))?;
    for m in [simulation::Method::TwoTsd, simulation::Method::Baseline] {
        if let Some(s) = report.pooled(m) {
            println!(
                "{:<9} tasks={} mean_eval_s={:.4} collections={} accuracy={}",
                m.as_str(),
                s.tasks,
                s.mean_evaluation_time_s,
                s.data_collection_events,
                s.selection_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"))
            );
        }
    }
    outputs.finish();
    Ok(())
}

fn compare(common: &Common, out: &Path) -> Result<(), Failure> {
    let cfg = scenario(common)?;
    let sweep = simulation::run_device_sweep(&cfg).map_err(|e| match e {
        simulation::SimError::Config(_) => Failure::Usage(e.into()),
        other => Failure::Runtime(other.into()),
    })?;
    let mut outputs = Outputs::new(out)?;
    let mut buf = Vec::new();
    report::write_rows(&report::evaluation_time_rows(&sweep), &mut buf).runtime("rendering csv")?;
    outputs.write(report::EVALUATION_TIME_CSV, &buf)?;
    buf.clear();
    report::write_rows(&report::collection_rows(&sweep), &mut buf).runtime("rendering csv")?;
    outputs.write(report::DATA_COLLECTION_CSV, &buf)?;
    buf.clear();
    report::write_rows(&report::accuracy_rows(&sweep), &mut buf).runtime("rendering csv")?;
    outputs.write(report::ACCURACY_CSV, &buf)?;
    outputs.write("config.resolved.toml", config::to_toml(&cfg).as_bytes())?;
    let names = outputs.names();
    outputs.write("manifest.json", &manifest(&cfg, "compare", names))?;
    for row in report::evaluation_time_rows(&sweep) {
        println!("devices={:<4} {:<9} mean_eval_s={:.4}", row.device_count, row.method, row.mean_evaluation_time_s);
    }
    outputs.finish();
    Ok(())
}

fn inspect(path: &Path, leaves: usize) -> Result<(), Failure> {
    let memory = MemoryModule::load(path)
        .map_err(|e| Failure::Usage(anyhow!("cannot read snapshot {}: {e}", path.display())))?;
    let s = memory.stats();
    let devices: usize = memory.with_tree(|t| t.task_types().iter().map(|tt| t.device_count(tt)).sum());
    println!("snapshot: {}", path.display());
    println!("resources: {}", s.resources);
    println!("records: {}", s.records);
    println!(
        "tree: {} nodes = 1 root + {} task types + {} devices + {} leaves",
        s.tree_nodes, s.task_types, devices, s.leaves
    );
    print!("{}", memory.with_tree(|t| t.render()));
    let sample: Vec<_> = memory.with_tree(|t| {
        t.task_types()
            .iter()
            .flat_map(|tt| t.by_task_type(tt))
            .take(leaves)
            .collect()
    });
    for ts in sample {
        println!(
            "leaf {}/{}: {}",
            ts.task_type(),
            ts.device(),
            serde_json::to_string(&ts).expect("semantics serialize")
        );
    }
    Ok(())
}

fn serve(common: &Common, listen: &str, snapshot: Option<PathBuf>, snapshot_every: u64) -> Result<(), Failure> {
    let mut table = match &common.config {
        Some(p) => config::load_value(p)?,
        None => toml::Table::new(),
    };
    for o in &common.overrides {
        config::apply_override(&mut table, o)?;
    }
    let cfg: ServeConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::Usage(anyhow!("cannot parse config: {e}")))?;
    cfg.teacher.validate().map_err(|e| Failure::Usage(anyhow!(e)))?;
    let deterministic = DeterministicEngine::new(cfg.engine.clone()).map_err(|e| Failure::Usage(e.into()))?;
    let engine: Box<dyn SemanticsEngine> = match common.engine {
        EngineKind::Deterministic => Box::new(deterministic),
        EngineKind::Remote => Box::new(
            RemoteEngine::from_env(cfg.remote.clone(), deterministic).map_err(|e| Failure::Usage(e.into()))?,
        ),
    };
    let memory = match &snapshot {
        Some(p) if p.exists() => MemoryModule::load(p)
            .map_err(|e| Failure::Usage(anyhow!("cannot read snapshot {}: {e}", p.display())))?,
        _ => MemoryModule::with_retention(cfg.teacher.retention_ms),
    };
    let teacher = Arc::new(Teacher::with_memory(memory, engine, cfg.teacher.clone()));
    let svc = Service::new(
        teacher,
        ServiceOptions {
            snapshot_path: snapshot,
            snapshot_every,
        },
    );
    let listener = std::net::TcpListener::bind(listen).runtime("binding listener")?;
    let addr = listener.local_addr().runtime("reading bound address")?;
    println!("listening on {addr}");
    info!("engine {}", svc.teacher().engine_name());
    svc.run(listener).runtime("service stopped")
}
