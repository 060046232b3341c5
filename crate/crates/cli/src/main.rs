//! `batchtune` command-line front end.
//!
//! Exit status: 0 on success, 2 when inputs fail validation, 3 when a run
//! fails (or a replay disagrees with its trace).

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use batchtune::livenet::{
    coordinator_run, worker_run, CoordinatorConfig, Session, SyntheticKernel, Throttle, WorkerConfig,
};
use batchtune::planner::{plan_initial, Cluster, DatasetSpec};
use batchtune::replay::replay;
use batchtune::report::{emit_report, RunReport};
use batchtune::retuner::RetuneMode;
use batchtune::scenario::Scenario;
use batchtune::speedmodel::run_sweep;
use batchtune::{simengine, trace};

const LOG_ENV: &str = "HYPERTUNE_LOG";

#[derive(Parser)]
#[command(name = "batchtune", version, about = "Batch planning and straggler control for synchronous training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark the synthetic kernel and write a speed model.
    Bench(BenchArgs),
    /// Print the initial batch plan of a scenario.
    Plan {
        /// Scenario file (TOML).
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Simulate a scenario; write its trace and print the run report.
    Sim {
        /// Scenario file (TOML).
        #[arg(long)]
        scenario: PathBuf,
        /// Trace CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        control: ControlFlags,
    },
    /// Coordinate live workers.
    Coord {
        /// Scenario file; nodes and models come from the workers.
        #[arg(long)]
        scenario: PathBuf,
        /// Address to listen on, `host:port`.
        #[arg(long)]
        listen: String,
        /// Number of workers to wait for.
        #[arg(long)]
        workers: usize,
        /// Trace CSV to write; the session goes to `<out>.session`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fixed per-step deadline in milliseconds.
        #[arg(long)]
        step_timeout_ms: Option<u64>,
        #[command(flatten)]
        control: ControlFlags,
    },
    /// Serve a coordinator as a worker.
    Work(WorkArgs),
    /// Replay a trace through the controller and compare decisions.
    Replay {
        /// Trace CSV recorded by `sim` or `coord`.
        #[arg(long)]
        trace: PathBuf,
        /// Scenario the trace was recorded with.
        #[arg(long)]
        scenario: PathBuf,
        /// Live session file; defaults to `<trace>.session` when present.
        #[arg(long)]
        session: Option<PathBuf>,
        #[command(flatten)]
        control: ControlFlags,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Speed,
    Cpu,
}

/// Overrides of the scenario's `seed` and `[controller]` settings.
#[derive(Args)]
struct ControlFlags {
    /// Seed for timing noise, shuffles and forced terminations.
    #[arg(long)]
    seed: Option<u64>,
    /// Run the monitor and retuner.
    #[arg(long, value_enum)]
    controller: Option<OnOff>,
    /// Retune from measured speed or from CPU share.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Invert the speed table with the as-printed, swapped interpolation weights.
    #[arg(long)]
    eq3_literal: bool,
    /// Retune by inverting the nominal model at the measured speed (diagnostic).
    #[arg(long)]
    naive_inverse: bool,
}

impl ControlFlags {
    fn apply(&self, s: &mut Scenario) {
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(c) = self.controller {
            s.controller.enabled = matches!(c, OnOff::On);
        }
        if let Some(m) = self.mode {
            s.controller.policy.mode = match m {
                ModeArg::Speed => RetuneMode::SpeedInterpolation,
                ModeArg::Cpu => RetuneMode::CpuProportional,
            };
        }
        s.controller.policy.eq3_literal |= self.eq3_literal;
        s.controller.policy.naive_inverse |= self.naive_inverse;
    }
}

#[derive(Args)]
struct KernelArgs {
    /// Arithmetic operations per sample.
    #[arg(long, default_value_t = 200_000)]
    flops: u64,
    /// Fixed idle time per step, microseconds.
    #[arg(long, default_value_t = 0)]
    overhead_us: u64,
    /// Idle time per sample, microseconds.
    #[arg(long, default_value_t = 0)]
    idle_us: u64,
    /// Memory swept per sample, bytes.
    #[arg(long, default_value_t = 0)]
    touch_bytes: usize,
    /// Worker threads splitting each batch.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl KernelArgs {
    fn kernel(&self) -> SyntheticKernel {
        SyntheticKernel::new(self.flops)
            .with_overhead(Duration::from_micros(self.overhead_us))
            .with_idle_per_sample(Duration::from_micros(self.idle_us))
            .with_touch_bytes(self.touch_bytes)
            .with_threads(self.threads)
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Speed model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Node class recorded in the model.
    #[arg(long, default_value = "local")]
    class: String,
    /// Comma-separated batch sizes to probe.
    #[arg(long, value_delimiter = ',', default_values_t = vec![4u32, 8, 16, 32, 64])]
    batch_sizes: Vec<u32>,
    /// Timed steps per batch size; the first is a warm-up.
    #[arg(long, default_value_t = 4)]
    steps_per_probe: u32,
    #[command(flatten)]
    kernel: KernelArgs,
}

#[derive(Args)]
struct WorkArgs {
    /// Coordinator address, `host:port`.
    #[arg(long)]
    connect: String,
    /// Node id announced to the coordinator.
    #[arg(long)]
    id: String,
    /// Node class; workers of one class share a speed model.
    #[arg(long, default_value = "local")]
    class: String,
    /// Core count announced; defaults to the available parallelism.
    #[arg(long)]
    cores: Option<u32>,
    /// Keep retrying the connection this long, seconds.
    #[arg(long, default_value_t = 30)]
    connect_timeout_s: u64,
    /// Slow training steps from this step on (emulated contention).
    #[arg(long)]
    throttle_from: Option<u64>,
    /// Step time multiplier while throttled.
    #[arg(long, default_value_t = 4.0)]
    throttle_factor: f64,
    #[command(flatten)]
    kernel: KernelArgs,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

fn validation(e: impl std::fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn session_path(trace: &Path) -> PathBuf {
    let mut s = trace.as_os_str().to_owned();
    s.push(".session");
    PathBuf::from(s)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Bench(a) => {
            let outcome = run_sweep(a.kernel.kernel(), &a.class, &a.batch_sizes, a.steps_per_probe)
                .map_err(runtime)?;
            fs::write(&a.out, outcome.model.to_text()).map_err(runtime)?;
            print!("{}", outcome.model);
            println!("# normal cpu {:.3} cores", outcome.normal_cpu);
            Ok(())
        }
        Command::Plan { scenario } => {
            let s = Scenario::load(&scenario).map_err(validation)?;
            let cluster = s.cluster().map_err(validation)?;
            let plan = plan_initial(&cluster, &s.dataset).map_err(validation)?;
            println!("scenario: {}", s.name);
            println!("{:<12} {:>8} {:>10} {:>10}", "node", "batch", "share", "step_s");
            for n in &plan.order {
                println!(
                    "{:<12} {:>8} {:>10} {:>10.4}",
                    n,
                    plan.batch(n),
                    plan.dataset_shares[n],
                    plan.node_step_time(n)
                );
            }
            println!("total batch {}", plan.total_batch());
            println!("steps per epoch {}", plan.steps_per_epoch);
            println!("predicted step time {:.4} s", plan.predicted_step_time);
            println!(
                "predicted throughput {:.2} samples/s",
                plan.total_batch() as f64 / plan.predicted_step_time
            );
            Ok(())
        }
        Command::Sim {
            scenario,
            out,
            control,
        } => {
            let mut s = Scenario::load(&scenario).map_err(validation)?;
            control.apply(&mut s);
            s.validate(true).map_err(validation)?;
            let t = simengine::run(&s).map_err(runtime)?;
            if let Some(out) = &out {
                trace::save(&t.rows, out).map_err(runtime)?;
                info!("wrote {} rows to {}", t.rows.len(), out.display());
            }
            let report = emit_report(&t, &s).map_err(runtime)?;
            print!("{report}");
            Ok(())
        }
        Command::Coord {
            scenario,
            listen,
            workers,
            out,
            step_timeout_ms,
            control,
        } => {
            let mut s = Scenario::load_live(&scenario).map_err(validation)?;
            control.apply(&mut s);
            s.validate(false).map_err(validation)?;
            if workers == 0 {
                return Err(validation("--workers must be at least 1"));
            }
            let listener = TcpListener::bind(&listen).map_err(|e| runtime(format!("bind {listen}: {e}")))?;
            let mut cfg = CoordinatorConfig::new(workers);
            cfg.step_timeout = step_timeout_ms.map(Duration::from_millis);
            let save = |rows: &[trace::TraceRow], session: Option<&Session>| -> Result<(), Failure> {
                if let Some(out) = &out {
                    trace::save(rows, out).map_err(runtime)?;
                    if let Some(session) = session {
                        fs::write(session_path(out), session.to_text()).map_err(runtime)?;
                    }
                }
                Ok(())
            };
            match coordinator_run(listener, &s, &cfg) {
                Ok(run) => {
                    save(&run.rows, Some(&run.session))?;
                    let report = RunReport::from_rows(&s.name, &run.rows, None, None).map_err(runtime)?;
                    print!("{report}");
                    if run.discarded > 0 {
                        println!("discarded stale reports: {}", run.discarded);
                    }
                    Ok(())
                }
                Err(failure) => {
                    save(&failure.rows, failure.session.as_ref())?;
                    Err(runtime(failure))
                }
            }
        }
        Command::Work(a) => {
            let cores = a
                .cores
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get() as u32));
            let mut cfg = WorkerConfig::new(a.id, a.class, cores);
            cfg.connect_timeout = Duration::from_secs(a.connect_timeout_s);
            let mut kernel = a.kernel.kernel();
            if let Some(from_step) = a.throttle_from {
                if a.throttle_factor < 1.0 {
                    return Err(validation("--throttle-factor must be >= 1"));
                }
                kernel = kernel.with_throttle(Throttle {
                    from_step,
                    until_step: None,
                    factor: a.throttle_factor,
                });
            }
            let summary = worker_run(&a.connect, &cfg, kernel).map_err(runtime)?;
            info!("worker done: {} steps, {} plans", summary.steps, summary.plans);
            Ok(())
        }
        Command::Replay {
            trace: trace_path,
            scenario,
            session,
            control,
        } => {
            let rows = trace::load(&trace_path).map_err(validation)?;
            let session_file = session.or_else(|| {
                let p = session_path(&trace_path);
                p.exists().then_some(p)
            });
            let mut s = match &session_file {
                Some(_) => Scenario::load_live(&scenario),
                None => Scenario::load(&scenario),
            }
            .map_err(validation)?;
            control.apply(&mut s);
            let (cluster, dataset, normal_cpu) = match &session_file {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| validation(format!("{}: {e}", p.display())))?;
                    let sess = Session::parse(&text).map_err(validation)?;
                    let mut nodes = sess.nodes.clone();
                    for n in &mut nodes {
                        if let Some(sn) = s.node(&n.node_id) {
                            n.is_storage_node = sn.is_storage_node;
                            n.owned_private_samples = sn.owned_private_samples;
                        }
                    }
                    let ds = DatasetSpec::for_nodes(s.dataset.total_samples, &nodes).map_err(validation)?;
                    let cluster = Cluster::new(nodes, sess.models).map_err(validation)?;
                    (cluster, ds, sess.normal_cpu)
                }
                None => (s.cluster().map_err(validation)?, s.dataset.clone(), s.normal_cpu()),
            };
            let report = replay(&rows, cluster, dataset, s.controller.clone(), normal_cpu).map_err(runtime)?;
            println!(
                "replayed {} steps: {} recorded decisions, {} replayed",
                report.steps,
                report.recorded.len(),
                report.replayed.len()
            );
            for d in &report.replayed {
                println!(
                    "epoch {} step {} gen {} {} {}",
                    d.epoch, d.step, d.generation, d.node_id, d.label
                );
            }
            if report.agrees() {
                println!("agreement: yes");
                Ok(())
            } else {
                let why = report.first_divergence().unwrap_or_default();
                warn!("replay diverged: {why}");
                println!("agreement: no");
                Err(runtime(format!("replay disagrees with trace: {why}")))
            }
        }
    }
}
