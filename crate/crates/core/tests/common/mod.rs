#![allow(dead_code)]

pub mod gen;

use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use batchtune::livenet::worker::WorkerSummary;
use batchtune::livenet::{
    coordinator_run, CoordinatorConfig, LiveError, LiveFailure, LiveRun, SyntheticKernel, Throttle,
    WorkerConfig,
};
use batchtune::scenario::Scenario;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

pub fn load_fixture(name: &str) -> Scenario {
    Scenario::load(fixture(name)).unwrap()
}

/// Live runs share one machine; running them one at a time keeps their
/// timing free of each other's load.
static LIVE: Mutex<()> = Mutex::new(());

/// Mostly idle kernel: 4 ms fixed plus 100 us per sample, with a little
/// arithmetic so CPU readings are non-zero. Timing stays stable on a single
/// shared core.
pub fn test_kernel() -> SyntheticKernel {
    SyntheticKernel::new(200)
        .with_overhead(Duration::from_micros(4_000))
        .with_idle_per_sample(Duration::from_micros(100))
}

pub fn live_scenario(epochs: u32, total_samples: u64, mode: &str) -> Scenario {
    let text = format!(
        "epochs = {epochs}\n\
         [dataset]\ntotal_samples = {total_samples}\n\
         [bench]\nbatch_sizes = [16, 32, 64, 128]\nsteps_per_probe = 3\n\
         [controller]\nmode = \"{mode}\"\n"
    );
    Scenario::parse_live(&text, std::path::Path::new(".")).unwrap()
}

pub struct LiveOutcome {
    pub run: Result<LiveRun, Box<LiveFailure>>,
    pub workers: Vec<Result<WorkerSummary, LiveError>>,
}

/// Runs a coordinator with one worker thread per entry on a loopback port.
pub fn run_live(scenario: &Scenario, workers: Vec<(WorkerConfig, SyntheticKernel)>) -> LiveOutcome {
    let _guard = LIVE.lock().unwrap_or_else(|p| p.into_inner());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let mut cfg = CoordinatorConfig::new(workers.len());
    cfg.join_timeout = Duration::from_secs(20);
    cfg.bench_timeout = Duration::from_secs(60);
    let handles: Vec<_> = workers
        .into_iter()
        .map(|(wc, k)| {
            let addr = addr.clone();
            thread::spawn(move || batchtune::livenet::worker_run(&addr, &wc, k))
        })
        .collect();
    let run = coordinator_run(listener, scenario, &cfg);
    let workers = handles.into_iter().map(|h| h.join().unwrap()).collect();
    LiveOutcome { run, workers }
}

/// Three identical workers; `throttled` (if any) slows by `factor` from its
/// `from_step`-th training step on.
pub fn three_workers(throttled: Option<(usize, u64, f64)>) -> Vec<(WorkerConfig, SyntheticKernel)> {
    (0..3)
        .map(|i| {
            let mut k = test_kernel();
            if let Some((w, from_step, factor)) = throttled {
                if w == i {
                    k = k.with_throttle(Throttle {
                        from_step,
                        until_step: None,
                        factor,
                    });
                }
            }
            (WorkerConfig::new(format!("w{}", i + 1), "box", 1), k)
        })
        .collect()
}

/// Replays a live run through a fresh controller built from its session,
/// going through the on-disk trace and session formats.
pub fn replay_live(run: &LiveRun, scenario: &Scenario) -> batchtune::replay::ReplayReport {
    use batchtune::livenet::Session;
    use batchtune::planner::{Cluster, DatasetSpec};
    use batchtune::trace;

    let mut csv = Vec::new();
    trace::write_csv(&run.rows, &mut csv).unwrap();
    let rows = trace::read_csv(&csv[..]).unwrap();
    let session = Session::parse(&run.session.to_text()).unwrap();
    let ds = DatasetSpec::for_nodes(scenario.dataset.total_samples, &session.nodes).unwrap();
    let cluster = Cluster::new(session.nodes.clone(), session.models.clone()).unwrap();
    batchtune::replay::replay(&rows, cluster, ds, scenario.controller.clone(), session.normal_cpu).unwrap()
}
