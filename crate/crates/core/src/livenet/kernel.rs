//! Synthetic training step: a fixed arithmetic loop per sample plus an
//! optional memory sweep, so step cost scales with batch size and competes
//! for real cores.

use std::hint::black_box;
use std::time::{Duration, Instant};

use crate::speedmodel::{Probe, WorkloadExecutor};

/// CPU time consumed by the calling thread, in seconds.
pub fn thread_cpu_time() -> f64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// Stretches training steps in `[from_step, until_step)` by `factor`,
/// idling for the extra time. Emulates losing cores to a foreign workload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throttle {
    pub from_step: u64,
    pub until_step: Option<u64>,
    pub factor: f64,
}

impl Throttle {
    fn active(&self, step: u64) -> bool {
        step >= self.from_step && self.until_step.is_none_or(|u| step < u)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticKernel {
    pub flops_per_sample: u64,
    pub touch_bytes_per_sample: usize,
    /// Fixed per-step latency (idle), which bends throughput toward a plateau.
    pub step_overhead: Duration,
    /// Idle time per sample: the part of a step spent off the CPU (device
    /// or I/O wait). Idles together with the step overhead.
    pub idle_per_sample: Duration,
    pub threads: usize,
    pub throttle: Option<Throttle>,
    steps_run: u64,
    scratch: Vec<f64>,
}

impl SyntheticKernel {
    pub fn new(flops_per_sample: u64) -> Self {
        Self {
            flops_per_sample,
            touch_bytes_per_sample: 0,
            step_overhead: Duration::ZERO,
            idle_per_sample: Duration::ZERO,
            threads: 1,
            throttle: None,
            steps_run: 0,
            scratch: Vec::new(),
        }
    }

    pub fn with_overhead(mut self, overhead: Duration) -> Self {
        self.step_overhead = overhead;
        self
    }

    pub fn with_idle_per_sample(mut self, idle: Duration) -> Self {
        self.idle_per_sample = idle;
        self
    }

    pub fn with_touch_bytes(mut self, bytes: usize) -> Self {
        self.touch_bytes_per_sample = bytes;
        self
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn with_throttle(mut self, throttle: Throttle) -> Self {
        self.throttle = Some(throttle);
        self
    }

    /// Training steps executed so far.
    pub fn steps_run(&self) -> u64 {
        self.steps_run
    }

    /// Runs one batch without throttling.
    pub fn run_batch(&mut self, batch_size: u32) -> Probe {
        let start = Instant::now();
        let cpu = if self.threads <= 1 {
            let t0 = thread_cpu_time();
            let words = self.touch_bytes_per_sample / 8;
            if self.scratch.len() < words {
                self.scratch.resize(words, 1.0);
            }
            for i in 0..batch_size {
                one_sample(self.flops_per_sample, &mut self.scratch[..words], i);
            }
            thread_cpu_time() - t0
        } else {
            let threads = self.threads as u32;
            let flops = self.flops_per_sample;
            let words = self.touch_bytes_per_sample / 8;
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..threads)
                    .map(|t| {
                        let share = batch_size / threads + u32::from(t < batch_size % threads);
                        s.spawn(move || {
                            let t0 = thread_cpu_time();
                            let mut scratch = vec![1.0; words];
                            for i in 0..share {
                                one_sample(flops, &mut scratch, i);
                            }
                            thread_cpu_time() - t0
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap_or(0.0)).sum()
            })
        };
        let idle = self.step_overhead + self.idle_per_sample * batch_size;
        if !idle.is_zero() {
            std::thread::sleep(idle);
        }
        let wall = start.elapsed().as_secs_f64();
        Probe {
            wall_secs: wall,
            cpu_cores: if wall > 0.0 { cpu / wall } else { 0.0 },
        }
    }

    /// Runs one training step, applying the throttle if it covers this step.
    pub fn train_step(&mut self, batch_size: u32) -> Probe {
        let step = self.steps_run;
        self.steps_run += 1;
        let probe = self.run_batch(batch_size);
        match self.throttle.filter(|t| t.active(step) && t.factor > 1.0) {
            Some(t) => {
                let extra = probe.wall_secs * (t.factor - 1.0);
                std::thread::sleep(Duration::from_secs_f64(extra));
                let wall = probe.wall_secs + extra;
                Probe {
                    wall_secs: wall,
                    cpu_cores: probe.cpu_cores * probe.wall_secs / wall,
                }
            }
            None => probe,
        }
    }
}

fn one_sample(flops: u64, scratch: &mut [f64], salt: u32) {
    let mut x = black_box(1.0 + salt as f64 * 1e-9);
    for _ in 0..flops / 2 {
        x = x * 0.999_999_9 + 1e-7;
    }
    for w in scratch.iter_mut() {
        *w += x;
    }
    black_box(x);
}

impl WorkloadExecutor for SyntheticKernel {
    fn run_step(&mut self, batch_size: u32) -> Result<Probe, String> {
        Ok(self.run_batch(batch_size))
    }
}
