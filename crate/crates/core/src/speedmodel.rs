//! Per-node throughput models.
//!
//! A [`SpeedModel`] is a table of `(batch size, samples/sec)` knots measured
//! by a benchmark sweep. Queries interpolate linearly between knots and never
//! extrapolate past the probed range.
//!
//! Models also have a line-oriented text form:
//!
//! ```text
//! speedmodel xeon-4108
//! 30 22
//! 60 31
//! 180 31.4
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Largest dip below the running maximum tolerated as measurement noise.
pub const MONOTONE_TOLERANCE: f64 = 0.03;

/// Fraction of peak throughput at which a knot counts as on the plateau.
pub const PLATEAU_FRACTION: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpeedModelError {
    #[error("at least 2 distinct batch sizes are required, got {0}")]
    TooFewPoints(usize),
    #[error("batch sizes must be strictly increasing ({prev} then {next})")]
    NotIncreasing { prev: u32, next: u32 },
    #[error("invalid knot ({batch_size}, {throughput}): batch must be >= 1 and throughput finite and > 0")]
    InvalidPoint { batch_size: u32, throughput: f64 },
    #[error(
        "throughput at batch {batch_size} ({throughput:.4}) dips more than 3% below the running maximum {running_max:.4}"
    )]
    NonMonotonic {
        batch_size: u32,
        throughput: f64,
        running_max: f64,
    },
    #[error("{value} is outside the model range [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },
    #[error("capacity factor {0} is outside (0, 1]")]
    InvalidFactor(f64),
    #[error("steps per probe must be >= 2 (first probe is warm-up), got {0}")]
    InvalidProbeCount(u32),
    #[error("probe failed at batch {batch_size}: {reason}")]
    ProbeFailure { batch_size: u32, reason: String },
    #[error("speed model text, line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedPoint {
    pub batch_size: u32,
    /// Samples per second.
    pub throughput: f64,
}

impl SpeedPoint {
    pub fn new(batch_size: u32, throughput: f64) -> Self {
        Self {
            batch_size,
            throughput,
        }
    }
}

/// Orientation of the interpolation weights used when inverting a model.
///
/// `Standard` maps the lower bracketing speed to the lower batch size.
/// `Literal` swaps the two weights, which sends the lower speed to the
/// upper batch size; it exists only to reproduce that formula on request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InverseWeights {
    #[default]
    Standard,
    Literal,
}

/// Monotone batch-size to throughput table with piecewise-linear queries.
///
/// Immutable once built; share freely across readers.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedModel {
    node_class: String,
    points: Vec<SpeedPoint>,
}

impl SpeedModel {
    pub fn new(
        node_class: impl Into<String>,
        points: Vec<SpeedPoint>,
    ) -> Result<Self, SpeedModelError> {
        if points.len() < 2 {
            return Err(SpeedModelError::TooFewPoints(points.len()));
        }
        let mut running_max = 0.0_f64;
        for (i, p) in points.iter().enumerate() {
            if p.batch_size == 0 || !p.throughput.is_finite() || p.throughput <= 0.0 {
                return Err(SpeedModelError::InvalidPoint {
                    batch_size: p.batch_size,
                    throughput: p.throughput,
                });
            }
            if i > 0 && points[i - 1].batch_size >= p.batch_size {
                return Err(SpeedModelError::NotIncreasing {
                    prev: points[i - 1].batch_size,
                    next: p.batch_size,
                });
            }
            if p.throughput < running_max * (1.0 - MONOTONE_TOLERANCE) {
                return Err(SpeedModelError::NonMonotonic {
                    batch_size: p.batch_size,
                    throughput: p.throughput,
                    running_max,
                });
            }
            running_max = running_max.max(p.throughput);
        }
        Ok(Self {
            node_class: node_class.into(),
            points,
        })
    }

    /// Builds a model from `(batch, throughput)` pairs.
    pub fn from_pairs(
        node_class: impl Into<String>,
        pairs: &[(u32, f64)],
    ) -> Result<Self, SpeedModelError> {
        Self::new(
            node_class,
            pairs.iter().map(|&(b, t)| SpeedPoint::new(b, t)).collect(),
        )
    }

    /// Builds a model after lifting every point to the running maximum, so
    /// noisy measurements that dip beyond tolerance still yield a model.
    pub fn monotone_envelope(
        node_class: impl Into<String>,
        mut points: Vec<SpeedPoint>,
    ) -> Result<Self, SpeedModelError> {
        let mut running_max = 0.0_f64;
        for p in &mut points {
            if p.throughput.is_finite() {
                running_max = running_max.max(p.throughput);
                p.throughput = running_max;
            }
        }
        Self::new(node_class, points)
    }

    pub fn node_class(&self) -> &str {
        &self.node_class
    }

    pub fn points(&self) -> &[SpeedPoint] {
        &self.points
    }

    pub fn min_batch(&self) -> u32 {
        self.points[0].batch_size
    }

    pub fn max_batch(&self) -> u32 {
        self.points[self.points.len() - 1].batch_size
    }

    /// Highest throughput among the knots.
    pub fn peak_throughput(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.throughput)
            .fold(f64::MIN, f64::max)
    }

    pub fn min_throughput(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.throughput)
            .fold(f64::MAX, f64::min)
    }

    /// Smallest knot whose throughput reaches [`PLATEAU_FRACTION`] of the
    /// peak. `None` only when the peak sits at the last knot and no earlier
    /// knot comes within the fraction, i.e. the curve is still climbing.
    pub fn plateau_start(&self) -> Option<u32> {
        let threshold = PLATEAU_FRACTION * self.peak_throughput();
        let first = self.points.iter().position(|p| p.throughput >= threshold)?;
        if first == self.points.len() - 1 {
            None
        } else {
            Some(self.points[first].batch_size)
        }
    }

    pub fn with_class(mut self, node_class: impl Into<String>) -> Self {
        self.node_class = node_class.into();
        self
    }

    /// Throughput at an integer batch size.
    pub fn speed_at(&self, batch_size: u32) -> Result<f64, SpeedModelError> {
        self.interpolate(batch_size as f64)
    }

    /// Throughput at a real-valued batch size inside the probed range.
    pub fn interpolate(&self, batch: f64) -> Result<f64, SpeedModelError> {
        let lo = self.min_batch() as f64;
        let hi = self.max_batch() as f64;
        if !(lo..=hi).contains(&batch) {
            return Err(SpeedModelError::OutOfRange {
                value: batch,
                min: lo,
                max: hi,
            });
        }
        // index of the first knot with batch_size >= batch
        let idx = self
            .points
            .partition_point(|p| (p.batch_size as f64) < batch);
        let right = self.points[idx];
        if right.batch_size as f64 == batch || idx == 0 {
            return Ok(right.throughput);
        }
        let left = self.points[idx - 1];
        let span = (right.batch_size - left.batch_size) as f64;
        let w = (batch - left.batch_size as f64) / span;
        Ok(left.throughput + w * (right.throughput - left.throughput))
    }

    /// Batch size whose interpolated throughput equals `target`.
    ///
    /// Brackets `target` between adjacent knots `SP_n <= target <= SP_{n+1}`
    /// and interpolates the batch size between them. A target that lands on a
    /// knot (including the start of a flat run) returns that knot's batch.
    pub fn batch_for_speed(
        &self,
        target: f64,
        weights: InverseWeights,
    ) -> Result<u32, SpeedModelError> {
        let (lo, hi) = (self.min_throughput(), self.peak_throughput());
        if !target.is_finite() || target < lo || target > hi {
            return Err(SpeedModelError::OutOfRange {
                value: target,
                min: lo,
                max: hi,
            });
        }
        for pair in self.points.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if target == a.throughput {
                return Ok(a.batch_size);
            }
            if a.throughput < target && target <= b.throughput {
                let w = (target - a.throughput) / (b.throughput - a.throughput);
                let (bs_n, bs_n1) = (a.batch_size as f64, b.batch_size as f64);
                let batch = match weights {
                    InverseWeights::Standard => bs_n + (bs_n1 - bs_n) * w,
                    InverseWeights::Literal => bs_n * w + bs_n1 * (1.0 - w),
                };
                return Ok(round_batch(batch));
            }
        }
        // target lies in a tolerated dip with no rising bracket; use the last
        // knot at or below it
        let fallback = self
            .points
            .iter()
            .rev()
            .find(|p| p.throughput <= target)
            .unwrap_or(&self.points[0]);
        Ok(fallback.batch_size)
    }

    /// Uniformly scales every throughput by `capacity_factor` in `(0, 1]`.
    pub fn degrade(&self, capacity_factor: f64) -> Result<SpeedModel, SpeedModelError> {
        if !(capacity_factor > 0.0 && capacity_factor <= 1.0) {
            return Err(SpeedModelError::InvalidFactor(capacity_factor));
        }
        Ok(self.scaled(capacity_factor))
    }

    pub(crate) fn scaled(&self, factor: f64) -> SpeedModel {
        SpeedModel {
            node_class: self.node_class.clone(),
            points: self
                .points
                .iter()
                .map(|p| SpeedPoint::new(p.batch_size, p.throughput * factor))
                .collect(),
        }
    }

    /// Renders the text form.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    /// Parses every model block in `text`. A `speedmodel <class>` header line
    /// starts a block; blank lines and `#` comments are ignored.
    pub fn parse_all(text: &str) -> Result<Vec<SpeedModel>, SpeedModelError> {
        let mut out = Vec::new();
        let mut current: Option<(String, Vec<SpeedPoint>)> = None;
        let finish = |cur: Option<(String, Vec<SpeedPoint>)>,
                      out: &mut Vec<SpeedModel>,
                      line: usize|
         -> Result<(), SpeedModelError> {
            if let Some((class, pts)) = cur {
                let model = SpeedModel::new(class, pts).map_err(|e| SpeedModelError::Parse {
                    line,
                    msg: e.to_string(),
                })?;
                out.push(model);
            }
            Ok(())
        };
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            last_line = lineno;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let first = fields.next().unwrap_or_default();
            if first == "speedmodel" {
                let class = fields.next().ok_or_else(|| SpeedModelError::Parse {
                    line: lineno,
                    msg: "missing node class after `speedmodel`".into(),
                })?;
                if fields.next().is_some() {
                    return Err(SpeedModelError::Parse {
                        line: lineno,
                        msg: "node class must not contain whitespace".into(),
                    });
                }
                finish(current.take(), &mut out, lineno)?;
                current = Some((class.to_string(), Vec::new()));
                continue;
            }
            let Some((_, pts)) = current.as_mut() else {
                return Err(SpeedModelError::Parse {
                    line: lineno,
                    msg: "data before `speedmodel <class>` header".into(),
                });
            };
            let second = fields.next();
            let (Some(thr), None) = (second, fields.next()) else {
                return Err(SpeedModelError::Parse {
                    line: lineno,
                    msg: "expected `<batch_size> <throughput>`".into(),
                });
            };
            let batch = first.parse::<u32>().map_err(|e| SpeedModelError::Parse {
                line: lineno,
                msg: format!("batch size: {e}"),
            })?;
            let throughput = thr.parse::<f64>().map_err(|e| SpeedModelError::Parse {
                line: lineno,
                msg: format!("throughput: {e}"),
            })?;
            pts.push(SpeedPoint::new(batch, throughput));
        }
        finish(current, &mut out, last_line)?;
        Ok(out)
    }
}

impl fmt::Display for SpeedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "speedmodel {}", self.node_class)?;
        for p in &self.points {
            writeln!(f, "{} {}", p.batch_size, p.throughput)?;
        }
        Ok(())
    }
}

impl FromStr for SpeedModel {
    type Err = SpeedModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut models = SpeedModel::parse_all(s)?;
        match models.len() {
            1 => Ok(models.remove(0)),
            n => Err(SpeedModelError::Parse {
                line: 0,
                msg: format!("expected exactly one model, found {n}"),
            }),
        }
    }
}

pub(crate) fn round_batch(batch: f64) -> u32 {
    batch.round().max(1.0) as u32
}

/// One timed step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub wall_secs: f64,
    /// Cores used by the training process over the step.
    pub cpu_cores: f64,
}

/// Anything that can run one training step at a requested batch size and
/// report how long it took.
pub trait WorkloadExecutor {
    fn run_step(&mut self, batch_size: u32) -> Result<Probe, String>;
}

impl<E: WorkloadExecutor + ?Sized> WorkloadExecutor for &mut E {
    fn run_step(&mut self, batch_size: u32) -> Result<Probe, String> {
        (**self).run_step(batch_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub model: SpeedModel,
    /// Median CPU usage across the retained probes.
    pub normal_cpu: f64,
}

/// Probes each batch size `steps_per_probe` times, drops the first probe as
/// warm-up and converts the median wall time of the rest into throughput.
pub fn benchmark_sweep<E: WorkloadExecutor>(
    executor: E,
    node_class: &str,
    batch_sizes: &[u32],
    steps_per_probe: u32,
) -> Result<SpeedModel, SpeedModelError> {
    run_sweep(executor, node_class, batch_sizes, steps_per_probe).map(|o| o.model)
}

/// [`benchmark_sweep`] that also reports the CPU usage seen while probing.
pub fn run_sweep<E: WorkloadExecutor>(
    executor: E,
    node_class: &str,
    batch_sizes: &[u32],
    steps_per_probe: u32,
) -> Result<SweepOutcome, SpeedModelError> {
    let (points, normal_cpu) = probe_points(executor, batch_sizes, steps_per_probe)?;
    Ok(SweepOutcome {
        model: SpeedModel::new(node_class, points)?,
        normal_cpu,
    })
}

/// Raw sweep: median throughput per batch size (first probe dropped as
/// warm-up) and the median CPU level over all kept probes. No monotonicity
/// check is applied.
pub fn probe_points<E: WorkloadExecutor>(
    mut executor: E,
    batch_sizes: &[u32],
    steps_per_probe: u32,
) -> Result<(Vec<SpeedPoint>, f64), SpeedModelError> {
    if batch_sizes.len() < 2 {
        return Err(SpeedModelError::TooFewPoints(batch_sizes.len()));
    }
    for w in batch_sizes.windows(2) {
        if w[0] >= w[1] {
            return Err(SpeedModelError::NotIncreasing {
                prev: w[0],
                next: w[1],
            });
        }
    }
    if steps_per_probe < 2 {
        return Err(SpeedModelError::InvalidProbeCount(steps_per_probe));
    }
    let mut points = Vec::with_capacity(batch_sizes.len());
    let mut cpus = Vec::new();
    for &batch_size in batch_sizes {
        if batch_size == 0 {
            return Err(SpeedModelError::InvalidPoint {
                batch_size,
                throughput: f64::NAN,
            });
        }
        let mut walls = Vec::with_capacity(steps_per_probe as usize);
        for i in 0..steps_per_probe {
            let probe = executor
                .run_step(batch_size)
                .map_err(|reason| SpeedModelError::ProbeFailure { batch_size, reason })?;
            if !(probe.wall_secs.is_finite() && probe.wall_secs > 0.0) {
                return Err(SpeedModelError::ProbeFailure {
                    batch_size,
                    reason: format!("non-positive step time {}", probe.wall_secs),
                });
            }
            if i > 0 {
                walls.push(probe.wall_secs);
                cpus.push(probe.cpu_cores);
            }
        }
        let wall = median(&mut walls);
        points.push(SpeedPoint::new(batch_size, batch_size as f64 / wall));
    }
    Ok((points, median(&mut cpus)))
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple() -> SpeedModel {
        SpeedModel::from_pairs("c", &[(100, 20.0), (200, 30.0)]).unwrap()
    }

    /// Executor whose step time follows `b / f(b)` exactly.
    struct CurveExecutor<F: Fn(u32) -> f64>(F);

    impl<F: Fn(u32) -> f64> WorkloadExecutor for CurveExecutor<F> {
        fn run_step(&mut self, b: u32) -> Result<Probe, String> {
            Ok(Probe {
                wall_secs: b as f64 / (self.0)(b),
                cpu_cores: 4.0,
            })
        }
    }

    #[test]
    fn envelope_lifts_dips() {
        let pts = vec![SpeedPoint::new(1, 10.0), SpeedPoint::new(2, 5.0), SpeedPoint::new(3, 12.0)];
        assert!(SpeedModel::new("c", pts.clone()).is_err());
        let m = SpeedModel::monotone_envelope("c", pts).unwrap();
        assert_eq!(m.speed_at(2).unwrap(), 10.0);
        assert_eq!(m.speed_at(3).unwrap(), 12.0);
    }

    #[test]
    fn speed_at_midpoint_knot_and_range() {
        let m = simple();
        assert_eq!(m.speed_at(150).unwrap(), 25.0);
        assert_eq!(m.speed_at(100).unwrap(), 20.0);
        assert_eq!(m.speed_at(200).unwrap(), 30.0);
        assert!(matches!(
            m.speed_at(250),
            Err(SpeedModelError::OutOfRange { .. })
        ));
        assert!(matches!(
            m.speed_at(99),
            Err(SpeedModelError::OutOfRange { .. })
        ));
    }

    #[test]
    fn batch_for_speed_examples() {
        let m = simple();
        assert_eq!(m.batch_for_speed(25.0, InverseWeights::Standard).unwrap(), 150);
        assert_eq!(m.batch_for_speed(25.0, InverseWeights::Literal).unwrap(), 150);
        assert_eq!(m.batch_for_speed(20.0, InverseWeights::Standard).unwrap(), 100);
        // 100 + (200 - 100) * (22 - 20) / (30 - 20)
        assert_eq!(m.batch_for_speed(22.0, InverseWeights::Standard).unwrap(), 120);
        // swapped weights: 100 * 0.2 + 200 * 0.8
        assert_eq!(m.batch_for_speed(22.0, InverseWeights::Literal).unwrap(), 180);
        assert!(matches!(
            m.batch_for_speed(31.0, InverseWeights::Standard),
            Err(SpeedModelError::OutOfRange { .. })
        ));
    }

    #[test]
    fn flat_segment_returns_cheaper_batch() {
        let m = SpeedModel::from_pairs("c", &[(10, 5.0), (20, 8.0), (40, 8.0)]).unwrap();
        assert_eq!(m.batch_for_speed(8.0, InverseWeights::Standard).unwrap(), 20);
    }

    #[test]
    fn degrade_examples() {
        let m = simple();
        assert_eq!(m.degrade(1.0).unwrap(), m);
        let half = m.degrade(0.5).unwrap();
        assert_eq!(
            half.points(),
            &[SpeedPoint::new(100, 10.0), SpeedPoint::new(200, 15.0)]
        );
        assert_eq!(m.degrade(0.0), Err(SpeedModelError::InvalidFactor(0.0)));
        assert!(m.degrade(1.5).is_err());
    }

    #[test]
    fn construction_rejects_bad_tables() {
        assert_eq!(
            SpeedModel::from_pairs("c", &[(10, 1.0)]),
            Err(SpeedModelError::TooFewPoints(1))
        );
        assert!(matches!(
            SpeedModel::from_pairs("c", &[(10, 1.0), (10, 2.0)]),
            Err(SpeedModelError::NotIncreasing { .. })
        ));
        assert!(matches!(
            SpeedModel::from_pairs("c", &[(10, 10.0), (20, 9.0)]),
            Err(SpeedModelError::NonMonotonic { .. })
        ));
        // a 2% dip is noise
        assert!(SpeedModel::from_pairs("c", &[(10, 10.0), (20, 9.8), (30, 10.1)]).is_ok());
    }

    #[test]
    fn plateau_start_picks_smallest_knot_within_one_percent() {
        let m = SpeedModel::from_pairs(
            "c",
            &[(30, 22.0), (60, 31.0), (120, 31.2), (180, 31.4), (240, 31.6)],
        )
        .unwrap();
        assert_eq!(m.plateau_start(), Some(180));
        let climbing = SpeedModel::from_pairs("c", &[(1, 1.0), (2, 2.0)]).unwrap();
        assert_eq!(climbing.plateau_start(), None);
    }

    #[test]
    fn sweep_matches_closed_form_curve() {
        let f = |b: u32| 31.1 * b as f64 / (b as f64 + 20.0);
        let grid = [30, 60, 120, 180, 240];
        let m = benchmark_sweep(CurveExecutor(f), "mobilenet", &grid, 5).unwrap();
        for (p, &b) in m.points().iter().zip(&grid) {
            assert_eq!(p.batch_size, b);
            assert!((p.throughput - f(b)).abs() / f(b) < 0.02);
        }
    }

    #[test]
    fn sweep_needs_two_distinct_batches() {
        let exec = CurveExecutor(|_| 1.0);
        assert_eq!(
            benchmark_sweep(exec, "c", &[64], 5),
            Err(SpeedModelError::TooFewPoints(1))
        );
        let exec = CurveExecutor(|_| 1.0);
        assert!(matches!(
            benchmark_sweep(exec, "c", &[64, 64], 5),
            Err(SpeedModelError::NotIncreasing { .. })
        ));
    }

    #[test]
    fn constant_step_time_gives_proportional_throughput() {
        struct Fixed;
        impl WorkloadExecutor for Fixed {
            fn run_step(&mut self, _: u32) -> Result<Probe, String> {
                Ok(Probe {
                    wall_secs: 0.5,
                    cpu_cores: 1.0,
                })
            }
        }
        let m = benchmark_sweep(Fixed, "c", &[8, 16, 32], 3).unwrap();
        for p in m.points() {
            assert_eq!(p.throughput, p.batch_size as f64 * 2.0);
        }
    }

    #[test]
    fn sweep_discards_warmup_and_uses_median() {
        struct Scripted(Vec<f64>);
        impl WorkloadExecutor for Scripted {
            fn run_step(&mut self, _: u32) -> Result<Probe, String> {
                Ok(Probe {
                    wall_secs: self.0.remove(0),
                    cpu_cores: 1.0,
                })
            }
        }
        // warm-up 9.0 is dropped, median of {1, 3, 2} is 2
        let exec = Scripted(vec![9.0, 1.0, 3.0, 2.0, 9.0, 2.0, 2.0, 2.0]);
        let m = benchmark_sweep(exec, "c", &[10, 20], 4).unwrap();
        assert_eq!(m.points()[0].throughput, 5.0);
        assert_eq!(m.points()[1].throughput, 10.0);
    }

    #[test]
    fn sweep_reports_probe_failure_and_dips() {
        struct Failing;
        impl WorkloadExecutor for Failing {
            fn run_step(&mut self, _: u32) -> Result<Probe, String> {
                Err("boom".into())
            }
        }
        assert!(matches!(
            benchmark_sweep(Failing, "c", &[1, 2], 2),
            Err(SpeedModelError::ProbeFailure { batch_size: 1, .. })
        ));
        // throughput collapses at the larger batch
        let exec = CurveExecutor(|b| if b > 10 { 1.0 } else { 10.0 });
        assert!(matches!(
            benchmark_sweep(exec, "c", &[10, 20], 2),
            Err(SpeedModelError::NonMonotonic { .. })
        ));
    }

    #[test]
    fn text_format_round_trip_and_errors() {
        let m = SpeedModel::from_pairs("xeon", &[(30, 22.0), (60, 31.25)]).unwrap();
        let text = m.to_text();
        assert_eq!(text, "speedmodel xeon\n30 22\n60 31.25\n");
        assert_eq!(text.parse::<SpeedModel>().unwrap(), m);

        let both = format!("# two\n{text}\nspeedmodel csd\n5 1\n10 2\n");
        let parsed = SpeedModel::parse_all(&both).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1].node_class(), "csd");

        assert!(matches!(
            "30 22\n".parse::<SpeedModel>(),
            Err(SpeedModelError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            "speedmodel x\n30 22 7\n".parse::<SpeedModel>(),
            Err(SpeedModelError::Parse { line: 2, .. })
        ));
    }
}
