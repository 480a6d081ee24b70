//! Entry points behind the `oc-mains` binary.

use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};

use crate::config::{ExperimentConfig, Mode};
use crate::error::Error;
use crate::evaluation::{inequality_monitor, MetricSeries, RunResult, StepRecord, Violations, INEQUALITY_TOLERANCE};
use crate::filter::{Filter, FilterConfig, ImuBiases, ImuSample, MagSample, NominalState};
use crate::geometry::{yaw_of, Quaternion, Vec3};
use crate::io::{self, Dataset, OutputLayout};
use crate::magfield::ArrayModel;
use crate::simulator::{self, FilterSelection, GroundTruth, Scenario};

/// Grid spacing (m) of the exported field map.
const FIELD_GRID_STEP: f64 = 0.05;
/// Samples averaged to level the initial attitude when no ground truth exists;
/// the recording must start at rest.
const LEVELING_SAMPLES: usize = 10;
/// Allowed relative mismatch between the configured and recorded sample time.
const SAMPLE_TIME_TOLERANCE: f64 = 0.01;

/// Failure with its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    /// Bad configuration or input data.
    #[error(transparent)]
    Config(Error),
    /// A run failed after the inputs were accepted.
    #[error(transparent)]
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config_err(e: Error) -> Failure {
    Failure::Config(e)
}

fn runtime_err(e: Error) -> Failure {
    Failure::Runtime(e)
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub runs: Option<usize>,
    pub seed: Option<u64>,
    pub oc: Option<FilterSelection>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

/// Reads `path` (or the defaults) and applies the overrides.
pub fn load_config(path: Option<&Path>, mode: Mode, ov: &Overrides) -> CliResult<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).map_err(config_err)?,
        None => ExperimentConfig::default(),
    };
    if path.is_some() && cfg.mode != mode {
        warn!("config mode {:?} overridden by the {:?} command", cfg.mode, mode);
    }
    cfg.mode = mode;
    if let Some(r) = ov.runs {
        cfg.runs = Some(r);
    }
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(oc) = ov.oc {
        cfg.oc = oc;
    }
    if let Some(o) = &ov.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &ov.dataset {
        cfg.dataset = Some(d.clone());
    }
    cfg.sync_sample_time();
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

/// Aggregated outcome of a sweep.
#[derive(Clone, Debug)]
pub struct Report {
    pub runs: Vec<RunResult>,
    pub series: Vec<MetricSeries>,
}

impl Report {
    fn new(runs: Vec<RunResult>, truth: Option<&GroundTruth>, selection: FilterSelection) -> CliResult<Self> {
        let series = selection
            .variants()
            .iter()
            .map(|&oc| {
                let group: Vec<&RunResult> = runs.iter().filter(|r| r.constrained == oc).collect();
                MetricSeries::compute(&group, truth)
            })
            .collect::<crate::Result<Vec<_>>>()
            .map_err(runtime_err)?;
        Ok(Self { runs, series })
    }

    fn write(&self, out: &OutputLayout, cfg: &ExperimentConfig) -> CliResult<()> {
        let write = || -> crate::Result<()> {
            std::fs::create_dir_all(&out.root).map_err(|e| Error::io(&out.root, e))?;
            io::write_metrics_file(&out.metrics(), &self.series)?;
            if cfg.diagnostics {
                io::write_diagnostics(&out.diagnostics(), &self.runs)?;
            }
            for r in &self.runs {
                io::write_run(&out.runs().join(io::run_file_name(r)), r)?;
            }
            std::fs::write(out.config(), cfg.to_toml()).map_err(|e| Error::io(out.config(), e))
        };
        write().map_err(runtime_err)
    }

    /// One line per filter.
    pub fn print(&self, mut w: impl Write) -> std::io::Result<()> {
        for s in &self.series {
            let v = s.yaw_violations();
            let rmse = s.rmse[3].last().map_or("n/a".to_string(), |r| format!("{r:.4} rad"));
            let pu = s.perceived[3].last().copied().unwrap_or(f64::NAN);
            writeln!(w, "{}: final yaw RMSE {rmse}, perceived {pu:.4} rad, {}", s.label, describe(&v))?;
        }
        Ok(())
    }
}

fn describe(v: &Violations) -> String {
    match v.first {
        Some(k) => format!("consistency violations: {} (first at step {k})", v.count),
        None => "consistency violations: 0".to_string(),
    }
}

/// Simulation protocol: Monte-Carlo sweep over the configured scenario.
pub fn run_sim(cfg: &ExperimentConfig, threads: Option<usize>) -> CliResult<Report> {
    let array = cfg.geometry.build().map_err(config_err)?;
    let scenario = Scenario::new(&cfg.trajectory, &cfg.environment, array, cfg.filter.clone(), cfg.noise.clone(), cfg.seed)
        .map_err(config_err)?;
    let runs = cfg.runs();
    info!("simulating {runs} runs");
    let results = simulator::monte_carlo(&scenario, runs, cfg.seed, cfg.oc, cfg.diagnostics, threads).map_err(runtime_err)?;
    let report = Report::new(results, Some(&scenario.trajectory.truth), cfg.oc)?;

    let out = OutputLayout::new(&cfg.out);
    report.write(&out, cfg)?;
    let first = simulator::run_input(&scenario, cfg.seed, 0);
    let extras = || -> crate::Result<()> {
        io::write_dataset(&out.dataset(), &first.imu, &first.mag, Some(&scenario.trajectory.truth))?;
        let (lo, hi) = (-cfg.environment.margin, cfg.trajectory.side + cfg.environment.margin);
        io::write_field_grid(&out.field(), &scenario.environment, [lo, lo], [hi, hi], cfg.trajectory.height, FIELD_GRID_STEP)
    };
    extras().map_err(runtime_err)?;
    Ok(report)
}

/// Initial attitude from the mean specific force (yaw zero).
pub fn level(imu: &[ImuSample]) -> Quaternion {
    let n = imu.len().clamp(1, LEVELING_SAMPLES);
    let s = imu.iter().take(n).fold(Vec3::zeros(), |acc, x| acc + x.accel) / n as f64;
    let roll = s.y.atan2(s.z);
    let pitch = (-s.x).atan2((s.y * s.y + s.z * s.z).sqrt());
    Quaternion::from_euler(roll, pitch, 0.0)
}

/// Reference state at the start of `seg`: ground truth if available, else a
/// levelled attitude at the origin at rest.
fn segment_reference(data: &Dataset, seg: &Range<usize>, array: &ArrayModel, cfg: &FilterConfig, stationary: bool) -> crate::Result<NominalState> {
    let first_mag = data.mag[seg.clone()]
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::Config(format!("no magnetometer data in the segment starting at t = {}", data.imu[seg.start].t)))?;
    let theta = array.fit(&first_mag.values);
    let biases = cfg.estimate_biases.then_some(ImuBiases::default());
    let k = seg.start;
    Ok(match &data.truth {
        Some(gt) => NominalState { p: gt.p[k], v: if stationary { Vec3::zeros() } else { gt.v[k] }, q: gt.q[k], theta, biases },
        None => NominalState { p: Vec3::zeros(), v: Vec3::zeros(), q: level(&data.imu[seg.clone()]), theta, biases },
    })
}

/// Runs one filter over every segment, restarting from `initials[i]` at the
/// start of segment `i`.
pub fn run_segments(
    array: Arc<ArrayModel>,
    cfg: &FilterConfig,
    data: &Dataset,
    segments: &[Range<usize>],
    initials: &[NominalState],
    constrained: bool,
    diagnostics: bool,
    index: usize,
) -> crate::Result<RunResult> {
    let wrap = |e: Error| Error::Run { index, source: Box::new(e) };
    let mut steps = Vec::with_capacity(data.len());
    let mut diag = Vec::new();
    let mut initial = None;
    for (seg, init) in segments.iter().zip(initials) {
        let mut filter = Filter::new(array.clone(), cfg.clone(), init.clone(), constrained).map_err(wrap)?.with_diagnostics(diagnostics);
        initial.get_or_insert_with(|| StepRecord::new(data.imu[seg.start].t, init, filter.covariance()));
        for k in seg.clone() {
            let mag: Option<&MagSample> = data.mag[k].as_ref();
            let out = filter.step(&data.imu[k], mag).map_err(wrap)?;
            steps.push(StepRecord::new(data.imu[k].t, &out.posterior, &out.covariance));
            diag.extend(out.diagnostics);
        }
    }
    let initial = initial.ok_or_else(|| Error::Dimension("no segments".into()))?;
    Ok(RunResult { index, constrained, initial, steps, diagnostics: diag })
}

fn median_step(imu: &[ImuSample]) -> f64 {
    let mut dt: Vec<f64> = imu.windows(2).map(|w| w[1].t - w[0].t).collect();
    dt.sort_by(f64::total_cmp);
    dt[dt.len() / 2]
}

/// Recorded-data protocol: both filters over the dataset, re-initialized
/// `runs` times from random draws of the prior.
/// Recorded-data protocol: repeated random re-initializations over one dataset.
pub fn run_real(cfg: &ExperimentConfig, threads: Option<usize>) -> CliResult<Report> {
    let array = cfg.geometry.build().map_err(config_err)?;
    let dir = cfg.dataset.as_ref().ok_or_else(|| config_err(Error::Config("no dataset directory".into())))?;
    let data = Dataset::load(dir, array.geometry().len(), cfg.filter.ts).map_err(config_err)?;
    let dt = median_step(&data.imu);
    if (dt - cfg.filter.ts).abs() > SAMPLE_TIME_TOLERANCE * cfg.filter.ts {
        return Err(config_err(Error::Config(format!("IMU sample time {dt} s does not match filter.ts = {} s", cfg.filter.ts))));
    }
    let segments = data.segments(cfg.filter.ts);
    let stationary = cfg.trajectory.stationary_start;
    let references = segments
        .iter()
        .map(|s| segment_reference(&data, s, &array, &cfg.filter, stationary))
        .collect::<crate::Result<Vec<_>>>()
        .map_err(config_err)?;
    if let Some(q) = references.iter().map(|r| r.q).find(|q| yaw_of(q).is_err()) {
        return Err(config_err(Error::Config(format!("initial attitude {q:?} is at gimbal lock"))));
    }

    let runs = cfg.runs();
    info!("{} samples in {} segments, {runs} re-initializations", data.len(), segments.len());
    let nested = simulator::run_parallel(runs, threads, |i| {
        let mut rng = simulator::stream_rng(cfg.seed, i as u64 + 1);
        let initials: Vec<NominalState> =
            references.iter().map(|r| simulator::draw_initial(r, &cfg.filter, stationary, &mut rng)).collect();
        cfg.oc
            .variants()
            .iter()
            .map(|&oc| run_segments(array.clone(), &cfg.filter, &data, &segments, &initials, oc, cfg.diagnostics, i))
            .collect::<crate::Result<Vec<_>>>()
    })
    .map_err(runtime_err)?;
    let report = Report::new(nested.into_iter().flatten().collect(), data.truth.as_ref(), cfg.oc)?;
    report.write(&OutputLayout::new(&cfg.out), cfg)?;
    Ok(report)
}

/// Prints the diagnostics summary of a results directory.
pub fn analyze(dir: &Path, mut w: impl Write) -> CliResult<()> {
    let out = OutputLayout::new(dir);
    if !out.metrics().is_file() {
        return Err(config_err(Error::Config(format!("{}: no metrics.csv found", dir.display()))));
    }
    let metrics = io::read_metrics(&out.metrics()).map_err(config_err)?;
    if metrics.is_empty() {
        return Err(config_err(Error::Config(format!("{}: metrics.csv has no rows", out.metrics().display()))));
    }
    let diagnostics = if out.diagnostics().is_file() { io::read_diagnostics(&out.diagnostics()).map_err(config_err)? } else { Vec::new() };
    let print = |w: &mut dyn Write| -> std::io::Result<()> {
        for m in &metrics {
            writeln!(w, "[{}] {} steps", m.label, m.perceived.len())?;
            if let Some(r) = m.final_rmse {
                writeln!(w, "  final RMSE: position {:.4} {:.4} {:.4} m, yaw {:.4} rad", r[0], r[1], r[2], r[3])?;
            }
            let yaw: Vec<f64> = m.perceived.iter().map(|p| p[3]).collect();
            writeln!(w, "  {}", describe(&inequality_monitor(&yaw, m.initial[3], INEQUALITY_TOLERANCE)))?;
            let below = m
                .perceived
                .iter()
                .filter(|p| (0..3).any(|i| p[i] - m.initial[i] < -INEQUALITY_TOLERANCE))
                .count();
            writeln!(w, "  position steps below the initial uncertainty: {below}")?;
            match diagnostics.iter().find(|d| d.label == m.label) {
                Some(d) => {
                    writeln!(w, "  max nullspace residual: {:.3e}", d.span_residual)?;
                    writeln!(
                        w,
                        "  max constraint residuals: velocity {:.3e}, rotation {:.3e}, field {:.3e}",
                        d.residual_velocity, d.residual_rotation, d.residual_field
                    )?;
                    writeln!(w, "  max SO(3) error: {:.3e}, untouched blocks identical: {}", d.so3_error, d.untouched_identical)?;
                }
                None => writeln!(w, "  no diagnostics recorded")?,
            }
        }
        Ok(())
    };
    print(&mut w).map_err(|e| runtime_err(Error::io(dir, e)))
}
