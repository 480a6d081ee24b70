//! Synthetic square trajectory, sensor corruption and Monte-Carlo runs.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{RunResult, StepRecord};
use crate::filter::{Filter, FilterConfig, ImuBiases, ImuSample, MagSample, NominalState, StateLayout};
use crate::geometry::{rot_log, Quaternion, Vec3};
use crate::magfield::{ArrayModel, Dipole, DipoleEnvironment};

/// Environment variable capping the Monte-Carlo thread count.
pub const THREADS_ENV: &str = "OC_MAINS_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// Side of the square (m).
    pub side: f64,
    pub laps: usize,
    /// Total duration (s).
    pub duration: f64,
    /// Sampling rate (Hz).
    pub rate: f64,
    /// Time spent turning in place at each corner (s).
    pub turn_time: f64,
    /// Height of the path above the navigation origin (m).
    pub height: f64,
    /// Turn the board at the corners so that it faces along the path.
    pub follow_path: bool,
    /// The platform is known to start at rest: the initial velocity estimate
    /// is exactly zero instead of a draw from the prior.
    pub stationary_start: bool,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { side: 2.0, laps: 1, duration: 8.0, rate: 100.0, turn_time: 0.5, height: 0.0, follow_path: true, stationary_start: true }
    }
}

impl TrajectoryConfig {
    pub fn ts(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.rate).round() as usize
    }

    fn side_time(&self) -> f64 {
        self.duration / (4 * self.laps) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("trajectory: {m}")));
        if !(self.side > 0.0 && self.duration > 0.0 && self.rate > 0.0 && self.height.is_finite()) {
            return bad("side, duration and rate must be positive".into());
        }
        if self.laps == 0 {
            return bad("laps must be at least 1".into());
        }
        let n = self.duration * self.rate;
        if (n - n.round()).abs() > 1e-9 * n.max(1.0) || n.round() < 2.0 {
            return bad(format!("duration·rate = {n} is not an integer sample count"));
        }
        if !(self.turn_time >= 0.0 && self.turn_time < self.side_time()) {
            return bad(format!("turn_time {} must be below the side time {}", self.turn_time, self.side_time()));
        }
        Ok(())
    }
}

/// Smooth step with zero first and second derivatives at both ends.
fn quintic(x: f64) -> (f64, f64) {
    let x = x.clamp(0.0, 1.0);
    let s = x * x * x * (10.0 + x * (-15.0 + 6.0 * x));
    let ds = 30.0 * x * x * (1.0 - x) * (1.0 - x);
    (s, ds)
}

/// Position, velocity and yaw of the square path at time `t`.
pub fn pose_at(cfg: &TrajectoryConfig, t: f64) -> (Vec3, Vec3, f64) {
    let corners = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
    let ts = cfg.side_time();
    let move_time = ts - cfg.turn_time;
    let leg = ((t / ts).floor() as i64).clamp(0, (4 * cfg.laps) as i64 - 1) as usize;
    let local = t - leg as f64 * ts;
    let side = leg % 4;
    let (x0, y0) = corners[side];
    let (x1, y1) = corners[(side + 1) % 4];
    let heading = leg as f64 * FRAC_PI_2;
    let z = cfg.height;
    if local < move_time {
        let (s, ds) = quintic(local / move_time);
        let dir = Vec3::new(x1 - x0, y1 - y0, 0.0) * cfg.side;
        let p = Vec3::new(x0 * cfg.side, y0 * cfg.side, z) + dir * s;
        let yaw = if cfg.follow_path { heading } else { 0.0 };
        (p, dir * (ds / move_time), yaw)
    } else {
        let p = Vec3::new(x1 * cfg.side, y1 * cfg.side, z);
        let yaw = if cfg.follow_path {
            let (s, _) = if cfg.turn_time > 0.0 { quintic((local - move_time) / cfg.turn_time) } else { (1.0, 0.0) };
            heading + FRAC_PI_2 * s
        } else {
            0.0
        };
        (p, Vec3::zeros(), yaw)
    }
}

/// Sampled true trajectory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub t: Vec<f64>,
    pub p: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub q: Vec<Quaternion>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Ground truth and the noise-free specific force / angular rate per sample.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub truth: GroundTruth,
    pub specific_force: Vec<Vec3>,
    pub angular_rate: Vec<Vec3>,
}

/// Samples the square and derives IMU signals that the discrete strapdown
/// equations integrate back onto the sampled velocity and attitude.
pub fn square_trajectory(cfg: &TrajectoryConfig, g: &Vec3) -> Result<Trajectory> {
    cfg.validate()?;
    let n = cfg.samples();
    let ts = cfg.ts();
    let mut truth = GroundTruth::default();
    for k in 0..=n {
        let t = k as f64 * ts;
        let (p, v, yaw) = pose_at(cfg, t);
        truth.t.push(t);
        truth.p.push(p);
        truth.v.push(v);
        truth.q.push(Quaternion::from_euler(0.0, 0.0, yaw));
    }
    let mut specific_force = Vec::with_capacity(n);
    let mut angular_rate = Vec::with_capacity(n);
    for k in 0..n {
        let r0 = truth.q[k].to_rot();
        let r1 = truth.q[k + 1].to_rot();
        specific_force.push(r0.transpose() * ((truth.v[k + 1] - truth.v[k]) / ts - g));
        angular_rate.push(rot_log(&(r0.transpose() * r1)) / ts);
    }
    truth.t.truncate(n);
    truth.p.truncate(n);
    truth.v.truncate(n);
    truth.q.truncate(n);
    Ok(Trajectory { truth, specific_force, angular_rate })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// m/s²/√Hz
    pub accel_noise: f64,
    /// rad/s/√Hz
    pub gyro_noise: f64,
    /// m/s², drawn once per run
    pub accel_bias_std: f64,
    /// rad/s, drawn once per run
    pub gyro_bias_std: f64,
    /// µT per axis
    pub mag_noise: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { accel_noise: 0.02, gyro_noise: 0.002, accel_bias_std: 0.05, gyro_bias_std: 0.005, mag_noise: 0.5 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for v in [self.accel_noise, self.gyro_noise, self.accel_bias_std, self.gyro_bias_std, self.mag_noise] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("noise entries must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn normal3(rng: &mut impl Rng, std: f64) -> Vec3 {
    Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * std)
}

/// Draws one constant bias pair.
pub fn draw_biases(noise: &NoiseConfig, rng: &mut impl Rng) -> ImuBiases {
    ImuBiases { accel: normal3(rng, noise.accel_bias_std), gyro: normal3(rng, noise.gyro_bias_std) }
}

/// Adds biases and white noise to the true IMU signals.
pub fn simulate_imu(traj: &Trajectory, noise: &NoiseConfig, biases: &ImuBiases, rng: &mut impl Rng) -> Vec<ImuSample> {
    let ts = traj.truth.t.get(1).map_or(1.0, |t1| t1 - traj.truth.t[0]);
    let sa = noise.accel_noise / ts.sqrt();
    let sg = noise.gyro_noise / ts.sqrt();
    (0..traj.truth.len())
        .map(|k| ImuSample {
            t: traj.truth.t[k],
            accel: traj.specific_force[k] + biases.accel + normal3(rng, sa),
            gyro: traj.angular_rate[k] + biases.gyro + normal3(rng, sg),
        })
        .collect()
}

/// Noise-free array readings `Rᵀ B(p + R rᵢ)`, stacked in sensor order.
pub fn true_mag(truth: &GroundTruth, env: &DipoleEnvironment, array: &ArrayModel) -> Result<Vec<MagSample>> {
    let sensors = array.geometry().positions();
    (0..truth.len())
        .map(|k| {
            let r = truth.q[k].to_rot();
            let mut values = DVector::zeros(3 * sensors.len());
            for (i, s) in sensors.iter().enumerate() {
                let b = r.transpose() * env.field(&(truth.p[k] + r * s))?;
                values.fixed_rows_mut::<3>(3 * i).copy_from(&b);
            }
            Ok(MagSample { t: truth.t[k], values })
        })
        .collect()
}

/// Array readings with additive white noise.
pub fn simulate_mag(
    truth: &GroundTruth,
    env: &DipoleEnvironment,
    array: &ArrayModel,
    noise: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<Vec<MagSample>> {
    Ok(add_mag_noise(&true_mag(truth, env, array)?, noise.mag_noise, rng))
}

fn add_mag_noise(clean: &[MagSample], std: f64, rng: &mut impl Rng) -> Vec<MagSample> {
    clean
        .iter()
        .map(|m| MagSample { t: m.t, values: m.values.map(|v| v + rng.sample::<f64, _>(StandardNormal) * std) })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentConfig {
    /// Earth field, navigation frame (µT).
    pub earth: [f64; 3],
    pub dipoles: usize,
    /// Horizontal extent of dipole positions around the square (m).
    pub margin: f64,
    /// Vertical distance range of dipoles from the trajectory plane (m).
    pub min_depth: f64,
    pub max_depth: f64,
    /// Largest dipole contribution along the trajectory (µT).
    pub max_anomaly: f64,
    pub exclusion_radius: f64,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            earth: [18.0, 0.0, -41.0],
            dipoles: 8,
            margin: 1.0,
            min_depth: 0.5,
            max_depth: 3.0,
            max_anomaly: 20.0,
            exclusion_radius: DipoleEnvironment::DEFAULT_EXCLUSION_RADIUS,
        }
    }
}

impl EnvironmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.min_depth <= self.max_depth && self.margin >= 0.0 && self.max_anomaly >= 0.0) {
            return Err(Error::Config("environment: need 0 < min_depth <= max_depth, margin >= 0, max_anomaly >= 0".into()));
        }
        if self.exclusion_radius < 0.0 || self.min_depth < self.exclusion_radius {
            return Err(Error::Config("environment: min_depth must exceed exclusion_radius".into()));
        }
        Ok(())
    }
}

/// Random dipole layout around the square, scaled so the strongest anomaly
/// seen by the array along `truth` equals `max_anomaly`.
pub fn random_environment(
    cfg: &EnvironmentConfig,
    traj: &TrajectoryConfig,
    truth: &GroundTruth,
    array: &ArrayModel,
    rng: &mut impl Rng,
) -> Result<DipoleEnvironment> {
    cfg.validate()?;
    let lo = -cfg.margin;
    let hi = traj.side + cfg.margin;
    let dipoles: Vec<Dipole> = (0..cfg.dipoles)
        .map(|_| {
            let depth = rng.random_range(cfg.min_depth..=cfg.max_depth);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let position = Vec3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), traj.height + sign * depth);
            let moment = normal3(rng, 1.0).normalize();
            Dipole { position, moment }
        })
        .collect();
    let mut env = DipoleEnvironment { earth: Vec3::from(cfg.earth), dipoles, exclusion_radius: cfg.exclusion_radius };
    let mut peak: f64 = 0.0;
    for k in 0..truth.len() {
        let r = truth.q[k].to_rot();
        for s in array.geometry().positions() {
            peak = peak.max(env.anomaly(&(truth.p[k] + r * s))?.norm());
        }
    }
    if peak > 0.0 {
        let scale = cfg.max_anomaly / peak;
        for d in &mut env.dipoles {
            d.moment *= scale;
        }
    }
    Ok(env)
}

/// Everything shared by the runs of one Monte-Carlo sweep.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: TrajectoryConfig,
    pub trajectory: Trajectory,
    pub environment: DipoleEnvironment,
    pub array: Arc<ArrayModel>,
    pub clean_mag: Vec<MagSample>,
    pub filter: FilterConfig,
    pub noise: NoiseConfig,
}

impl Scenario {
    /// Builds the trajectory and a seeded random environment.
    pub fn new(
        traj: &TrajectoryConfig,
        env: &EnvironmentConfig,
        array: Arc<ArrayModel>,
        filter: FilterConfig,
        noise: NoiseConfig,
        seed: u64,
    ) -> Result<Self> {
        filter.validate()?;
        noise.validate()?;
        if (filter.ts - traj.ts()).abs() > 1e-12 {
            return Err(Error::Config(format!("filter.ts = {} but the trajectory rate gives {}", filter.ts, traj.ts())));
        }
        let trajectory = square_trajectory(traj, &filter.g())?;
        let mut rng = stream_rng(seed, 0);
        let environment = random_environment(env, traj, &trajectory.truth, &array, &mut rng)?;
        let clean_mag = true_mag(&trajectory.truth, &environment, &array)?;
        Ok(Self { config: traj.clone(), trajectory, environment, array, clean_mag, filter, noise })
    }

    /// Coefficients that reproduce the noise-free readings at sample `k`.
    pub fn true_theta(&self, k: usize) -> DVector<f64> {
        self.array.fit(&self.clean_mag[k].values)
    }
}

/// Independent generator for `(seed, stream)`; stream 0 is the environment,
/// run `i` uses stream `i + 1`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Which filters a sweep runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterSelection {
    On,
    Off,
    #[default]
    Both,
}

impl FilterSelection {
    pub fn variants(self) -> &'static [bool] {
        match self {
            FilterSelection::On => &[true],
            FilterSelection::Off => &[false],
            FilterSelection::Both => &[false, true],
        }
    }
}

/// Sensor data and initial estimate of one run.
#[derive(Clone, Debug)]
pub struct RunInput {
    pub imu: Vec<ImuSample>,
    pub mag: Vec<MagSample>,
    pub initial: NominalState,
    pub biases: ImuBiases,
}

/// Draws an initial estimate around `truth` from the filter prior.
///
/// The attitude error is drawn about navigation axes and moved into the body
/// frame of `truth`. Bias estimates start at zero since the true biases carry
/// the prior spread; with `stationary` the velocity estimate is exactly zero.
pub fn draw_initial(truth: &NominalState, cfg: &FilterConfig, stationary: bool, rng: &mut impl Rng) -> NominalState {
    let layout = truth.layout();
    let p0 = cfg.initial_covariance(layout, &Quaternion::identity());
    let mut dx = DVector::from_fn(layout.dim(), |i, _| rng.sample::<f64, _>(StandardNormal) * p0[(i, i)].sqrt());
    let nav_err: Vec3 = dx.fixed_rows::<3>(StateLayout::ORI).into_owned();
    dx.fixed_rows_mut::<3>(StateLayout::ORI).copy_from(&(truth.q.to_rot().transpose() * nav_err));
    let mut initial = truth.boxplus(&dx);
    if stationary {
        initial.v = Vec3::zeros();
    }
    if initial.biases.is_some() {
        initial.biases = Some(ImuBiases::default());
    }
    initial
}

/// Draws biases, the initial estimation error and all sensor noise of run `index`.
pub fn run_input(scenario: &Scenario, seed: u64, index: usize) -> RunInput {
    let mut rng = stream_rng(seed, index as u64 + 1);
    let biases = draw_biases(&scenario.noise, &mut rng);
    let truth = &scenario.trajectory.truth;
    let true_state = NominalState {
        p: truth.p[0],
        v: truth.v[0],
        q: truth.q[0],
        theta: scenario.true_theta(0),
        biases: scenario.filter.estimate_biases.then_some(biases),
    };
    let initial = draw_initial(&true_state, &scenario.filter, scenario.config.stationary_start, &mut rng);
    let imu = simulate_imu(&scenario.trajectory, &scenario.noise, &biases, &mut rng);
    let mag = add_mag_noise(&scenario.clean_mag, scenario.noise.mag_noise, &mut rng);
    RunInput { imu, mag, initial, biases }
}

/// Runs one filter over a data stream, recording every posterior.
pub fn run_filter(
    array: Arc<ArrayModel>,
    cfg: &FilterConfig,
    input: &RunInput,
    constrained: bool,
    diagnostics: bool,
    index: usize,
) -> Result<RunResult> {
    let wrap = |e: Error| Error::Run { index, source: Box::new(e) };
    let mut filter =
        Filter::new(array, cfg.clone(), input.initial.clone(), constrained).map_err(wrap)?.with_diagnostics(diagnostics);
    let initial_cov = filter.covariance().clone();
    let mut steps = Vec::with_capacity(input.imu.len());
    let mut diag = Vec::new();
    for (imu, mag) in input.imu.iter().zip(&input.mag) {
        let out = filter.step(imu, Some(mag)).map_err(wrap)?;
        steps.push(StepRecord::new(imu.t, &out.posterior, &out.covariance));
        if let Some(d) = out.diagnostics {
            diag.push(d);
        }
    }
    Ok(RunResult {
        index,
        constrained,
        initial: StepRecord::new(input.imu.first().map_or(0.0, |s| s.t), &input.initial, &initial_cov),
        steps,
        diagnostics: diag,
    })
}

/// Thread count from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n: &usize| n > 0)
}

/// Evaluates `job(0..n)` on a pool of at most `threads` workers (default:
/// [`thread_cap`], then all cores). Output order follows the index.
pub fn run_parallel<T, F>(n: usize, threads: Option<usize>, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let results: Vec<Result<T>> = match threads.or_else(thread_cap) {
        Some(1) => (0..n).map(&job).collect(),
        cap => {
            let mut builder = rayon::ThreadPoolBuilder::new();
            if let Some(n) = cap {
                builder = builder.num_threads(n);
            }
            let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| (0..n).into_par_iter().map(&job).collect())
        }
    };
    results.into_iter().collect()
}

/// Runs `runs` paired realizations. Results are ordered by run index, then
/// baseline before constrained, independent of the thread count.
pub fn monte_carlo(
    scenario: &Scenario,
    runs: usize,
    seed: u64,
    selection: FilterSelection,
    diagnostics: bool,
    threads: Option<usize>,
) -> Result<Vec<RunResult>> {
    if runs == 0 {
        return Err(Error::Config("run count must be at least 1".into()));
    }
    let nested = run_parallel(runs, threads, |i| {
        let input = run_input(scenario, seed, i);
        selection
            .variants()
            .iter()
            .map(|&oc| run_filter(scenario.array.clone(), &scenario.filter, &input, oc, diagnostics, i))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(nested.into_iter().flatten().collect())
}
