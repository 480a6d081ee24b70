//! Error-state EKF for the magnetic-field-aided INS.
//!
//! Error-state layout (δx), offsets given by [`StateLayout`]:
//!
//! ```text
//!  δp  (3)  position, navigation frame
//!  δv  (3)  velocity, navigation frame
//!  ε   (3)  orientation, body frame, R = R̂ (I + [ε]ₓ)
//!  δb_a(3)  accelerometer bias      (only when biases are estimated)
//!  δb_g(3)  gyroscope bias          (only when biases are estimated)
//!  δθ  (κ)  field coefficients
//! ```

use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{quat_exp, quat_log, right_jacobian, rot_exp, skew, Mat3, Quaternion, Vec3};
use crate::magfield::{ArrayModel, PoseChange};
use crate::observability::{self, OcDiagnostics, ThetaConstraint};

/// Orientation corrections above this (rad) are suspicious for a small-error filter.
const LARGE_CORRECTION: f64 = 0.5;

/// Index bookkeeping for the error state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateLayout {
    pub kappa: usize,
    pub biases: bool,
}

impl StateLayout {
    pub const POS: usize = 0;
    pub const VEL: usize = 3;
    pub const ORI: usize = 6;

    pub fn new(kappa: usize, biases: bool) -> Self {
        Self { kappa, biases }
    }

    pub fn accel_bias(&self) -> Option<usize> {
        self.biases.then_some(9)
    }

    pub fn gyro_bias(&self) -> Option<usize> {
        self.biases.then_some(12)
    }

    pub fn theta(&self) -> usize {
        if self.biases {
            15
        } else {
            9
        }
    }

    pub fn dim(&self) -> usize {
        self.theta() + self.kappa
    }
}

/// IMU biases.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImuBiases {
    pub accel: Vec3,
    pub gyro: Vec3,
}

/// Nominal navigation state.
#[derive(Clone, Debug, PartialEq)]
pub struct NominalState {
    pub p: Vec3,
    pub v: Vec3,
    pub q: Quaternion,
    pub theta: DVector<f64>,
    pub biases: Option<ImuBiases>,
}

impl NominalState {
    pub fn layout(&self) -> StateLayout {
        StateLayout::new(self.theta.len(), self.biases.is_some())
    }

    pub fn rot(&self) -> Mat3 {
        self.q.to_rot()
    }

    fn bias_or_zero(&self) -> ImuBiases {
        self.biases.unwrap_or_default()
    }

    /// `self ⊞ dx`: additive for everything except the orientation.
    pub fn boxplus(&self, dx: &DVector<f64>) -> NominalState {
        let l = self.layout();
        assert_eq!(dx.len(), l.dim(), "error-state dimension");
        let v3 = |i: usize| Vec3::new(dx[i], dx[i + 1], dx[i + 2]);
        let biases = self.biases.map(|b| ImuBiases {
            accel: b.accel + v3(l.accel_bias().unwrap()),
            gyro: b.gyro + v3(l.gyro_bias().unwrap()),
        });
        NominalState {
            p: self.p + v3(StateLayout::POS),
            v: self.v + v3(StateLayout::VEL),
            q: self.q.mul(&quat_exp(&v3(StateLayout::ORI))),
            theta: &self.theta + dx.rows(l.theta(), l.kappa),
            biases,
        }
    }

    /// `self ⊟ other`, the error that takes `other` to `self`.
    pub fn boxminus(&self, other: &NominalState) -> DVector<f64> {
        let l = self.layout();
        let mut dx = DVector::zeros(l.dim());
        dx.fixed_rows_mut::<3>(StateLayout::POS).copy_from(&(self.p - other.p));
        dx.fixed_rows_mut::<3>(StateLayout::VEL).copy_from(&(self.v - other.v));
        dx.fixed_rows_mut::<3>(StateLayout::ORI).copy_from(&quat_log(&other.q.conjugate().mul(&self.q)));
        if let (Some(a), Some(b)) = (self.biases, other.biases) {
            dx.fixed_rows_mut::<3>(l.accel_bias().unwrap()).copy_from(&(a.accel - b.accel));
            dx.fixed_rows_mut::<3>(l.gyro_bias().unwrap()).copy_from(&(a.gyro - b.gyro));
        }
        dx.rows_mut(l.theta(), l.kappa).copy_from(&(&self.theta - &other.theta));
        dx
    }
}

/// One IMU reading: specific force (m/s²) and angular rate (rad/s), body frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub accel: Vec3,
    pub gyro: Vec3,
}

/// One stacked magnetometer-array reading (µT), sensor order of the geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct MagSample {
    pub t: f64,
    pub values: DVector<f64>,
}

/// Standard deviations of the initial estimation error.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialStd {
    /// m
    pub position: f64,
    /// m/s
    pub velocity: f64,
    /// rad, body x and y
    pub roll_pitch: f64,
    /// rad, body z
    pub yaw: f64,
    /// µT-scale, every coefficient
    pub theta: f64,
    /// m/s²
    pub accel_bias: f64,
    /// rad/s
    pub gyro_bias: f64,
}

impl Default for InitialStd {
    fn default() -> Self {
        Self {
            position: 1e-3,
            velocity: 1e-2,
            roll_pitch: 0.5_f64.to_radians(),
            yaw: 10.0_f64.to_radians(),
            theta: 10.0,
            accel_bias: 0.05,
            gyro_bias: 0.005,
        }
    }
}

/// Filter tuning.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Sampling period (s).
    pub ts: f64,
    /// Gravity in the navigation frame (m/s², z up).
    pub gravity: [f64; 3],
    /// Accelerometer white noise density (m/s²/√Hz).
    pub accel_noise: f64,
    /// Gyroscope white noise density (rad/s/√Hz).
    pub gyro_noise: f64,
    /// Random walk of each field coefficient, std per step.
    pub theta_noise: f64,
    /// Accelerometer bias random walk (m/s²/√s).
    pub accel_bias_walk: f64,
    /// Gyroscope bias random walk (rad/s/√s).
    pub gyro_bias_walk: f64,
    /// Magnetometer noise std per axis (µT).
    pub mag_noise: f64,
    pub initial_std: InitialStd,
    pub estimate_biases: bool,
    /// Constraint form for the coefficient rows of the constrained Jacobian.
    pub theta_constraint: ThetaConstraint,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            ts: 0.01,
            gravity: [0.0, 0.0, -9.81],
            accel_noise: 0.02,
            gyro_noise: 0.002,
            theta_noise: 0.05,
            accel_bias_walk: 1e-4,
            gyro_bias_walk: 1e-5,
            mag_noise: 0.5,
            initial_std: InitialStd::default(),
            estimate_biases: true,
            theta_constraint: ThetaConstraint::default(),
        }
    }
}

impl FilterConfig {
    pub fn g(&self) -> Vec3 {
        Vec3::from(self.gravity)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ts", self.ts),
            ("accel_noise", self.accel_noise),
            ("gyro_noise", self.gyro_noise),
            ("theta_noise", self.theta_noise),
            ("mag_noise", self.mag_noise),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("filter.{name} must be positive, got {v}")));
            }
        }
        let non_negative = [("accel_bias_walk", self.accel_bias_walk), ("gyro_bias_walk", self.gyro_bias_walk)];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("filter.{name} must be non-negative, got {v}")));
            }
        }
        let s = &self.initial_std;
        for v in [s.position, s.velocity, s.roll_pitch, s.yaw, s.theta, s.accel_bias, s.gyro_bias] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("filter.initial_std entries must be positive, got {v}")));
            }
        }
        if !self.gravity.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("filter.gravity must be finite".into()));
        }
        Ok(())
    }

    /// Initial covariance around an estimate with orientation `q`.
    ///
    /// The attitude spread is given about navigation axes (roll/pitch about
    /// the horizontal axes, yaw about gravity) and rotated into body-frame
    /// error coordinates, so heading stays uncorrelated with tilt.
    pub fn initial_covariance(&self, layout: StateLayout, q: &Quaternion) -> DMatrix<f64> {
        let s = &self.initial_std;
        let mut d = DVector::zeros(layout.dim());
        d.fixed_rows_mut::<3>(StateLayout::POS).fill(s.position.powi(2));
        d.fixed_rows_mut::<3>(StateLayout::VEL).fill(s.velocity.powi(2));
        if let (Some(ba), Some(bg)) = (layout.accel_bias(), layout.gyro_bias()) {
            d.fixed_rows_mut::<3>(ba).fill(s.accel_bias.powi(2));
            d.fixed_rows_mut::<3>(bg).fill(s.gyro_bias.powi(2));
        }
        d.rows_mut(layout.theta(), layout.kappa).fill(s.theta.powi(2));
        let mut p = DMatrix::from_diagonal(&d);
        let r = q.to_rot();
        let nav = Mat3::from_diagonal(&self.attitude_variances());
        p.fixed_view_mut::<3, 3>(StateLayout::ORI, StateLayout::ORI).copy_from(&(r.transpose() * nav * r));
        p
    }

    /// Initial attitude variances about the navigation axes.
    pub fn attitude_variances(&self) -> Vec3 {
        let s = &self.initial_std;
        Vec3::new(s.roll_pitch.powi(2), s.roll_pitch.powi(2), s.yaw.powi(2))
    }
}

/// Bias-corrected specific force and angular rate.
fn corrected_inputs(state: &NominalState, imu: &ImuSample) -> (Vec3, Vec3) {
    let b = state.bias_or_zero();
    (imu.accel - b.accel, imu.gyro - b.gyro)
}

/// Pose change `ψ` over one sample for the given state and IMU reading.
pub fn pose_change(state: &NominalState, imu: &ImuSample, cfg: &FilterConfig) -> PoseChange {
    let ts = cfg.ts;
    let (s, w) = corrected_inputs(state, imu);
    let dp = state.rot().transpose() * (ts * (state.v + cfg.g() * (0.5 * ts))) + s * (0.5 * ts * ts);
    PoseChange { dp, dphi: w * ts }
}

/// Nominal-state time update `f(x, u, 0)`.
pub fn propagate_nominal(state: &NominalState, imu: &ImuSample, array: &ArrayModel, cfg: &FilterConfig) -> NominalState {
    let ts = cfg.ts;
    let (s, w) = corrected_inputs(state, imu);
    let acc = state.rot() * s + cfg.g();
    let psi = pose_change(state, imu, cfg);
    NominalState {
        p: state.p + state.v * ts + acc * (0.5 * ts * ts),
        v: state.v + acc * ts,
        q: state.q.mul(&quat_exp(&(w * ts))),
        theta: array.coeff_transition(&psi) * &state.theta,
        biases: state.biases,
    }
}

/// Error-state linearization of one time update.
#[derive(Clone, Debug)]
pub struct Linearization {
    /// Error-state transition `F̂`.
    pub f: DMatrix<f64>,
    /// `A† Ĵ R̂ᵀ t_s`, the velocity-to-coefficient block (κ×3).
    pub field_row: DMatrix<f64>,
    /// `∂x_{k+1}/∂s̃` in error coordinates (n×3).
    pub accel_input: DMatrix<f64>,
    /// `∂x_{k+1}/∂ω̃` in error coordinates (n×3).
    pub gyro_input: DMatrix<f64>,
}

fn set3(m: &mut DMatrix<f64>, r: usize, c: usize, blk: &Mat3) {
    m.fixed_view_mut::<3, 3>(r, c).copy_from(blk);
}

fn mat3_to_dyn(m: &Mat3) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

/// Linearizes the time update at `state` (the posterior estimate).
pub fn linearize(state: &NominalState, imu: &ImuSample, array: &ArrayModel, cfg: &FilterConfig) -> Linearization {
    let l = state.layout();
    let n = l.dim();
    let th = l.theta();
    let ts = cfg.ts;
    let (s, w) = corrected_inputs(state, imu);
    let r = state.rot();
    let psi = pose_change(state, imu, cfg);
    let a_pinv = array.a_pinv();
    let dtheta_dp = a_pinv * array.field_jacobian(&psi, &state.theta);
    let dtheta_dphi = a_pinv * array.field_rotation_jacobian(&psi, &state.theta);
    let eta = r.transpose() * (ts * (state.v + cfg.g() * (0.5 * ts)));
    let r_skew_s = r * skew(&s);

    let mut f = DMatrix::identity(n, n);
    set3(&mut f, StateLayout::POS, StateLayout::VEL, &(Mat3::identity() * ts));
    set3(&mut f, StateLayout::POS, StateLayout::ORI, &(-r_skew_s * (0.5 * ts * ts)));
    set3(&mut f, StateLayout::VEL, StateLayout::ORI, &(-r_skew_s * ts));
    set3(&mut f, StateLayout::ORI, StateLayout::ORI, &rot_exp(&(w * ts)).transpose());
    let field_row = &dtheta_dp * mat3_to_dyn(&(r.transpose() * ts));
    f.view_mut((th, StateLayout::VEL), (l.kappa, 3)).copy_from(&field_row);
    f.view_mut((th, StateLayout::ORI), (l.kappa, 3)).copy_from(&(&dtheta_dp * mat3_to_dyn(&skew(&eta))));
    f.view_mut((th, th), (l.kappa, l.kappa)).copy_from(&array.coeff_transition(&psi));

    let mut accel_input = DMatrix::zeros(n, 3);
    set3(&mut accel_input, StateLayout::POS, 0, &(r * (0.5 * ts * ts)));
    set3(&mut accel_input, StateLayout::VEL, 0, &(r * ts));
    accel_input.view_mut((th, 0), (l.kappa, 3)).copy_from(&(&dtheta_dp * (0.5 * ts * ts)));

    let mut gyro_input = DMatrix::zeros(n, 3);
    set3(&mut gyro_input, StateLayout::ORI, 0, &(right_jacobian(&(w * ts)) * ts));
    gyro_input.view_mut((th, 0), (l.kappa, 3)).copy_from(&(&dtheta_dphi * ts));

    if let (Some(ba), Some(bg)) = (l.accel_bias(), l.gyro_bias()) {
        f.view_mut((0, ba), (n, 3)).copy_from(&(-&accel_input));
        f.view_mut((0, bg), (n, 3)).copy_from(&(-&gyro_input));
        f.view_mut((ba, ba), (6, 6)).fill_with_identity();
    }
    Linearization { f, field_row, accel_input, gyro_input }
}

/// `F̂`: error-state transition evaluated at `state`.
pub fn jacobian_f(state: &NominalState, imu: &ImuSample, array: &ArrayModel, cfg: &FilterConfig) -> DMatrix<f64> {
    linearize(state, imu, array, cfg).f
}

/// Discrete process noise `G Q Gᵀ` for a linearization at `state`.
pub fn process_noise(lin: &Linearization, layout: StateLayout, cfg: &FilterConfig) -> DMatrix<f64> {
    let ts = cfg.ts;
    let ga = &lin.accel_input;
    let gg = &lin.gyro_input;
    let mut q = ga * ga.transpose() * (cfg.accel_noise.powi(2) / ts) + gg * gg.transpose() * (cfg.gyro_noise.powi(2) / ts);
    let th = layout.theta();
    for i in th..th + layout.kappa {
        q[(i, i)] += cfg.theta_noise.powi(2);
    }
    if let (Some(ba), Some(bg)) = (layout.accel_bias(), layout.gyro_bias()) {
        for i in 0..3 {
            q[(ba + i, ba + i)] += cfg.accel_bias_walk.powi(2) * ts;
            q[(bg + i, bg + i)] += cfg.gyro_bias_walk.powi(2) * ts;
        }
    }
    symmetrize(&mut q);
    q
}

/// `H_δx`: zero for the navigation states, `h_theta(rᵢ)` for the coefficients.
pub fn measurement_matrix(array: &ArrayModel, layout: StateLayout) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(array.measurement_len(), layout.dim());
    h.view_mut((0, layout.theta()), (array.measurement_len(), layout.kappa)).copy_from(array.a());
    h
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Linear Kalman update with diagonal measurement noise.
///
/// Returns the error estimate `K δy` and the Joseph-form posterior covariance.
pub fn kalman_update(
    cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    noise_var: &DVector<f64>,
    innovation: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = cov.nrows();
    if h.ncols() != n || h.nrows() != innovation.len() || noise_var.len() != innovation.len() {
        return Err(Error::Dimension(format!(
            "H is {}x{}, covariance {n}x{n}, innovation {}, noise {}",
            h.nrows(),
            h.ncols(),
            innovation.len(),
            noise_var.len()
        )));
    }
    let pht = cov * h.transpose();
    let mut s = h * &pht;
    for (i, r) in noise_var.iter().enumerate() {
        s[(i, i)] += r;
    }
    let chol = s.cholesky().ok_or(Error::SingularInnovation)?;
    let gain = chol.solve(&pht.transpose()).transpose();
    let dx = &gain * innovation;
    let ikh = DMatrix::identity(n, n) - &gain * h;
    let mut scaled = gain.clone();
    for (mut col, r) in scaled.column_iter_mut().zip(noise_var.iter()) {
        col *= *r;
    }
    let mut post = &ikh * cov * ikh.transpose() + scaled * gain.transpose();
    symmetrize(&mut post);
    Ok((dx, post))
}

/// EKF measurement update with the magnetometer array.
///
/// `h` is the stacked measurement matrix; the predicted reading is `H x̂`, which
/// only involves the field coefficients.
pub fn measurement_update(
    state: &NominalState,
    cov: &DMatrix<f64>,
    mag: &MagSample,
    h: &DMatrix<f64>,
    cfg: &FilterConfig,
) -> Result<(NominalState, DMatrix<f64>, DVector<f64>)> {
    let th = state.layout().theta();
    if mag.values.len() != h.nrows() {
        return Err(Error::Dimension(format!("magnetometer sample has {} values, expected {}", mag.values.len(), h.nrows())));
    }
    let predicted = h.columns(th, state.theta.len()) * &state.theta;
    let innovation = &mag.values - predicted;
    let noise = DVector::from_element(h.nrows(), cfg.mag_noise.powi(2));
    let (dx, post) = kalman_update(cov, h, &noise, &innovation)?;
    Ok((inject_and_reset(state, &dx), post, innovation))
}

/// Same posterior as [`measurement_update`] for `H = [0 | A]` and isotropic
/// noise, computed through the least-squares reduction `z = A† y` whose noise
/// covariance is `σ² (AᵀA)⁻¹`. Only κ×κ systems are solved.
pub fn measurement_update_reduced(
    state: &NominalState,
    cov: &DMatrix<f64>,
    mag: &MagSample,
    array: &ArrayModel,
    reduced_noise: &DMatrix<f64>,
    cfg: &FilterConfig,
) -> Result<(NominalState, DMatrix<f64>)> {
    let l = state.layout();
    let (n, k, th) = (l.dim(), l.kappa, l.theta());
    if mag.values.len() != array.measurement_len() {
        return Err(Error::Dimension(format!(
            "magnetometer sample has {} values, expected {}",
            mag.values.len(),
            array.measurement_len()
        )));
    }
    let _ = cfg;
    let z = array.fit(&mag.values) - &state.theta;
    let pht = cov.columns(th, k).into_owned();
    let mut s = cov.view((th, th), (k, k)) + reduced_noise;
    symmetrize(&mut s);
    let chol = s.cholesky().ok_or(Error::SingularInnovation)?;
    let gain = chol.solve(&pht.transpose()).transpose();
    let dx = &gain * z;
    let mut ikh = DMatrix::identity(n, n);
    {
        let mut blk = ikh.columns_mut(th, k);
        blk -= &gain;
    }
    let mut post = &ikh * cov * ikh.transpose() + &gain * reduced_noise * gain.transpose();
    symmetrize(&mut post);
    Ok((inject_and_reset(state, &dx), post))
}

/// Injects an error estimate into the nominal state. The covariance reset
/// Jacobian is taken as identity.
pub fn inject_and_reset(state: &NominalState, dx: &DVector<f64>) -> NominalState {
    let eps = Vec3::new(dx[StateLayout::ORI], dx[StateLayout::ORI + 1], dx[StateLayout::ORI + 2]).norm();
    if eps > LARGE_CORRECTION {
        warn!("large orientation correction |ε| = {eps:.3} rad");
    }
    state.boxplus(dx)
}

/// Quantities recorded after each measurement update.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub posterior: NominalState,
    pub covariance: DMatrix<f64>,
    /// Transition matrix used to propagate the covariance to `k + 1`.
    pub transition: DMatrix<f64>,
    pub diagnostics: Option<OcDiagnostics>,
}

/// MAINS filter instance, baseline or observability-constrained.
#[derive(Clone, Debug)]
pub struct Filter {
    array: Arc<ArrayModel>,
    cfg: FilterConfig,
    state: NominalState,
    cov: DMatrix<f64>,
    h: DMatrix<f64>,
    reduced_noise: DMatrix<f64>,
    constrained: bool,
    diagnostics: bool,
    bookkeeping: Option<Vec3>,
}

impl Filter {
    pub fn new(array: Arc<ArrayModel>, cfg: FilterConfig, initial: NominalState, constrained: bool) -> Result<Self> {
        cfg.validate()?;
        let layout = initial.layout();
        if layout.kappa != array.kappa() {
            return Err(Error::Dimension(format!("state has {} coefficients, model {}", layout.kappa, array.kappa())));
        }
        if layout.biases != cfg.estimate_biases {
            return Err(Error::Config("initial state bias presence disagrees with filter.estimate_biases".into()));
        }
        let cov = cfg.initial_covariance(layout, &initial.q);
        let h = measurement_matrix(&array, layout);
        let ata = array.a().transpose() * array.a();
        let reduced_noise = ata.try_inverse().ok_or(Error::SingularInnovation)? * cfg.mag_noise.powi(2);
        Ok(Self { array, cfg, state: initial, cov, h, reduced_noise, constrained, diagnostics: false, bookkeeping: None })
    }

    /// Records constraint and nullspace diagnostics on every step.
    pub fn with_diagnostics(mut self, on: bool) -> Self {
        self.diagnostics = on;
        self.bookkeeping = on.then(Vec3::zeros);
        self
    }

    pub fn with_covariance(mut self, cov: DMatrix<f64>) -> Self {
        self.cov = cov;
        self
    }

    pub fn is_constrained(&self) -> bool {
        self.constrained
    }

    pub fn state(&self) -> &NominalState {
        &self.state
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    pub fn array(&self) -> &Arc<ArrayModel> {
        &self.array
    }

    pub fn measurement_matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// Measurement update only (no-op if `mag` is `None`).
    pub fn update(&mut self, mag: Option<&MagSample>) -> Result<()> {
        if let Some(mag) = mag {
            let (state, cov) =
                measurement_update_reduced(&self.state, &self.cov, mag, &self.array, &self.reduced_noise, &self.cfg)?;
            self.state = state;
            self.cov = cov;
        }
        Ok(())
    }

    /// One iteration: measurement update at `k`, then time update to `k + 1`.
    pub fn step(&mut self, imu: &ImuSample, mag: Option<&MagSample>) -> Result<StepOutput> {
        observability::oc_step(self, imu, mag)
    }

    pub(crate) fn parts_mut(
        &mut self,
    ) -> (&ArrayModel, &FilterConfig, &mut NominalState, &mut DMatrix<f64>, bool, bool, &mut Option<Vec3>) {
        (
            &self.array,
            &self.cfg,
            &mut self.state,
            &mut self.cov,
            self.constrained,
            self.diagnostics,
            &mut self.bookkeeping,
        )
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::magfield::{ArrayGeometry, PolynomialFieldModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    pub(crate) fn array() -> Arc<ArrayModel> {
        Arc::new(ArrayModel::new(PolynomialFieldModel::default(), ArrayGeometry::planar_grid(5, 6, 0.03).unwrap()).unwrap())
    }

    pub(crate) fn sample_state(biases: bool) -> NominalState {
        NominalState {
            p: Vec3::new(0.4, -1.2, 0.1),
            v: Vec3::new(0.8, 0.3, -0.05),
            q: Quaternion::from_euler(0.05, -0.03, 0.7),
            theta: DVector::from_vec(vec![18.0, -3.0, -42.0, 25.0, -12.0, 8.0, -15.0, 30.0]),
            biases: biases.then_some(ImuBiases { accel: Vec3::new(0.02, -0.01, 0.03), gyro: Vec3::new(0.001, -0.002, 0.0015) }),
        }
    }

    pub(crate) fn sample_imu() -> ImuSample {
        ImuSample { t: 0.0, accel: Vec3::new(0.6, -0.4, 9.7), gyro: Vec3::new(0.05, -0.03, 1.2) }
    }

    /// Central differences of `x ↦ f(x̂ ⊞ δ) ⊟ f(x̂)`.
    fn fd_jacobian(state: &NominalState, imu: &ImuSample, arr: &ArrayModel, cfg: &FilterConfig) -> DMatrix<f64> {
        let n = state.layout().dim();
        let base = propagate_nominal(state, imu, arr, cfg);
        let mut f = DMatrix::zeros(n, n);
        let h = 1e-6;
        for j in 0..n {
            let mut d = DVector::zeros(n);
            d[j] = h;
            let plus = propagate_nominal(&state.boxplus(&d), imu, arr, cfg).boxminus(&base);
            let minus = propagate_nominal(&state.boxplus(&-&d), imu, arr, cfg).boxminus(&base);
            f.set_column(j, &((plus - minus) / (2.0 * h)));
        }
        f
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / b.amax()
    }

    #[test]
    fn layout_dimensions() {
        assert_eq!(StateLayout::new(8, false).dim(), 17);
        assert_eq!(StateLayout::new(8, true).dim(), 23);
        assert_eq!(StateLayout::new(8, true).theta(), 15);
    }

    #[test]
    fn hovering_keeps_attitude_and_velocity() {
        let arr = array();
        let cfg = FilterConfig::default();
        let mut st = sample_state(false);
        st.v = Vec3::new(0.3, -0.2, 0.0);
        let imu = ImuSample { t: 0.0, accel: -(st.rot().transpose() * cfg.g()), gyro: Vec3::zeros() };
        let next = propagate_nominal(&st, &imu, &arr, &cfg);
        assert!((next.p - (st.p + st.v * cfg.ts)).norm() < 1e-15);
        assert!((next.v - st.v).norm() < 1e-15);
        assert!((next.q.to_rot() - st.q.to_rot()).amax() < 1e-15);
    }

    #[test]
    fn quaternion_stays_unit_over_many_steps() {
        let arr = array();
        let cfg = FilterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = sample_state(true);
        for _ in 0..800 {
            let imu = ImuSample {
                t: 0.0,
                accel: Vec3::from_fn(|_, _| rng.random_range(-3.0..3.0)) + Vec3::new(0.0, 0.0, 9.81),
                gyro: Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
            };
            st = propagate_nominal(&st, &imu, &arr, &cfg);
            st.v *= 0.9;
        }
        assert!((st.q.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_structure() {
        let arr = array();
        let cfg = FilterConfig::default();
        let f = jacobian_f(&sample_state(false), &sample_imu(), &arr, &cfg);
        assert_eq!(f.fixed_view::<3, 3>(0, 0).into_owned(), Mat3::identity());
        assert_eq!(f.fixed_view::<3, 3>(0, 3).into_owned(), Mat3::identity() * 0.01);
        // Without motion the coefficient block reduces to the identity.
        let mut st = sample_state(false);
        st.v = Vec3::zeros();
        let still = ImuSample { t: 0.0, accel: -(st.rot().transpose() * cfg.g()), gyro: Vec3::zeros() };
        let ts = cfg.ts;
        // ψ = Rᵀ t_s (g t_s / 2) + s t_s² / 2 = 0 for this input.
        assert!(pose_change(&st, &still, &cfg).dp.norm() < 1e-15 * ts);
        let f = jacobian_f(&st, &still, &arr, &cfg);
        let tt = f.view((9, 9), (8, 8)).into_owned();
        assert!((tt - DMatrix::identity(8, 8)).amax() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let arr = array();
        let cfg = FilterConfig::default();
        for biases in [false, true] {
            let st = sample_state(biases);
            let f = jacobian_f(&st, &sample_imu(), &arr, &cfg);
            let fd = fd_jacobian(&st, &sample_imu(), &arr, &cfg);
            let e = rel_err(&f, &fd);
            assert!(e < 1e-4, "biases={biases} rel err {e}");
        }
    }

    #[test]
    fn zero_noise_gives_zero_process_noise() {
        let arr = array();
        let cfg = FilterConfig { accel_noise: 0.0, gyro_noise: 0.0, theta_noise: 0.0, accel_bias_walk: 0.0, gyro_bias_walk: 0.0, ..FilterConfig::default() };
        let st = sample_state(true);
        let lin = linearize(&st, &sample_imu(), &arr, &cfg);
        assert_eq!(process_noise(&lin, st.layout(), &cfg).amax(), 0.0);
    }

    #[test]
    fn process_noise_is_psd() {
        let arr = array();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let cfg = FilterConfig {
                accel_noise: rng.random_range(0.001..0.1),
                gyro_noise: rng.random_range(0.0001..0.01),
                theta_noise: rng.random_range(0.001..1.0),
                ..FilterConfig::default()
            };
            let st = sample_state(true);
            let lin = linearize(&st, &sample_imu(), &arr, &cfg);
            let q = process_noise(&lin, st.layout(), &cfg);
            assert_eq!(q, q.transpose());
            let min_eig = q.clone().symmetric_eigen().eigenvalues.min();
            assert!(min_eig > -1e-12 * q.trace());
        }
    }

    /// Propagated position covariance from accelerometer noise versus a
    /// sampling estimate through the nonlinear propagation.
    #[test]
    fn process_noise_matches_sampling() {
        let arr = array();
        let cfg = FilterConfig { accel_noise: 0.05, gyro_noise: 1e-4, theta_noise: 1e-9, ..FilterConfig::default() };
        let mut st = sample_state(false);
        st.v = Vec3::zeros();
        let still = ImuSample { t: 0.0, accel: -(st.rot().transpose() * cfg.g()), gyro: Vec3::zeros() };
        let steps = 5;
        let n = st.layout().dim();
        let mut cov = DMatrix::zeros(n, n);
        let mut nominal = st.clone();
        for _ in 0..steps {
            let lin = linearize(&nominal, &still, &arr, &cfg);
            cov = &lin.f * cov * lin.f.transpose() + process_noise(&lin, nominal.layout(), &cfg);
            nominal = propagate_nominal(&nominal, &still, &arr, &cfg);
        }
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sd_a = cfg.accel_noise / cfg.ts.sqrt();
        let sd_g = cfg.gyro_noise / cfg.ts.sqrt();
        let mut sum_sq = Vec3::zeros();
        for _ in 0..draws {
            let mut x = st.clone();
            for _ in 0..steps {
                let na = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * sd_a);
                let ng = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * sd_g);
                let noisy = ImuSample { t: 0.0, accel: still.accel + na, gyro: still.gyro + ng };
                x = propagate_nominal(&x, &noisy, &arr, &cfg);
            }
            let d = x.p - nominal.p;
            sum_sq += d.component_mul(&d);
        }
        for i in 0..3 {
            let sampled = sum_sq[i] / draws as f64;
            let predicted = cov[(i, i)];
            assert!((sampled / predicted - 1.0).abs() < 0.05, "axis {i}: sampled {sampled:e} predicted {predicted:e}");
        }
    }

    #[test]
    fn measurement_matrix_structure() {
        let arr = array();
        for biases in [false, true] {
            let l = StateLayout::new(8, biases);
            let h = measurement_matrix(&arr, l);
            assert_eq!(h.columns(0, l.theta()).amax(), 0.0);
            for (i, r) in arr.geometry().positions().iter().enumerate() {
                assert_eq!(h.view((3 * i, l.theta()), (3, 8)).into_owned(), arr.model().h_theta(r));
            }
        }
    }

    #[test]
    fn zero_innovation_leaves_state() {
        let arr = array();
        let cfg = FilterConfig::default();
        let st = sample_state(true);
        let cov = cfg.initial_covariance(st.layout(), &st.q);
        let h = measurement_matrix(&arr, st.layout());
        let mag = MagSample { t: 0.0, values: arr.a() * &st.theta };
        let (next, post, innov) = measurement_update(&st, &cov, &mag, &h, &cfg).unwrap();
        assert!(innov.amax() < 1e-12);
        assert!((next.boxminus(&st)).amax() < 1e-12);
        assert!(post.trace() < cov.trace());
    }

    #[test]
    fn scalar_kalman_gain() {
        let p = DMatrix::from_element(1, 1, 4.0);
        let h = DMatrix::from_element(1, 1, 2.0);
        let r = DVector::from_element(1, 1.0);
        let y = DVector::from_element(1, 3.0);
        // K = P H / (H P H + R) = 8 / 17
        let (dx, post) = kalman_update(&p, &h, &r, &y).unwrap();
        assert!((dx[0] - 24.0 / 17.0).abs() < 1e-14);
        assert!((post[(0, 0)] - 4.0 * (1.0 - 16.0 / 17.0)).abs() < 1e-14);
    }

    #[test]
    fn singular_innovation_is_reported() {
        let p = DMatrix::from_element(1, 1, 0.0);
        let h = DMatrix::from_element(1, 1, 1.0);
        let r = DVector::from_element(1, 0.0);
        let y = DVector::from_element(1, 1.0);
        assert!(matches!(kalman_update(&p, &h, &r, &y), Err(Error::SingularInnovation)));
    }

    #[test]
    fn reduced_update_matches_full_update() {
        let arr = array();
        let cfg = FilterConfig::default();
        let st = sample_state(true);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = st.layout().dim();
        let x = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let cov = &x * x.transpose() * 0.01 + cfg.initial_covariance(st.layout(), &st.q);
        let h = measurement_matrix(&arr, st.layout());
        let values = arr.a() * &st.theta + DVector::from_fn(90, |_, _| rng.random_range(-2.0..2.0));
        let mag = MagSample { t: 0.0, values };
        let (full, pf, _) = measurement_update(&st, &cov, &mag, &h, &cfg).unwrap();
        let filt = Filter::new(arr.clone(), cfg.clone(), st.clone(), false).unwrap();
        let (red, pr) = measurement_update_reduced(&st, &cov, &mag, &arr, &filt.reduced_noise, &cfg).unwrap();
        assert!(full.boxminus(&red).amax() < 1e-9);
        assert!((pf - pr).amax() < 1e-9 * cov.amax());
    }

    /// Sequential updates on a static linear problem equal the batch
    /// least-squares solution with the prior as a pseudo-measurement.
    #[test]
    fn sequential_updates_match_batch() {
        let arr = array();
        let cfg = FilterConfig::default();
        let st = sample_state(false);
        let l = st.layout();
        let cov = cfg.initial_covariance(l, &st.q);
        let h = measurement_matrix(&arr, l);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let truth = DVector::from_vec(vec![20.0, -5.0, -40.0, 10.0, 3.0, -7.0, 4.0, 12.0]);
        let ys: Vec<DVector<f64>> =
            (0..25).map(|_| arr.a() * &truth + DVector::from_fn(90, |_, _| rng.random_range(-1.0..1.0))).collect();

        let (mut x, mut p) = (st.clone(), cov.clone());
        for y in &ys {
            let (nx, np, _) = measurement_update(&x, &p, &MagSample { t: 0.0, values: y.clone() }, &h, &cfg).unwrap();
            x = nx;
            p = np;
        }

        let r_inv = 1.0 / cfg.mag_noise.powi(2);
        let p0_inv = 1.0 / cfg.initial_std.theta.powi(2);
        let a = arr.a();
        let mut info = DMatrix::identity(8, 8) * p0_inv;
        let mut rhs = &st.theta * p0_inv;
        for y in &ys {
            info += a.transpose() * a * r_inv;
            rhs += a.transpose() * y * r_inv;
        }
        let batch = info.clone().cholesky().unwrap().solve(&rhs);
        assert!((&x.theta - &batch).amax() < 1e-8, "diff {}", (&x.theta - &batch).amax());
        let batch_cov = info.try_inverse().unwrap();
        assert!((p.view((9, 9), (8, 8)) - batch_cov).amax() < 1e-10);
    }

    #[test]
    fn inject_examples() {
        let st = sample_state(true);
        assert_eq!(inject_and_reset(&st, &DVector::zeros(23)), NominalState { q: st.q.mul(&Quaternion::identity()), ..st.clone() });
        let mut id = sample_state(false);
        id.q = Quaternion::identity();
        let mut dx = DVector::zeros(17);
        dx[8] = 0.01;
        let yaw = crate::geometry::yaw_of(&inject_and_reset(&id, &dx).q).unwrap();
        assert!((yaw - 0.01).abs() < 1e-15);
    }

    #[test]
    fn injection_is_small_angle_consistent() {
        let st = sample_state(false);
        let eps = Vec3::new(0.6e-3, -0.5e-3, 0.6e-3);
        let mut dx = DVector::zeros(17);
        dx.fixed_rows_mut::<3>(6).copy_from(&eps);
        let r = inject_and_reset(&st, &dx).rot();
        let approx = st.rot() * (Mat3::identity() + skew(&eps));
        let diff = (r - approx).amax();
        assert!(diff < eps.norm_squared(), "diff {diff}");
        assert!(diff > 0.0);
    }
}
