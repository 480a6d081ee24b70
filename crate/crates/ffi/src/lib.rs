//! C ABI for the magnetic-field-aided INS filter.
//!
//! Every function returns an [`OcMainsStatus`]; on failure the message is
//! available from [`oc_mains_last_error`] on the same thread. Matrices are
//! row-major. Filters are opaque handles released with
//! [`oc_mains_filter_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use nalgebra::DVector;
use oc_mains::filter::{Filter, FilterConfig, ImuBiases, ImuSample, InitialStd, MagSample, NominalState};
use oc_mains::geometry::{Mat3, Quaternion, Vec3};
use oc_mains::magfield::{ArrayGeometry, ArrayModel, PolynomialFieldModel};
use oc_mains::observability::{self, ThetaConstraint};
use oc_mains::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OcMainsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numerical = 4,
    Panic = 5,
}

/// Filter tuning and array layout. Fill with [`oc_mains_config_default`]
/// before changing individual fields.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct OcMainsConfig {
    /// Sampling period (s).
    pub ts: f64,
    /// Gravity in the navigation frame (m/s²).
    pub gravity: [f64; 3],
    /// m/s²/√Hz
    pub accel_noise: f64,
    /// rad/s/√Hz
    pub gyro_noise: f64,
    pub theta_noise: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias_walk: f64,
    /// µT
    pub mag_noise: f64,
    pub init_position_std: f64,
    pub init_velocity_std: f64,
    pub init_roll_pitch_std: f64,
    pub init_yaw_std: f64,
    pub init_theta_std: f64,
    pub init_accel_bias_std: f64,
    pub init_gyro_bias_std: f64,
    pub estimate_biases: bool,
    /// 0: factored coefficient constraint, 1: direct.
    pub theta_constraint: u32,
    /// Field model order.
    pub order: u32,
    /// Planar sensor grid.
    pub grid_rows: u32,
    pub grid_cols: u32,
    /// m
    pub grid_pitch: f64,
}

/// Navigation state. `q` is scalar-first, body to navigation.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OcMainsState {
    pub t: f64,
    pub p: [f64; 3],
    pub v: [f64; 3],
    pub q: [f64; 4],
    pub accel_bias: [f64; 3],
    pub gyro_bias: [f64; 3],
    /// Perceived yaw standard deviation (rad).
    pub yaw_std: f64,
}

/// Opaque filter handle.
pub struct OcMainsFilter {
    inner: Filter,
    last_t: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> OcMainsStatus {
    match e {
        Error::Dimension(_) => OcMainsStatus::DimensionMismatch,
        Error::Config(_) | Error::ZeroConstraint | Error::InfeasibleRotation { .. } => OcMainsStatus::InvalidArgument,
        _ => OcMainsStatus::Numerical,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (OcMainsStatus, String)>) -> OcMainsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OcMainsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside oc_mains");
            OcMainsStatus::Panic
        }
    }
}

fn fail(e: Error) -> (OcMainsStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (OcMainsStatus, String) {
    (OcMainsStatus::NullPointer, format!("{name} is null"))
}

fn filter_config(c: &OcMainsConfig) -> Result<FilterConfig, (OcMainsStatus, String)> {
    let theta_constraint = match c.theta_constraint {
        0 => ThetaConstraint::Factored,
        1 => ThetaConstraint::Direct,
        n => return Err((OcMainsStatus::InvalidArgument, format!("theta_constraint {n} is not 0 or 1"))),
    };
    Ok(FilterConfig {
        ts: c.ts,
        gravity: c.gravity,
        accel_noise: c.accel_noise,
        gyro_noise: c.gyro_noise,
        theta_noise: c.theta_noise,
        accel_bias_walk: c.accel_bias_walk,
        gyro_bias_walk: c.gyro_bias_walk,
        mag_noise: c.mag_noise,
        initial_std: InitialStd {
            position: c.init_position_std,
            velocity: c.init_velocity_std,
            roll_pitch: c.init_roll_pitch_std,
            yaw: c.init_yaw_std,
            theta: c.init_theta_std,
            accel_bias: c.init_accel_bias_std,
            gyro_bias: c.init_gyro_bias_std,
        },
        estimate_biases: c.estimate_biases,
        theta_constraint,
    })
}

fn state_out(t: f64, s: &NominalState, cov: &nalgebra::DMatrix<f64>) -> OcMainsState {
    let b = s.biases.unwrap_or_default();
    let o = oc_mains::filter::StateLayout::ORI;
    let yaw_var = oc_mains::evaluation::yaw_cov(&s.q, &cov.fixed_view::<3, 3>(o, o).into_owned()).unwrap_or(f64::NAN);
    OcMainsState {
        t,
        p: s.p.into(),
        v: s.v.into(),
        q: [s.q.w, s.q.x, s.q.y, s.q.z],
        accel_bias: b.accel.into(),
        gyro_bias: b.gyro.into(),
        yaw_std: yaw_var.max(0.0).sqrt(),
    }
}

/// Writes the default configuration to `out`.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn oc_mains_config_default(out: *mut OcMainsConfig) -> OcMainsStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let f = FilterConfig::default();
        let s = f.initial_std;
        *out = OcMainsConfig {
            ts: f.ts,
            gravity: f.gravity,
            accel_noise: f.accel_noise,
            gyro_noise: f.gyro_noise,
            theta_noise: f.theta_noise,
            accel_bias_walk: f.accel_bias_walk,
            gyro_bias_walk: f.gyro_bias_walk,
            mag_noise: f.mag_noise,
            init_position_std: s.position,
            init_velocity_std: s.velocity,
            init_roll_pitch_std: s.roll_pitch,
            init_yaw_std: s.yaw,
            init_theta_std: s.theta,
            init_accel_bias_std: s.accel_bias,
            init_gyro_bias_std: s.gyro_bias,
            estimate_biases: f.estimate_biases,
            theta_constraint: 0,
            order: 1,
            grid_rows: 5,
            grid_cols: 6,
            grid_pitch: 0.03,
        };
        Ok(())
    })
}

/// Creates a filter at `initial`, with field coefficients fitted to the
/// array reading `mag` (`mag_len` = 3 × sensors).
///
/// # Safety
/// `config` and `initial` must be valid for reads, `mag` for `mag_len`
/// reads and `out` for writes.
#[no_mangle]
pub unsafe extern "C" fn oc_mains_filter_new(
    config: *const OcMainsConfig,
    initial: *const OcMainsState,
    mag: *const f64,
    mag_len: usize,
    constrained: bool,
    out: *mut *mut OcMainsFilter,
) -> OcMainsStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = std::ptr::null_mut();
        let c = unsafe { config.as_ref() }.ok_or_else(|| null("config"))?;
        let init = unsafe { initial.as_ref() }.ok_or_else(|| null("initial"))?;
        if mag.is_null() {
            return Err(null("mag"));
        }
        let cfg = filter_config(c)?;
        let geometry = ArrayGeometry::planar_grid(c.grid_rows as usize, c.grid_cols as usize, c.grid_pitch).map_err(fail)?;
        let model = PolynomialFieldModel::new(c.order as usize).map_err(fail)?;
        let array = Arc::new(ArrayModel::new(model, geometry).map_err(fail)?);
        let readings = unsafe { std::slice::from_raw_parts(mag, mag_len) };
        if readings.len() != array.measurement_len() {
            return Err(fail(Error::Dimension(format!("mag_len {} but the array has {} values", mag_len, array.measurement_len()))));
        }
        let qn = init.q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(qn > 0.0 && qn.is_finite()) {
            return Err((OcMainsStatus::InvalidArgument, "initial quaternion has zero norm".into()));
        }
        let state = NominalState {
            p: Vec3::from(init.p),
            v: Vec3::from(init.v),
            q: Quaternion::new(init.q[0], init.q[1], init.q[2], init.q[3]),
            theta: array.fit(&DVector::from_column_slice(readings)),
            biases: cfg.estimate_biases.then_some(ImuBiases { accel: Vec3::from(init.accel_bias), gyro: Vec3::from(init.gyro_bias) }),
        };
        let inner = Filter::new(array, cfg, state, constrained).map_err(fail)?;
        *out = Box::into_raw(Box::new(OcMainsFilter { inner, last_t: init.t }));
        Ok(())
    })
}

/// One filter iteration: update with `mag` (may be null to skip), then
/// propagate with the IMU sample. The posterior at `t` is written to
/// `posterior` when it is non-null.
///
/// # Safety
/// `filter` must come from [`oc_mains_filter_new`]; `accel` and `gyro` must
/// hold 3 values, `mag` `mag_len` values, `posterior` must be null or valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn oc_mains_filter_step(
    filter: *mut OcMainsFilter,
    t: f64,
    accel: *const f64,
    gyro: *const f64,
    mag: *const f64,
    mag_len: usize,
    posterior: *mut OcMainsState,
) -> OcMainsStatus {
    guard(|| {
        let f = unsafe { filter.as_mut() }.ok_or_else(|| null("filter"))?;
        if accel.is_null() {
            return Err(null("accel"));
        }
        if gyro.is_null() {
            return Err(null("gyro"));
        }
        let a = unsafe { std::slice::from_raw_parts(accel, 3) };
        let g = unsafe { std::slice::from_raw_parts(gyro, 3) };
        let imu = ImuSample { t, accel: Vec3::from_column_slice(a), gyro: Vec3::from_column_slice(g) };
        let reading = if mag.is_null() {
            None
        } else {
            let values = unsafe { std::slice::from_raw_parts(mag, mag_len) };
            if values.len() != f.inner.array().measurement_len() {
                return Err(fail(Error::Dimension(format!(
                    "mag_len {} but the array has {} values",
                    mag_len,
                    f.inner.array().measurement_len()
                ))));
            }
            Some(MagSample { t, values: DVector::from_column_slice(values) })
        };
        let out = f.inner.step(&imu, reading.as_ref()).map_err(fail)?;
        f.last_t = t + f.inner.config().ts;
        if let Some(p) = unsafe { posterior.as_mut() } {
            *p = state_out(t, &out.posterior, &out.covariance);
        }
        Ok(())
    })
}

/// Current (propagated) state.
///
/// # Safety
/// `filter` must come from [`oc_mains_filter_new`], `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn oc_mains_filter_get_state(filter: *const OcMainsFilter, out: *mut OcMainsState) -> OcMainsStatus {
    guard(|| {
        let f = unsafe { filter.as_ref() }.ok_or_else(|| null("filter"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = state_out(f.last_t, f.inner.state(), f.inner.covariance());
        Ok(())
    })
}

/// Error-state dimension `n`.
///
/// # Safety
/// `filter` must come from [`oc_mains_filter_new`], `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn oc_mains_filter_dim(filter: *const OcMainsFilter, out: *mut usize) -> OcMainsStatus {
    guard(|| {
        let f = unsafe { filter.as_ref() }.ok_or_else(|| null("filter"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = f.inner.covariance().nrows();
        Ok(())
    })
}

/// Copies the `n × n` error covariance, row-major, into `buf` (`len` ≥ n²).
///
/// # Safety
/// `filter` must come from [`oc_mains_filter_new`], `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn oc_mains_filter_covariance(filter: *const OcMainsFilter, buf: *mut f64, len: usize) -> OcMainsStatus {
    guard(|| {
        let f = unsafe { filter.as_ref() }.ok_or_else(|| null("filter"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let p = f.inner.covariance();
        let n = p.nrows();
        if len < n * n {
            return Err(fail(Error::Dimension(format!("buffer holds {len} values, need {}", n * n))));
        }
        let out = unsafe { std::slice::from_raw_parts_mut(buf, n * n) };
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = p[(i, j)];
            }
        }
        Ok(())
    })
}

/// Releases a filter. Null is ignored.
///
/// # Safety
/// `filter` must be null or come from [`oc_mains_filter_new`], and not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn oc_mains_filter_free(filter: *mut OcMainsFilter) {
    if !filter.is_null() {
        drop(unsafe { Box::from_raw(filter) });
    }
}

fn read_mat3(p: *const f64) -> Mat3 {
    let s = unsafe { std::slice::from_raw_parts(p, 9) };
    Mat3::from_row_slice(s)
}

fn write_mat3(m: &Mat3, p: *mut f64) {
    let s = unsafe { std::slice::from_raw_parts_mut(p, 9) };
    for i in 0..3 {
        for j in 0..3 {
            s[3 * i + j] = m[(i, j)];
        }
    }
}

fn read_vec3(p: *const f64) -> Vec3 {
    Vec3::from_column_slice(unsafe { std::slice::from_raw_parts(p, 3) })
}

/// Closest 3×3 matrix to `f` (Frobenius norm) with `out · u = w`.
///
/// # Safety
/// `f` and `out` must hold 9 values, `u` and `w` 3.
#[no_mangle]
pub unsafe extern "C" fn oc_mains_project_row(f: *const f64, u: *const f64, w: *const f64, out: *mut f64) -> OcMainsStatus {
    guard(|| {
        if f.is_null() || u.is_null() || w.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let m = observability::oc_project_row(&read_mat3(f), &read_vec3(u), &read_vec3(w)).map_err(fail)?;
        write_mat3(&m, out);
        Ok(())
    })
}

/// Rotation closest to `r` (geodesic distance) with `out · u = w`;
/// requires `|u| = |w|`.
///
/// # Safety
/// `r` and `out` must hold 9 values, `u` and `w` 3.
#[no_mangle]
pub unsafe extern "C" fn oc_mains_project_rotation(r: *const f64, u: *const f64, w: *const f64, out: *mut f64) -> OcMainsStatus {
    guard(|| {
        if r.is_null() || u.is_null() || w.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let m = observability::oc_project_rotation(&read_mat3(r), &read_vec3(u), &read_vec3(w)).map_err(fail)?;
        write_mat3(&m, out);
        Ok(())
    })
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn oc_mains_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, NUL terminated.
#[no_mangle]
pub extern "C" fn oc_mains_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
