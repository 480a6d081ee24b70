//! Magnetic field model used by the odometry: a harmonic polynomial field
//! around the body origin, the magnetometer-array matrices built from it, and
//! the multi-dipole environment that stands in for a real building.
//!
//! The field of order `ℓ` is the gradient of a harmonic potential whose
//! homogeneous parts have degree `1..=ℓ+1`. Each degree `d` contributes
//! `2d + 1` basis potentials, so `κ = (ℓ + 1)(ℓ + 3)`. For `ℓ = 1` the
//! coefficient vector is `θ = (b₁, b₂, b₃, M₁₁, M₁₂, M₁₃, M₂₂, M₂₃)` with
//! `field(r) = b + M r`, `M` symmetric and `M₃₃ = −M₁₁ − M₂₂`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{right_jacobian, rot_exp, skew, Mat3, Vec3};

/// Largest supported model order.
pub const MAX_ORDER: usize = 2;

/// Relative singular-value floor for the array matrix.
const RANK_TOLERANCE: f64 = 1e-10;

/// `µ₀ / 4π` expressed in µT·m³/(A·m²).
const MU0_OVER_4PI_UT: f64 = 0.1;

/// A monomial `c · x^i y^j z^k`.
#[derive(Clone, Copy, Debug)]
struct Monomial {
    coeff: f64,
    exp: [u32; 3],
}

impl Monomial {
    const fn new(coeff: f64, i: u32, j: u32, k: u32) -> Self {
        Self { coeff, exp: [i, j, k] }
    }

    /// Applies `∂/∂r_axis` for every entry of `axes` and evaluates at `r`.
    fn derivative(&self, axes: &[usize], r: &Vec3) -> f64 {
        let mut coeff = self.coeff;
        let mut exp = self.exp;
        for &a in axes {
            if exp[a] == 0 {
                return 0.0;
            }
            coeff *= exp[a] as f64;
            exp[a] -= 1;
        }
        coeff * r.x.powi(exp[0] as i32) * r.y.powi(exp[1] as i32) * r.z.powi(exp[2] as i32)
    }
}

type Potential = &'static [Monomial];

const DEGREE_1: [Potential; 3] = [
    &[Monomial::new(1.0, 1, 0, 0)],
    &[Monomial::new(1.0, 0, 1, 0)],
    &[Monomial::new(1.0, 0, 0, 1)],
];

// Gradients are (x, 0, -z), (y, x, 0), (z, 0, x), (0, y, -z), (0, z, y).
const DEGREE_2: [Potential; 5] = [
    &[Monomial::new(0.5, 2, 0, 0), Monomial::new(-0.5, 0, 0, 2)],
    &[Monomial::new(1.0, 1, 1, 0)],
    &[Monomial::new(1.0, 1, 0, 1)],
    &[Monomial::new(0.5, 0, 2, 0), Monomial::new(-0.5, 0, 0, 2)],
    &[Monomial::new(1.0, 0, 1, 1)],
];

const THIRD: f64 = 1.0 / 3.0;

const DEGREE_3: [Potential; 7] = [
    // (x³ − 3xy²) / 3
    &[Monomial::new(THIRD, 3, 0, 0), Monomial::new(-1.0, 1, 2, 0)],
    // (3x²y − y³) / 3
    &[Monomial::new(1.0, 2, 1, 0), Monomial::new(-THIRD, 0, 3, 0)],
    // x²z − y²z
    &[Monomial::new(1.0, 2, 0, 1), Monomial::new(-1.0, 0, 2, 1)],
    // xyz
    &[Monomial::new(1.0, 1, 1, 1)],
    // x(4z² − x² − y²) / 3
    &[Monomial::new(4.0 * THIRD, 1, 0, 2), Monomial::new(-THIRD, 3, 0, 0), Monomial::new(-THIRD, 1, 2, 0)],
    // y(4z² − x² − y²) / 3
    &[Monomial::new(4.0 * THIRD, 0, 1, 2), Monomial::new(-THIRD, 2, 1, 0), Monomial::new(-THIRD, 0, 3, 0)],
    // z(2z² − 3x² − 3y²) / 3
    &[Monomial::new(2.0 * THIRD, 0, 0, 3), Monomial::new(-1.0, 2, 0, 1), Monomial::new(-1.0, 0, 2, 1)],
];

/// Harmonic polynomial field model of order `ℓ`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolynomialFieldModel {
    order: usize,
}

impl Default for PolynomialFieldModel {
    fn default() -> Self {
        Self { order: 1 }
    }
}

impl PolynomialFieldModel {
    pub fn new(order: usize) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::Config(format!("field model order {order} > {MAX_ORDER}")));
        }
        Ok(Self { order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Coefficient count `(ℓ + 1)(ℓ + 3)`.
    pub fn kappa(&self) -> usize {
        (self.order + 1) * (self.order + 3)
    }

    fn potentials(&self) -> impl Iterator<Item = Potential> + '_ {
        let degree_3: &[Potential] = if self.order >= 2 { &DEGREE_3 } else { &[] };
        let degree_2: &[Potential] = if self.order >= 1 { &DEGREE_2 } else { &[] };
        DEGREE_1.iter().chain(degree_2).chain(degree_3).copied()
    }

    /// `H^θ(r)`: the 3×κ matrix with `field(r) = h_theta(r) θ`.
    pub fn h_theta(&self, r: &Vec3) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(3, self.kappa());
        for (col, pot) in self.potentials().enumerate() {
            for axis in 0..3 {
                h[(axis, col)] = pot.iter().map(|m| m.derivative(&[axis], r)).sum();
            }
        }
        h
    }

    /// Field at `r` for coefficients `theta`.
    pub fn field(&self, theta: &DVector<f64>, r: &Vec3) -> Vec3 {
        let h = self.h_theta(r) * theta;
        Vec3::new(h[0], h[1], h[2])
    }

    /// Spatial Jacobian `∂field/∂r` at `r`. Symmetric and traceless.
    pub fn field_gradient(&self, theta: &DVector<f64>, r: &Vec3) -> Mat3 {
        let mut g = Mat3::zeros();
        for (pot, c) in self.potentials().zip(theta.iter()) {
            for i in 0..3 {
                for j in i..3 {
                    let d: f64 = pot.iter().map(|m| m.derivative(&[i, j], r)).sum();
                    g[(i, j)] += c * d;
                    if i != j {
                        g[(j, i)] += c * d;
                    }
                }
            }
        }
        g
    }
}

/// Magnetometer positions in the body frame (m).
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayGeometry {
    positions: Vec<Vec3>,
}

impl ArrayGeometry {
    pub fn new(positions: Vec<Vec3>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Config("array geometry has no sensors".into()));
        }
        if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Config("array geometry has non-finite sensor position".into()));
        }
        Ok(Self { positions })
    }

    /// `rows × cols` grid in the body xy-plane, centred on the origin.
    pub fn planar_grid(rows: usize, cols: usize, pitch: f64) -> Result<Self> {
        let x0 = 0.5 * (cols as f64 - 1.0) * pitch;
        let y0 = 0.5 * (rows as f64 - 1.0) * pitch;
        let positions = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| Vec3::new(j as f64 * pitch - x0, i as f64 * pitch - y0, 0.0)))
            .collect();
        Self::new(positions)
    }

    /// Reads one `x y z` line per sensor; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut positions = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: idx + 1, message };
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 values, found {}", fields.len())));
            }
            let mut v = [0.0; 3];
            for (slot, f) in v.iter_mut().zip(&fields) {
                *slot = f.parse().map_err(|_| parse_err(format!("not a number: {f:?}")))?;
            }
            positions.push(Vec3::from(v));
        }
        Self::new(positions)
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Body-frame pose change between two consecutive samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseChange {
    /// Translation expressed in the earlier body frame (m).
    pub dp: Vec3,
    /// Rotation vector from the earlier to the later body frame (rad).
    pub dphi: Vec3,
}

/// A field model bound to an array geometry, with `A` and its pseudoinverse
/// computed once. Immutable; share it behind an `Arc`.
#[derive(Clone, Debug)]
pub struct ArrayModel {
    model: PolynomialFieldModel,
    geometry: ArrayGeometry,
    a: DMatrix<f64>,
    a_pinv: DMatrix<f64>,
}

impl ArrayModel {
    pub fn new(model: PolynomialFieldModel, geometry: ArrayGeometry) -> Result<Self> {
        let (a, a_pinv) = array_matrix(&model, &geometry)?;
        Ok(Self { model, geometry, a, a_pinv })
    }

    pub fn model(&self) -> &PolynomialFieldModel {
        &self.model
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geometry
    }

    pub fn kappa(&self) -> usize {
        self.model.kappa()
    }

    /// Number of scalar measurements `3m`.
    pub fn measurement_len(&self) -> usize {
        3 * self.geometry.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn a_pinv(&self) -> &DMatrix<f64> {
        &self.a_pinv
    }

    pub fn b_matrix(&self, psi: &PoseChange) -> DMatrix<f64> {
        b_matrix(&self.model, &self.geometry, psi)
    }

    /// `A† B(ψ)`.
    pub fn coeff_transition(&self, psi: &PoseChange) -> DMatrix<f64> {
        &self.a_pinv * self.b_matrix(psi)
    }

    pub fn field_jacobian(&self, psi: &PoseChange, theta: &DVector<f64>) -> DMatrix<f64> {
        field_jacobian(&self.model, &self.geometry, psi, theta)
    }

    pub fn field_rotation_jacobian(&self, psi: &PoseChange, theta: &DVector<f64>) -> DMatrix<f64> {
        field_rotation_jacobian(&self.model, &self.geometry, psi, theta)
    }

    /// Least-squares coefficients for a stacked array reading.
    pub fn fit(&self, readings: &DVector<f64>) -> DVector<f64> {
        &self.a_pinv * readings
    }
}

/// Stacks `h_theta(rᵢ)` and returns `(A, A†)`.
pub fn array_matrix(model: &PolynomialFieldModel, geometry: &ArrayGeometry) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let kappa = model.kappa();
    let rows = 3 * geometry.len();
    let mut a = DMatrix::zeros(rows, kappa);
    for (i, r) in geometry.positions().iter().enumerate() {
        a.view_mut((3 * i, 0), (3, kappa)).copy_from(&model.h_theta(r));
    }
    if rows < kappa {
        return Err(Error::RankDeficient { ratio: 0.0, rows, cols: kappa });
    }
    let s = a.clone().svd(false, false).singular_values;
    let (s_max, s_min) = (s.max(), s.min());
    if !(s_min > RANK_TOLERANCE * s_max) {
        return Err(Error::RankDeficient { ratio: s_min / s_max, rows, cols: kappa });
    }
    // Full column rank, so A† = R⁻¹Qᵀ. The SVD route loses several digits on
    // grids with clustered singular values.
    let qr = a.clone().qr();
    let a_pinv = qr
        .r()
        .solve_upper_triangular(&qr.q().transpose())
        .ok_or(Error::RankDeficient { ratio: s_min / s_max, rows, cols: kappa })?;
    Ok((a, a_pinv))
}

/// Where sensor `r` sits after the motion, in the earlier body frame.
fn moved(psi: &PoseChange, d_rot: &Mat3, r: &Vec3) -> Vec3 {
    psi.dp + d_rot * r
}

/// `B(ψ)`: block `i` is `ΔRᵀ h_theta(Δp + ΔR rᵢ)`, the field predicted at sensor
/// `i` after the motion, expressed in the later body frame.
pub fn b_matrix(model: &PolynomialFieldModel, geometry: &ArrayGeometry, psi: &PoseChange) -> DMatrix<f64> {
    let kappa = model.kappa();
    let d_rot = rot_exp(&psi.dphi);
    let d_rot_t = d_rot.transpose();
    let mut b = DMatrix::zeros(3 * geometry.len(), kappa);
    for (i, r) in geometry.positions().iter().enumerate() {
        let h = model.h_theta(&moved(psi, &d_rot, r));
        let rotated = DMatrix::from_column_slice(3, 3, d_rot_t.as_slice()) * h;
        b.view_mut((3 * i, 0), (3, kappa)).copy_from(&rotated);
    }
    b
}

/// `∂(B(ψ) θ)/∂Δp`, one `ΔRᵀ G` block per sensor where `G` is the field gradient.
pub fn field_jacobian(
    model: &PolynomialFieldModel,
    geometry: &ArrayGeometry,
    psi: &PoseChange,
    theta: &DVector<f64>,
) -> DMatrix<f64> {
    let d_rot = rot_exp(&psi.dphi);
    let mut j = DMatrix::zeros(3 * geometry.len(), 3);
    for (i, r) in geometry.positions().iter().enumerate() {
        let g = model.field_gradient(theta, &moved(psi, &d_rot, r));
        j.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&(d_rot.transpose() * g));
    }
    j
}

/// `∂(B(ψ) θ)/∂Δφ` for an additive perturbation of the rotation vector.
pub fn field_rotation_jacobian(
    model: &PolynomialFieldModel,
    geometry: &ArrayGeometry,
    psi: &PoseChange,
    theta: &DVector<f64>,
) -> DMatrix<f64> {
    let d_rot = rot_exp(&psi.dphi);
    let d_rot_t = d_rot.transpose();
    let jr = right_jacobian(&psi.dphi);
    let mut j = DMatrix::zeros(3 * geometry.len(), 3);
    for (i, r) in geometry.positions().iter().enumerate() {
        let at = moved(psi, &d_rot, r);
        let f = d_rot_t * model.field(theta, &at);
        let g = model.field_gradient(theta, &at);
        let blk = (skew(&f) - d_rot_t * g * d_rot * skew(r)) * jr;
        j.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&blk);
    }
    j
}

/// Point dipole.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dipole {
    /// Position in the navigation frame (m).
    pub position: Vec3,
    /// Magnetic moment (A·m²).
    pub moment: Vec3,
}

/// Uniform earth field plus a set of point dipoles.
#[derive(Clone, Debug, PartialEq)]
pub struct DipoleEnvironment {
    /// Earth field in the navigation frame (µT).
    pub earth: Vec3,
    pub dipoles: Vec<Dipole>,
    /// Minimum allowed distance (m) between an evaluation point and a dipole.
    pub exclusion_radius: f64,
}

impl DipoleEnvironment {
    pub const DEFAULT_EXCLUSION_RADIUS: f64 = 0.2;

    pub fn uniform(earth: Vec3) -> Self {
        Self { earth, dipoles: Vec::new(), exclusion_radius: Self::DEFAULT_EXCLUSION_RADIUS }
    }

    /// Field (µT, navigation frame) at `r`.
    pub fn field(&self, r: &Vec3) -> Result<Vec3> {
        let mut b = self.earth;
        for (index, d) in self.dipoles.iter().enumerate() {
            let rel = r - d.position;
            let dist = rel.norm();
            if dist < self.exclusion_radius {
                return Err(Error::ExclusionRadius {
                    index,
                    point: [r.x, r.y, r.z],
                    distance: dist,
                    radius: self.exclusion_radius,
                });
            }
            b += dipole_contribution(&d.moment, &rel);
        }
        Ok(b)
    }

    /// Field of the dipoles alone (earth field excluded).
    pub fn anomaly(&self, r: &Vec3) -> Result<Vec3> {
        self.field(r).map(|b| b - self.earth)
    }
}

/// Standard point-dipole field (µT) at offset `rel` from a moment `m`.
pub fn dipole_contribution(m: &Vec3, rel: &Vec3) -> Vec3 {
    let d = rel.norm();
    let n = rel / d;
    MU0_OVER_4PI_UT * (3.0 * n * n.dot(m) - m) / (d * d * d)
}

/// Free-function form of [`DipoleEnvironment::field`].
pub fn dipole_field(env: &DipoleEnvironment, r: &Vec3) -> Result<Vec3> {
    env.field(r)
}
