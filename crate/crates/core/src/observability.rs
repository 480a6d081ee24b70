//! Observability analysis and the observability-constrained Jacobian.
//!
//! The unobservable subspace of the error state is spanned by the columns of
//! `N(x)`: global translation (three columns) and rotation about gravity.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filter::{
    linearize, process_noise, propagate_nominal, symmetrize, Filter, FilterConfig, ImuSample, MagSample, NominalState,
    StateLayout, StepOutput,
};
use crate::geometry::{quat_exp, rot_exp, skew, Mat3, Vec3};

/// Relative singular-value threshold for numerical rank decisions.
pub const RANK_THRESHOLD: f64 = 1e-8;

/// Basis of the unobservable subspace, `n × 4`.
#[derive(Clone, Debug, PartialEq)]
pub struct NullspaceBasis(pub DMatrix<f64>);

impl NullspaceBasis {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// `N(x)`: columns 1..3 translate the position, column 4 rotates the
/// navigation frame about gravity. Bias and coefficient rows are zero.
pub fn nullspace_basis(state: &NominalState, g: &Vec3) -> NullspaceBasis {
    let n = state.layout().dim();
    let mut m = DMatrix::zeros(n, 4);
    m.fixed_view_mut::<3, 3>(StateLayout::POS, 0).copy_from(&Mat3::identity());
    m.fixed_view_mut::<3, 1>(StateLayout::VEL, 3).copy_from(&(-skew(&state.v) * g));
    m.fixed_view_mut::<3, 1>(StateLayout::ORI, 3).copy_from(&(state.rot().transpose() * g));
    NullspaceBasis(m)
}

/// Consecutive `(F_k, H_k)` pairs; `F_k` maps step `k` to `k + 1`.
#[derive(Clone, Debug, Default)]
pub struct ObservabilityWindow {
    steps: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

impl ObservabilityWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, f: DMatrix<f64>, h: DMatrix<f64>) {
        self.steps.push((f, h));
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Sub-windows of `len` consecutive steps.
    pub fn windows(&self, len: usize) -> impl Iterator<Item = ObservabilityWindow> + '_ {
        self.steps.windows(len.max(1)).map(|w| ObservabilityWindow { steps: w.to_vec() })
    }
}

/// Stacks `H_{k+i} Φ(k+i, k)` for every step of the window.
pub fn observability_matrix(window: &ObservabilityWindow) -> Result<DMatrix<f64>> {
    let Some((f0, _)) = window.steps.first() else {
        return Err(Error::Dimension("empty observability window".into()));
    };
    let n = f0.ncols();
    let rows: usize = window.steps.iter().map(|(_, h)| h.nrows()).sum();
    let mut o = DMatrix::zeros(rows, n);
    let mut phi = DMatrix::<f64>::identity(n, n);
    let mut r = 0;
    for (f, h) in &window.steps {
        if h.ncols() != n || f.nrows() != n || f.ncols() != n {
            return Err(Error::Dimension(format!("window mixes state dimensions ({n} vs {}x{})", f.nrows(), f.ncols())));
        }
        o.rows_mut(r, h.nrows()).copy_from(&(h * &phi));
        r += h.nrows();
        phi = f * phi;
    }
    Ok(o)
}

/// `‖𝒪 N‖_F / (‖𝒪‖_F ‖N‖_F)`.
pub fn verify_nullspace(window: &ObservabilityWindow, basis: &DMatrix<f64>) -> Result<f64> {
    let o = observability_matrix(window)?;
    let denom = o.norm() * basis.norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((&o * basis).norm() / denom)
}

/// Number of columns of `m` not constrained by its rows, counting singular
/// values below `rel · σ_max` as zero.
pub fn numerical_nullity(m: &DMatrix<f64>, rel: f64) -> usize {
    let cols = m.ncols();
    // The Gram matrix would square the condition number, so work on m itself.
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return cols;
    }
    let rank = sv.iter().filter(|&&s| s > rel * smax).count();
    cols - rank
}

/// Worst relative residual of the columns of `m` after least-squares
/// projection onto `span(basis)`.
pub fn span_residual(m: &DMatrix<f64>, basis: &DMatrix<f64>) -> f64 {
    let svd = basis.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > 1e-12 * smax).collect();
    let q = u.select_columns(&keep);
    m.column_iter()
        .map(|c| {
            let norm = c.norm();
            if norm == 0.0 {
                0.0
            } else {
                (c - &q * (q.transpose() * c)).norm() / norm
            }
        })
        .fold(0.0, f64::max)
}

/// Minimal Frobenius-norm change of `f` such that `F* u = w`.
pub fn oc_project_row(f: &Mat3, u: &Vec3, w: &Vec3) -> Result<Mat3> {
    let uu = u.norm_squared();
    if uu == 0.0 {
        return Err(Error::ZeroConstraint);
    }
    Ok(f - (f * u - w) * u.transpose() / uu)
}

/// Dynamic-size variant of [`oc_project_row`] for `k × 3` blocks.
pub fn oc_project_rows(f: &DMatrix<f64>, u: &Vec3, w: &DVector<f64>) -> Result<DMatrix<f64>> {
    let uu = u.norm_squared();
    if uu == 0.0 {
        return Err(Error::ZeroConstraint);
    }
    let ud = DVector::from_column_slice(u.as_slice());
    Ok(f - (f * &ud - w) * ud.transpose() / uu)
}

/// Closest rotation to `r` (geodesic distance) with `R* u = w`.
pub fn oc_project_rotation(r: &Mat3, u: &Vec3, w: &Vec3) -> Result<Mat3> {
    let (un, wn) = (u.norm(), w.norm());
    if un == 0.0 || wn == 0.0 || (un - wn).abs() > 1e-9 * un.max(1.0) {
        return Err(Error::InfeasibleRotation { u_norm: un, w_norm: wn });
    }
    let a = r * u / un;
    let b = w / wn;
    let axis = a.cross(&b);
    let s = axis.norm();
    let c = a.dot(&b);
    let corr = if s > 1e-15 {
        rot_exp(&(axis * (s.atan2(c) / s)))
    } else if c > 0.0 {
        Mat3::identity()
    } else {
        // Antipodal: any half turn about an axis orthogonal to w.
        let seed = if b.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let perp = b.cross(&seed).normalize();
        rot_exp(&(perp * std::f64::consts::PI))
    };
    Ok(corr * r)
}

/// How the coefficient-orientation block is constrained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaConstraint {
    /// Constrain the 3×3 factor of `F^{θε} = (A† Ĵ R̂ᵀ t_s)·X` so that the
    /// bracketed term vanishes.
    #[default]
    Factored,
    /// Project the full κ×3 block directly.
    Direct,
}

/// Estimates needed to constrain one transition `k → k + 1`.
#[derive(Clone, Debug)]
pub struct OcContext {
    /// `v̂_{k|k−1}`
    pub v_prior: Vec3,
    /// `R̂_{k|k−1}`
    pub r_prior: Mat3,
    /// `v̂_{k+1|k}`
    pub v_next: Vec3,
    /// `R̂_{k+1|k}`
    pub r_next: Mat3,
    /// `v̂_{k|k}`, linearization point of `F̂`.
    pub v_post: Vec3,
    /// `R̂_{k|k}`
    pub r_post: Mat3,
    pub g: Vec3,
    pub ts: f64,
    pub theta_constraint: ThetaConstraint,
}

impl OcContext {
    /// `u = R̂ᵀ_{k|k−1} g`
    pub fn u(&self) -> Vec3 {
        self.r_prior.transpose() * self.g
    }

    /// Right-hand side of the velocity constraint.
    pub fn w_velocity(&self) -> Vec3 {
        skew(&(self.v_prior - self.v_next)) * self.g
    }

    /// Right-hand side of the orientation constraint.
    pub fn w_rotation(&self) -> Vec3 {
        self.r_next.transpose() * self.g
    }

    /// Right-hand side of the coefficient constraint (before `field_row`).
    pub fn w_field(&self) -> Vec3 {
        skew(&self.v_prior) * self.g
    }

    /// 3×3 factor of the coefficient-orientation block at the linearization point.
    pub fn field_factor(&self) -> Mat3 {
        skew(&(self.v_post + self.g * (0.5 * self.ts))) * self.r_post
    }
}

/// Constraint residuals of a transition matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ConstraintResiduals {
    pub velocity: f64,
    pub rotation: f64,
    pub field: f64,
    /// `max(‖RᵀR − I‖, |det R − 1|)` of the orientation block.
    pub so3: f64,
}

/// Evaluates the three constraints on `f` (any filter, constrained or not).
pub fn constraint_residuals(f: &DMatrix<f64>, layout: StateLayout, ctx: &OcContext, field_row: &DMatrix<f64>) -> ConstraintResiduals {
    let u = ctx.u();
    let fve: Mat3 = f.fixed_view::<3, 3>(StateLayout::VEL, StateLayout::ORI).into_owned();
    let fee: Mat3 = f.fixed_view::<3, 3>(StateLayout::ORI, StateLayout::ORI).into_owned();
    let fte = f.view((layout.theta(), StateLayout::ORI), (layout.kappa, 3));
    let ud = DVector::from_column_slice(u.as_slice());
    let wf = DVector::from_column_slice(ctx.w_field().as_slice());
    ConstraintResiduals {
        velocity: (fve * u - ctx.w_velocity()).norm(),
        rotation: (fee * u - ctx.w_rotation()).norm(),
        field: (fte * ud - field_row * wf).norm(),
        so3: (fee.transpose() * fee - Mat3::identity()).amax().max((fee.determinant() - 1.0).abs()),
    }
}

/// Result of [`oc_modify_f`].
#[derive(Clone, Debug)]
pub struct OcModification {
    pub f: DMatrix<f64>,
    pub residuals: ConstraintResiduals,
    /// `‖F̃ − F̂‖_F`
    pub change: f64,
}

/// Modifies the velocity, orientation and coefficient rows of the orientation
/// column block so that `F̃ N(x̂_{k|k−1}) ⊂ span N(x̂_{k+1|k})`.
pub fn oc_modify_f(f: &DMatrix<f64>, layout: StateLayout, ctx: &OcContext, field_row: &DMatrix<f64>) -> Result<OcModification> {
    let (th, k) = (layout.theta(), layout.kappa);
    let u = ctx.u();
    let mut out = f.clone();

    let fve: Mat3 = f.fixed_view::<3, 3>(StateLayout::VEL, StateLayout::ORI).into_owned();
    let fve = oc_project_row(&fve, &u, &ctx.w_velocity())?;
    out.fixed_view_mut::<3, 3>(StateLayout::VEL, StateLayout::ORI).copy_from(&fve);

    let fee: Mat3 = f.fixed_view::<3, 3>(StateLayout::ORI, StateLayout::ORI).into_owned();
    let fee = oc_project_rotation(&fee, &u, &ctx.w_rotation())?;
    out.fixed_view_mut::<3, 3>(StateLayout::ORI, StateLayout::ORI).copy_from(&fee);

    let fte = match ctx.theta_constraint {
        ThetaConstraint::Factored => {
            let x = oc_project_row(&ctx.field_factor(), &u, &ctx.w_field())?;
            field_row * DMatrix::from_column_slice(3, 3, x.as_slice())
        }
        ThetaConstraint::Direct => {
            let target = field_row * DVector::from_column_slice(ctx.w_field().as_slice());
            oc_project_rows(&f.view((th, StateLayout::ORI), (k, 3)).into_owned(), &u, &target)?
        }
    };
    out.view_mut((th, StateLayout::ORI), (k, 3)).copy_from(&fte);

    let residuals = constraint_residuals(&out, layout, ctx, field_row);
    let change = (&out - f).norm();
    Ok(OcModification { f: out, residuals, change })
}

/// Per-step record of the constraint diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OcDiagnostics {
    pub t: f64,
    pub constrained: bool,
    pub residual_velocity: f64,
    pub residual_rotation: f64,
    pub residual_field: f64,
    pub so3_error: f64,
    /// Worst column residual of `F̃ N(x̂_{k|k−1})` projected on `span N(x̂_{k+1|k})`.
    pub span_residual: f64,
    /// `‖F̃ − F̂‖_F`
    pub jacobian_change: f64,
    /// Every block outside the constrained ones equals `F̂` bit for bit.
    pub untouched_identical: bool,
    pub bookkeeping_x: f64,
    pub bookkeeping_y: f64,
    pub bookkeeping_z: f64,
}

fn untouched_identical(a: &DMatrix<f64>, b: &DMatrix<f64>, layout: StateLayout) -> bool {
    let th = layout.theta();
    let changed = |i: usize, j: usize| {
        (StateLayout::ORI..StateLayout::ORI + 3).contains(&j)
            && ((StateLayout::VEL..StateLayout::ORI + 3).contains(&i) || (th..th + layout.kappa).contains(&i))
    };
    (0..a.nrows()).all(|i| (0..a.ncols()).all(|j| changed(i, j) || a[(i, j)].to_bits() == b[(i, j)].to_bits()))
}

/// Builds the context for the transition out of the current filter state.
pub fn oc_context(prior: &NominalState, posterior: &NominalState, next: &NominalState, cfg: &FilterConfig) -> OcContext {
    OcContext {
        v_prior: prior.v,
        r_prior: prior.rot(),
        v_next: next.v,
        r_next: next.rot(),
        v_post: posterior.v,
        r_post: posterior.rot(),
        g: cfg.g(),
        ts: cfg.ts,
        theta_constraint: cfg.theta_constraint,
    }
}

/// One filter iteration: measurement update (unmodified `H`), nominal
/// propagation, then covariance propagation with `F̂` or its constrained
/// version.
pub fn oc_step(filter: &mut Filter, imu: &ImuSample, mag: Option<&MagSample>) -> Result<StepOutput> {
    let prior = filter.state().clone();
    filter.update(mag)?;
    let (array, cfg, state, cov, constrained, diagnostics, bookkeeping) = filter.parts_mut();
    let posterior = state.clone();
    let post_cov = cov.clone();
    let layout = posterior.layout();

    let next = propagate_nominal(&posterior, imu, array, cfg);
    let lin = linearize(&posterior, imu, array, cfg);
    let ctx = oc_context(&prior, &posterior, &next, cfg);
    let (f, residuals, change) = if constrained {
        let m = oc_modify_f(&lin.f, layout, &ctx, &lin.field_row)?;
        (m.f, m.residuals, m.change)
    } else {
        let r = if diagnostics { constraint_residuals(&lin.f, layout, &ctx, &lin.field_row) } else { Default::default() };
        (lin.f.clone(), r, 0.0)
    };

    let diag = if diagnostics {
        let g = cfg.g();
        let n_prior = nullspace_basis(&prior, &g);
        let n_next = nullspace_basis(&next, &g);
        let moved = &f * n_prior.matrix();
        let a = bookkeeping.get_or_insert_with(Vec3::zeros);
        let col: Vec3 = moved.fixed_view::<3, 1>(StateLayout::POS, 3).into_owned();
        *a += col;
        Some(OcDiagnostics {
            t: imu.t,
            constrained,
            residual_velocity: residuals.velocity,
            residual_rotation: residuals.rotation,
            residual_field: residuals.field,
            so3_error: residuals.so3,
            span_residual: span_residual(&moved, n_next.matrix()),
            jacobian_change: change,
            untouched_identical: untouched_identical(&f, &lin.f, layout),
            bookkeeping_x: a.x,
            bookkeeping_y: a.y,
            bookkeeping_z: a.z,
        })
    } else {
        None
    };

    let q = process_noise(&lin, layout, cfg);
    let mut p = &f * &post_cov * f.transpose() + q;
    symmetrize(&mut p);
    *cov = p;
    *state = next;
    let f_out = f;
    Ok(StepOutput { posterior, covariance: post_cov, transition: f_out, diagnostics: diag })
}

/// Perturbations that leave every measurement unchanged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PerturbationKind {
    /// Translation of the whole scene by `Δ` (navigation frame).
    Translation(Vec3),
    /// Rotation of the navigation frame about gravity by `c` rad.
    YawAboutGravity(f64),
}

/// State obtained by applying the perturbation to `state`.
pub fn perturb(state: &NominalState, kind: PerturbationKind, g: &Vec3) -> NominalState {
    match kind {
        PerturbationKind::Translation(d) => NominalState { p: state.p + d, ..state.clone() },
        PerturbationKind::YawAboutGravity(c) => {
            let axis = g.normalize();
            let rc = rot_exp(&(axis * c));
            NominalState {
                p: rc * state.p,
                v: rc * state.v,
                q: quat_exp(&(axis * c)).mul(&state.q),
                ..state.clone()
            }
        }
    }
}

/// Exact error `x ⊟ x'` between a state and its perturbed copy.
pub fn perturbation_error_exact(state: &NominalState, kind: PerturbationKind, g: &Vec3) -> DVector<f64> {
    state.boxminus(&perturb(state, kind, g))
}

/// Error vector of the perturbation in the filter's (first-order) error
/// coordinates. Translations are exact; rotations use the derivative of the
/// exact error at `c = 0` scaled by `c`, dropping the `O(c²|v|)` term.
pub fn perturbation_error(state: &NominalState, kind: PerturbationKind, g: &Vec3) -> DVector<f64> {
    match kind {
        PerturbationKind::Translation(_) => perturbation_error_exact(state, kind, g),
        PerturbationKind::YawAboutGravity(c) => {
            if c == 0.0 {
                return DVector::zeros(state.layout().dim());
            }
            let h = 1e-6;
            let plus = perturbation_error_exact(state, PerturbationKind::YawAboutGravity(h), g);
            let minus = perturbation_error_exact(state, PerturbationKind::YawAboutGravity(-h), g);
            (plus - minus) * (c / (2.0 * h))
        }
    }
}
