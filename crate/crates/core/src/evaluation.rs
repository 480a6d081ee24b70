//! RMSE, perceived uncertainty and the uncertainty-inequality monitor.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::filter::{NominalState, StateLayout};
use crate::geometry::{wrap_angle, yaw_gradient, yaw_of, Mat3, Quaternion, Vec3};
use crate::observability::OcDiagnostics;
use crate::simulator::GroundTruth;

/// Tolerance (rad or m) below the initial uncertainty before a step counts as
/// a violation.
pub const INEQUALITY_TOLERANCE: f64 = 1e-6;

/// Estimate and covariance summary at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    pub q: Quaternion,
    /// Diagonal of the position covariance.
    pub pos_var: Vec3,
    /// Orientation-error covariance (body frame).
    pub ori_cov: Mat3,
}

impl StepRecord {
    pub fn new(t: f64, state: &NominalState, cov: &DMatrix<f64>) -> Self {
        let o = StateLayout::ORI;
        Self {
            t,
            p: state.p,
            v: state.v,
            q: state.q,
            pos_var: Vec3::new(cov[(0, 0)], cov[(1, 1)], cov[(2, 2)]),
            ori_cov: cov.fixed_view::<3, 3>(o, o).into_owned(),
        }
    }

    pub fn yaw_var(&self) -> Result<f64> {
        yaw_cov(&self.q, &self.ori_cov)
    }
}

/// Output of one filter over one data realization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub index: usize,
    pub constrained: bool,
    /// Prior before the first measurement.
    pub initial: StepRecord,
    /// Posterior after each measurement update.
    pub steps: Vec<StepRecord>,
    pub diagnostics: Vec<OcDiagnostics>,
}

impl RunResult {
    pub fn label(&self) -> &'static str {
        label(self.constrained)
    }
}

pub fn label(constrained: bool) -> &'static str {
    if constrained {
        "oc"
    } else {
        "baseline"
    }
}

/// Scalar quantity extracted from estimates for the metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantity {
    Px,
    Py,
    Pz,
    Yaw,
}

impl Quantity {
    pub const ALL: [Quantity; 4] = [Quantity::Px, Quantity::Py, Quantity::Pz, Quantity::Yaw];

    fn error(self, est: &StepRecord, p: &Vec3, q: &Quaternion) -> Result<f64> {
        Ok(match self {
            Quantity::Px => est.p.x - p.x,
            Quantity::Py => est.p.y - p.y,
            Quantity::Pz => est.p.z - p.z,
            Quantity::Yaw => wrap_angle(yaw_of(&est.q)? - yaw_of(q)?),
        })
    }

    fn variance(self, est: &StepRecord) -> Result<f64> {
        Ok(match self {
            Quantity::Px => est.pos_var.x,
            Quantity::Py => est.pos_var.y,
            Quantity::Pz => est.pos_var.z,
            Quantity::Yaw => est.yaw_var()?,
        })
    }
}

/// `∇yawᵀ P^ε ∇yaw`, the yaw variance implied by a body-frame orientation covariance.
pub fn yaw_cov(q: &Quaternion, p_eps: &Mat3) -> Result<f64> {
    let g = yaw_gradient(q)?;
    Ok(g.dot(&(p_eps * g)))
}

fn check_lengths(series: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = series.first() else {
        return Err(Error::Dimension("no runs".into()));
    };
    if series.iter().any(|s| s.len() != first.len()) {
        return Err(Error::Dimension("runs have different lengths".into()));
    }
    Ok(first.len())
}

/// `(M⁻¹ Σ e²)^½` per step over `M` error series.
pub fn rmse_series(errors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let len = check_lengths(errors)?;
    let m = errors.len() as f64;
    Ok((0..len).map(|k| (errors.iter().map(|e| e[k] * e[k]).sum::<f64>() / m).sqrt()).collect())
}

/// `(M⁻¹ Σ P)^½` per step over `M` variance series.
pub fn perceived_series(variances: &[Vec<f64>]) -> Result<Vec<f64>> {
    let len = check_lengths(variances)?;
    let m = variances.len() as f64;
    (0..len)
        .map(|k| {
            let mut sum = 0.0;
            for v in variances {
                if v[k] < 0.0 {
                    return Err(Error::NegativeVariance { step: k, value: v[k] });
                }
                sum += v[k];
            }
            Ok((sum / m).sqrt())
        })
        .collect()
}

/// Per-step RMSE of `quantity` over runs against the ground truth.
pub fn rmse(runs: &[&RunResult], truth: &GroundTruth, quantity: Quantity) -> Result<Vec<f64>> {
    let errors = runs
        .iter()
        .map(|r| {
            if r.steps.len() != truth.len() {
                return Err(Error::Dimension(format!("run has {} steps, truth {}", r.steps.len(), truth.len())));
            }
            r.steps.iter().enumerate().map(|(k, s)| quantity.error(s, &truth.p[k], &truth.q[k])).collect()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    rmse_series(&errors)
}

/// Per-step perceived uncertainty (standard deviation) of `quantity`.
pub fn perceived_uncertainty(runs: &[&RunResult], quantity: Quantity) -> Result<Vec<f64>> {
    let vars = runs
        .iter()
        .map(|r| r.steps.iter().map(|s| quantity.variance(s)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    perceived_series(&vars)
}

/// Perceived uncertainty of the initial priors.
pub fn initial_uncertainty(runs: &[&RunResult], quantity: Quantity) -> Result<f64> {
    let vars = runs.iter().map(|r| quantity.variance(&r.initial).map(|v| vec![v])).collect::<Result<Vec<_>>>()?;
    Ok(perceived_series(&vars)?[0])
}

/// Steps where a perceived uncertainty fell below its initial value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violations {
    pub count: usize,
    pub first: Option<usize>,
}

pub fn inequality_monitor(series: &[f64], initial: f64, tolerance: f64) -> Violations {
    let bad: Vec<usize> = series.iter().enumerate().filter(|(_, &s)| s - initial < -tolerance).map(|(k, _)| k).collect();
    Violations { count: bad.len(), first: bad.first().copied() }
}

/// Aggregated metrics of one filter over a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSeries {
    pub label: String,
    pub t: Vec<f64>,
    /// Empty when no ground truth is available.
    pub rmse: [Vec<f64>; 4],
    pub perceived: [Vec<f64>; 4],
    pub initial: [f64; 4],
}

impl MetricSeries {
    pub fn compute(runs: &[&RunResult], truth: Option<&GroundTruth>) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::Dimension("no runs".into()))?;
        let label = first.label().to_string();
        let t = first.steps.iter().map(|s| s.t).collect();
        let rmse = Quantity::ALL.map(|q| truth.map_or(Ok(Vec::new()), |gt| rmse(runs, gt, q)));
        let perceived = Quantity::ALL.map(|q| perceived_uncertainty(runs, q));
        let initial = Quantity::ALL.map(|q| initial_uncertainty(runs, q));
        let [r0, r1, r2, r3] = rmse;
        let [p0, p1, p2, p3] = perceived;
        let [i0, i1, i2, i3] = initial;
        Ok(Self { label, t, rmse: [r0?, r1?, r2?, r3?], perceived: [p0?, p1?, p2?, p3?], initial: [i0?, i1?, i2?, i3?] })
    }

    pub fn yaw_violations(&self) -> Violations {
        inequality_monitor(&self.perceived[3], self.initial[3], INEQUALITY_TOLERANCE)
    }
}

/// Column order of the metrics CSV.
pub const METRICS_HEADER: [&str; 14] = [
    "t", "rmse_px", "rmse_py", "rmse_pz", "rmse_yaw", "pu_px", "pu_py", "pu_pz", "pu_yaw", "init_yaw", "init_px", "init_py",
    "init_pz", "filter_label",
];

/// Writes the metrics of every filter, one block of rows per label.
pub fn write_metrics<W: std::io::Write>(out: W, series: &[MetricSeries]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    let num = |v: Option<&f64>| v.map_or(String::new(), |x| format!("{x:.12e}"));
    for s in series {
        for (k, t) in s.t.iter().enumerate() {
            let mut row = vec![format!("{t:.6}")];
            row.extend(s.rmse.iter().map(|r| num(r.get(k))));
            row.extend(s.perceived.iter().map(|p| num(p.get(k))));
            row.push(num(Some(&s.initial[3])));
            row.extend(s.initial[..3].iter().map(|v| num(Some(v))));
            row.push(s.label.clone());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat_exp;
    use nalgebra::Cholesky;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn record(p: Vec3, yaw: f64) -> StepRecord {
        StepRecord { t: 0.0, p, v: Vec3::zeros(), q: Quaternion::from_euler(0.0, 0.0, yaw), pos_var: Vec3::repeat(0.04), ori_cov: Mat3::identity() * 1e-4 }
    }

    fn truth(n: usize) -> GroundTruth {
        GroundTruth {
            t: (0..n).map(|k| k as f64 * 0.01).collect(),
            p: (0..n).map(|k| Vec3::new(k as f64, 0.0, 0.0)).collect(),
            v: vec![Vec3::zeros(); n],
            q: (0..n).map(|k| Quaternion::from_euler(0.0, 0.0, 0.1 * k as f64)).collect(),
        }
    }

    fn run(steps: Vec<StepRecord>) -> RunResult {
        RunResult { index: 0, constrained: false, initial: steps[0].clone(), steps, diagnostics: vec![] }
    }

    #[test]
    fn rmse_examples() {
        let gt = truth(5);
        let exact = run((0..5).map(|k| record(gt.p[k], 0.1 * k as f64)).collect());
        for q in Quantity::ALL {
            assert!(rmse(&[&exact], &gt, q).unwrap().iter().all(|&v| v < 1e-12));
        }
        let off = run((0..5).map(|k| record(gt.p[k] + Vec3::new(0.3, 0.0, 0.0), 0.1 * k as f64 - 0.2)).collect());
        let px = rmse(&[&off], &gt, Quantity::Px).unwrap();
        assert!(px.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let yaw = rmse(&[&off], &gt, Quantity::Yaw).unwrap();
        assert!(yaw.iter().all(|v| (v - 0.2).abs() < 1e-12));
        assert!(rmse(&[], &gt, Quantity::Px).is_err());
        assert!(rmse(&[&off], &truth(4), Quantity::Px).is_err());
    }

    #[test]
    fn rmse_matches_direct_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let errors: Vec<Vec<f64>> = (0..7).map(|_| (0..30).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let got = rmse_series(&errors).unwrap();
        for k in 0..30 {
            let mut acc = 0.0;
            for e in &errors {
                acc += e[k].powi(2);
            }
            assert!((got[k] - (acc / 7.0).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn yaw_rmse_ignores_full_turns() {
        let gt = truth(3);
        let a = run((0..3).map(|k| record(gt.p[k], 0.1 * k as f64 + 0.05)).collect());
        let b = run((0..3).map(|k| record(gt.p[k], 0.1 * k as f64 + 0.05 + 2.0 * std::f64::consts::PI)).collect());
        let ya = rmse(&[&a], &gt, Quantity::Yaw).unwrap();
        let yb = rmse(&[&b], &gt, Quantity::Yaw).unwrap();
        for (x, y) in ya.iter().zip(&yb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn perceived_examples() {
        assert_eq!(perceived_series(&[vec![4.0, 4.0], vec![4.0, 4.0]]).unwrap(), vec![2.0, 2.0]);
        let got = perceived_series(&[vec![1.0], vec![3.0]]).unwrap();
        assert!((got[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(perceived_series(&[vec![1.0, -1.0]]), Err(Error::NegativeVariance { step: 1, .. })));
    }

    #[test]
    fn yaw_cov_examples() {
        assert_eq!(yaw_cov(&Quaternion::identity(), &(Mat3::identity() * 0.01)).unwrap(), 0.01);
        assert_eq!(yaw_cov(&Quaternion::from_euler(0.3, 0.2, 1.0), &Mat3::zeros()).unwrap(), 0.0);
        assert!(yaw_cov(&Quaternion::from_euler(0.0, std::f64::consts::FRAC_PI_2, 0.0), &Mat3::identity()).is_err());
    }

    #[test]
    fn yaw_cov_matches_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Quaternion::from_euler(0.4, -0.3, 2.0);
        let a = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let p = a * a.transpose() + Mat3::identity() * 0.2;
        let p = p * (1e-4 / p.trace() * 3.0);
        let l = Cholesky::new(p).unwrap().l();
        let yaw0 = yaw_of(&q).unwrap();
        let n = 100_000;
        let mut s2 = 0.0;
        for _ in 0..n {
            let e = l * Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let d = wrap_angle(yaw_of(&q.mul(&quat_exp(&e))).unwrap() - yaw0);
            s2 += d * d;
        }
        let sampled = s2 / n as f64;
        let predicted = yaw_cov(&q, &p).unwrap();
        assert!((sampled / predicted - 1.0).abs() < 0.03, "{sampled} vs {predicted}");
    }

    #[test]
    fn monitor_examples() {
        assert_eq!(inequality_monitor(&[1.0, 1.0, 1.0], 1.0, INEQUALITY_TOLERANCE), Violations { count: 0, first: None });
        assert_eq!(inequality_monitor(&[1.0, 0.9, 0.8], 1.0, INEQUALITY_TOLERANCE), Violations { count: 2, first: Some(1) });
    }

    /// Scalar random walk observed in noise: the filter variance is exact, so
    /// the perceived uncertainty should match the spread of the errors.
    #[test]
    fn perceived_matches_linear_filter_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, r, p0): (f64, f64, f64) = (0.01, 0.25, 1.0);
        let runs = 400;
        let steps = 50;
        let mut errors = vec![vec![0.0; steps]; runs];
        let mut vars = vec![vec![0.0; steps]; runs];
        for i in 0..runs {
            let mut x: f64 = rng.sample::<f64, _>(StandardNormal) * p0.sqrt();
            let (mut xh, mut p) = (0.0, p0);
            for k in 0..steps {
                let y = x + rng.sample::<f64, _>(StandardNormal) * r.sqrt();
                let kg = p / (p + r);
                xh += kg * (y - xh);
                p *= 1.0 - kg;
                errors[i][k] = xh - x;
                vars[i][k] = p;
                x += rng.sample::<f64, _>(StandardNormal) * q.sqrt();
                p += q;
            }
        }
        let e = rmse_series(&errors).unwrap();
        let pu = perceived_series(&vars).unwrap();
        for k in 0..steps {
            assert!((e[k] / pu[k] - 1.0).abs() < 0.15, "step {k}: {} vs {}", e[k], pu[k]);
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let gt = truth(2);
        let r = run((0..2).map(|k| record(gt.p[k], 0.1 * k as f64)).collect());
        let m = MetricSeries::compute(&[&r], Some(&gt)).unwrap();
        let mut buf = Vec::new();
        write_metrics(&mut buf, &[m.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER.join(","));
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(",baseline"));
        let no_truth = MetricSeries::compute(&[&r], None).unwrap();
        let mut buf = Vec::new();
        write_metrics(&mut buf, &[no_truth]).unwrap();
        assert!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap().starts_with("0.000000,,,,,"));
    }

    proptest! {
        #[test]
        fn metric_series_are_non_negative(errs in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 1..5)) {
            prop_assert!(rmse_series(&errs).unwrap().iter().all(|&v| v >= 0.0));
            let vars: Vec<Vec<f64>> = errs.iter().map(|e| e.iter().map(|v| v * v).collect()).collect();
            prop_assert!(perceived_series(&vars).unwrap().iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }
}
