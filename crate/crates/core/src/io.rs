//! CSV datasets and result files.
//!
//! Inputs (comma separated, header row mandatory):
//!
//! ```text
//! imu.csv  t,ax,ay,az,gx,gy,gz        s, m/s², rad/s, body frame
//! mag.csv  t, then 3m values          µT, sensor order of the array
//! gt.csv   t,px,py,pz,qw,qx,qy,qz     m, scalar-first body→navigation quaternion
//! ```
//!
//! Outputs: `metrics.csv` (see [`crate::evaluation::METRICS_HEADER`]),
//! `diagnostics.csv` ([`DIAGNOSTICS_HEADER`]), one estimate trace per run and
//! filter ([`RUN_HEADER`]) and a field-magnitude grid ([`FIELD_HEADER`]).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::evaluation::{MetricSeries, RunResult, METRICS_HEADER};
use crate::filter::{ImuSample, MagSample};
use crate::geometry::{Quaternion, Vec3};
use crate::magfield::DipoleEnvironment;
use crate::simulator::GroundTruth;

pub const IMU_HEADER: [&str; 7] = ["t", "ax", "ay", "az", "gx", "gy", "gz"];
pub const GT_HEADER: [&str; 8] = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz"];
pub const RUN_HEADER: [&str; 15] =
    ["t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "var_px", "var_py", "var_pz", "var_yaw"];
pub const DIAGNOSTICS_HEADER: [&str; 10] = [
    "t",
    "filter_label",
    "runs",
    "residual_velocity",
    "residual_rotation",
    "residual_field",
    "so3_error",
    "span_residual",
    "jacobian_change",
    "untouched_identical",
];
pub const FIELD_HEADER: [&str; 6] = ["x", "y", "bx", "by", "bz", "magnitude"];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse { path: path.to_path_buf(), line, message: format!("{kind:?}") },
    }
}

/// Numeric rows of a CSV file with its header checked by `check_header`.
/// Each row comes with its 1-based line number.
fn read_rows(path: &Path, check_header: impl FnOnce(&[String]) -> std::result::Result<(), String>) -> Result<Vec<(usize, Vec<f64>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(file);
    let mut records = reader.records();
    let parse = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let header: Vec<String> = match records.next() {
        Some(r) => r.map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect(),
        None => return Err(parse(1, "missing header row".into())),
    };
    check_header(&header).map_err(|m| parse(1, m))?;
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(parse(line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let values = rec
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| parse(line, format!("not a finite number: {f:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, values));
    }
    Ok(rows)
}

fn exact_header(expected: &'static [&'static str]) -> impl FnOnce(&[String]) -> std::result::Result<(), String> {
    move |h| {
        if h.iter().map(String::as_str).eq(expected.iter().copied()) {
            Ok(())
        } else {
            Err(format!("header must be {}, found {}", expected.join(","), h.join(",")))
        }
    }
}

fn check_increasing(path: &Path, rows: &[(usize, Vec<f64>)]) -> Result<()> {
    for w in rows.windows(2) {
        if w[1].1[0] <= w[0].1[0] {
            return Err(Error::Parse { path: path.to_path_buf(), line: w[1].0, message: "timestamps must increase".into() });
        }
    }
    Ok(())
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let rows = read_rows(path, exact_header(&IMU_HEADER))?;
    check_increasing(path, &rows)?;
    Ok(rows
        .into_iter()
        .map(|(_, r)| ImuSample { t: r[0], accel: Vec3::new(r[1], r[2], r[3]), gyro: Vec3::new(r[4], r[5], r[6]) })
        .collect())
}

/// Reads array readings for `sensors` magnetometers.
pub fn read_mag(path: &Path, sensors: usize) -> Result<Vec<MagSample>> {
    let rows = read_rows(path, |h| {
        if h.first().map(String::as_str) != Some("t") {
            return Err("first column must be t".into());
        }
        if h.len() != 1 + 3 * sensors {
            return Err(format!("expected t plus {} values for {sensors} sensors, found {}", 3 * sensors, h.len() - 1));
        }
        Ok(())
    })?;
    check_increasing(path, &rows)?;
    Ok(rows.into_iter().map(|(_, r)| MagSample { t: r[0], values: DVector::from_column_slice(&r[1..]) }).collect())
}

/// Reads ground truth; velocity is the central difference of position.
pub fn read_gt(path: &Path) -> Result<GroundTruth> {
    let rows = read_rows(path, exact_header(&GT_HEADER))?;
    check_increasing(path, &rows)?;
    let mut gt = GroundTruth::default();
    for (line, r) in rows {
        let norm = r[4..8].iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::Parse { path: path.to_path_buf(), line, message: format!("quaternion norm {norm}") });
        }
        let q = Quaternion::new(r[4], r[5], r[6], r[7]);
        gt.t.push(r[0]);
        gt.p.push(Vec3::new(r[1], r[2], r[3]));
        gt.q.push(q);
    }
    gt.v = finite_difference_velocity(&gt.t, &gt.p);
    Ok(gt)
}

fn finite_difference_velocity(t: &[f64], p: &[Vec3]) -> Vec<Vec3> {
    let n = p.len();
    if n < 2 {
        return vec![Vec3::zeros(); n];
    }
    (0..n)
        .map(|k| {
            let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
            (p[b] - p[a]) / (t[b] - t[a])
        })
        .collect()
}

/// Recorded data on the IMU time base.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    /// Array reading at each IMU step, if one was recorded.
    pub mag: Vec<Option<MagSample>>,
    pub truth: Option<GroundTruth>,
}

impl Dataset {
    /// Loads `imu.csv`, `mag.csv` and, if present, `gt.csv` from `dir`.
    /// Array readings and ground truth must lie on IMU timestamps (within
    /// half a sample period).
    pub fn load(dir: &Path, sensors: usize, ts: f64) -> Result<Self> {
        let imu = read_imu(&dir.join("imu.csv"))?;
        if imu.len() < 2 {
            return Err(Error::Config(format!("{}: need at least two IMU samples", dir.join("imu.csv").display())));
        }
        let mag_path = dir.join("mag.csv");
        let mag = align(&imu, read_mag(&mag_path, sensors)?, |m| m.t, ts, &mag_path)?;
        let gt_path = dir.join("gt.csv");
        let truth = if gt_path.exists() {
            let gt = read_gt(&gt_path)?;
            let rows = align(&imu, (0..gt.len()).collect(), |&k| gt.t[k], ts, &gt_path)?;
            if let Some(k) = rows.iter().position(Option::is_none) {
                return Err(Error::Config(format!("{}: no ground truth at t = {}", gt_path.display(), imu[k].t)));
            }
            let idx: Vec<usize> = rows.into_iter().flatten().collect();
            Some(GroundTruth {
                t: imu.iter().map(|s| s.t).collect(),
                p: idx.iter().map(|&k| gt.p[k]).collect(),
                v: idx.iter().map(|&k| gt.v[k]).collect(),
                q: idx.iter().map(|&k| gt.q[k]).collect(),
            })
        } else {
            warn!("{} not found; metrics are limited to perceived uncertainty", gt_path.display());
            None
        };
        Ok(Self { imu, mag, truth })
    }

    pub fn len(&self) -> usize {
        self.imu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imu.is_empty()
    }

    /// Contiguous stretches without gaps longer than `3·ts`.
    pub fn segments(&self, ts: f64) -> Vec<Range<usize>> {
        let t: Vec<f64> = self.imu.iter().map(|s| s.t).collect();
        split_segments(&t, ts)
    }
}

/// Places each item on the IMU step with matching time.
fn align<T>(imu: &[ImuSample], items: Vec<T>, time: impl Fn(&T) -> f64, ts: f64, path: &Path) -> Result<Vec<Option<T>>> {
    let mut out: Vec<Option<T>> = (0..imu.len()).map(|_| None).collect();
    let mut k = 0;
    let mut dropped = 0;
    for item in items {
        let t = time(&item);
        while k < imu.len() && imu[k].t < t - 0.5 * ts {
            k += 1;
        }
        if k < imu.len() && (imu[k].t - t).abs() <= 0.5 * ts {
            out[k] = Some(item);
            k += 1;
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        warn!("{}: {dropped} rows off the IMU time base were ignored", path.display());
    }
    Ok(out)
}

/// Splits a time base wherever consecutive samples are more than `3·ts` apart.
pub fn split_segments(t: &[f64], ts: f64) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for k in 1..t.len() {
        let gap = t[k] - t[k - 1];
        if gap > 3.0 * ts {
            warn!("time gap of {gap:.4} s at t = {:.4}; starting a new segment", t[k - 1]);
            out.push(start..k);
            start = k;
        }
    }
    if start < t.len() {
        out.push(start..t.len());
    }
    out
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn wrap(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| csv_err(path, e)
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn finish<W: Write>(path: &Path, mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Writes a dataset in the input format.
pub fn write_dataset(dir: &Path, imu: &[ImuSample], mag: &[MagSample], truth: Option<&GroundTruth>) -> Result<()> {
    let path = dir.join("imu.csv");
    let mut w = writer(&path)?;
    w.write_record(IMU_HEADER).map_err(wrap(&path))?;
    for s in imu {
        let row = [s.t, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z];
        w.write_record(row.map(num)).map_err(wrap(&path))?;
    }
    finish(&path, w)?;

    let path = dir.join("mag.csv");
    let mut w = writer(&path)?;
    let sensors = mag.first().map_or(0, |m| m.values.len() / 3);
    let mut header = vec!["t".to_string()];
    for i in 0..sensors {
        header.extend(["x", "y", "z"].map(|a| format!("m{i}_{a}")));
    }
    w.write_record(&header).map_err(wrap(&path))?;
    for m in mag {
        let row: Vec<String> = std::iter::once(m.t).chain(m.values.iter().copied()).map(num).collect();
        w.write_record(&row).map_err(wrap(&path))?;
    }
    finish(&path, w)?;

    if let Some(gt) = truth {
        let path = dir.join("gt.csv");
        let mut w = writer(&path)?;
        w.write_record(GT_HEADER).map_err(wrap(&path))?;
        for k in 0..gt.len() {
            let (p, q) = (gt.p[k], gt.q[k]);
            w.write_record([gt.t[k], p.x, p.y, p.z, q.w, q.x, q.y, q.z].map(num)).map_err(wrap(&path))?;
        }
        finish(&path, w)?;
    }
    Ok(())
}

/// Estimate trace of one run.
pub fn write_run(path: &Path, run: &RunResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(RUN_HEADER).map_err(|e| csv_err(path, e))?;
    for s in &run.steps {
        let yaw = s.yaw_var()?;
        let row = [
            s.t, s.p.x, s.p.y, s.p.z, s.v.x, s.v.y, s.v.z, s.q.w, s.q.x, s.q.y, s.q.z, s.pos_var.x, s.pos_var.y, s.pos_var.z, yaw,
        ];
        w.write_record(row.map(num)).map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

/// File name of the trace of `run`.
pub fn run_file_name(run: &RunResult) -> String {
    format!("run_{:03}_{}.csv", run.index, run.label())
}

pub fn write_metrics_file(path: &Path, series: &[MetricSeries]) -> Result<()> {
    crate::evaluation::write_metrics(create(path)?, series).map_err(|e| csv_err(path, e))
}

/// Per-step constraint diagnostics, worst case over the runs of each filter.
pub fn write_diagnostics(path: &Path, runs: &[RunResult]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(DIAGNOSTICS_HEADER).map_err(|e| csv_err(path, e))?;
    for constrained in [false, true] {
        let group: Vec<&RunResult> = runs.iter().filter(|r| r.constrained == constrained && !r.diagnostics.is_empty()).collect();
        let Some(first) = group.first() else { continue };
        for k in 0..first.diagnostics.len() {
            let at: Vec<_> = group.iter().filter_map(|r| r.diagnostics.get(k)).collect();
            let max = |f: fn(&crate::observability::OcDiagnostics) -> f64| at.iter().map(|d| f(d)).fold(0.0, f64::max);
            let row = [
                num(first.diagnostics[k].t),
                crate::evaluation::label(constrained).to_string(),
                at.len().to_string(),
                num(max(|d| d.residual_velocity)),
                num(max(|d| d.residual_rotation)),
                num(max(|d| d.residual_field)),
                num(max(|d| d.so3_error)),
                num(max(|d| d.span_residual)),
                num(max(|d| d.jacobian_change)),
                at.iter().all(|d| d.untouched_identical).to_string(),
            ];
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
    }
    finish(path, w)
}

/// Field in the plane `z = height` on a square grid from `min` to `max`
/// (inclusive) with spacing `step`. Points inside a dipole's exclusion
/// radius have empty field columns.
pub fn write_field_grid(path: &Path, env: &DipoleEnvironment, min: [f64; 2], max: [f64; 2], height: f64, step: f64) -> Result<()> {
    if !(step > 0.0) || max[0] < min[0] || max[1] < min[1] {
        return Err(Error::Config("field grid needs a positive step and max ≥ min".into()));
    }
    let mut w = writer(path)?;
    w.write_record(FIELD_HEADER).map_err(|e| csv_err(path, e))?;
    let nx = ((max[0] - min[0]) / step + 1e-9).floor() as usize + 1;
    let ny = ((max[1] - min[1]) / step + 1e-9).floor() as usize + 1;
    for j in 0..ny {
        for i in 0..nx {
            let (x, y) = (min[0] + i as f64 * step, min[1] + j as f64 * step);
            let mut row = vec![num(x), num(y)];
            match env.field(&Vec3::new(x, y, height)) {
                Ok(b) => row.extend([b.x, b.y, b.z, b.norm()].map(num)),
                Err(Error::ExclusionRadius { .. }) => row.extend(std::iter::repeat_n(String::new(), 4)),
                Err(e) => return Err(e),
            }
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
    }
    finish(path, w)
}

/// Metrics of one filter as read back from `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRows {
    pub label: String,
    /// Perceived uncertainty per step: px, py, pz, yaw.
    pub perceived: Vec<[f64; 4]>,
    /// Initial uncertainty: px, py, pz, yaw.
    pub initial: [f64; 4],
    /// Final-step RMSE: px, py, pz, yaw (absent without ground truth).
    pub final_rmse: Option<[f64; 4]>,
}

/// Reads `metrics.csv`, grouping rows by filter label in order of appearance.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRows>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().from_reader(file);
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if !header.iter().eq(METRICS_HEADER.iter().copied()) {
        return Err(Error::Parse { path: path.to_path_buf(), line: 1, message: "unexpected metrics header".into() });
    }
    let mut out: Vec<MetricRows> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| -> Result<Option<f64>> {
            let s = &rec[i];
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| Error::Parse { path: path.to_path_buf(), line, message: format!("not a number: {s:?}") })
        };
        let need = |i: usize| -> Result<f64> {
            field(i)?.ok_or_else(|| Error::Parse { path: path.to_path_buf(), line, message: format!("empty {}", METRICS_HEADER[i]) })
        };
        let perceived = [need(5)?, need(6)?, need(7)?, need(8)?];
        let initial = [need(10)?, need(11)?, need(12)?, need(9)?];
        let rmse = [field(1)?, field(2)?, field(3)?, field(4)?];
        let label = &rec[13];
        if out.last().is_none_or(|m| m.label != label) {
            out.push(MetricRows { label: label.to_string(), perceived: Vec::new(), initial, final_rmse: None });
        }
        let m = out.last_mut().expect("pushed above");
        m.perceived.push(perceived);
        m.final_rmse = match rmse {
            [Some(a), Some(b), Some(c), Some(d)] => Some([a, b, c, d]),
            _ => None,
        };
    }
    Ok(out)
}

/// Worst-case diagnostics of one filter as read back from `diagnostics.csv`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiagnosticSummary {
    pub label: String,
    pub residual_velocity: f64,
    pub residual_rotation: f64,
    pub residual_field: f64,
    pub so3_error: f64,
    pub span_residual: f64,
    pub untouched_identical: bool,
}

pub fn read_diagnostics(path: &Path) -> Result<Vec<DiagnosticSummary>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().from_reader(file);
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if !header.iter().eq(DIAGNOSTICS_HEADER.iter().copied()) {
        return Err(Error::Parse { path: path.to_path_buf(), line: 1, message: "unexpected diagnostics header".into() });
    }
    let mut out: Vec<DiagnosticSummary> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let parse = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::Parse { path: path.to_path_buf(), line, message: format!("not a number: {:?}", &rec[i]) })
        };
        let label = &rec[1];
        if out.last().is_none_or(|d| d.label != label) {
            out.push(DiagnosticSummary { label: label.to_string(), untouched_identical: true, ..Default::default() });
        }
        let d = out.last_mut().expect("pushed above");
        d.residual_velocity = d.residual_velocity.max(parse(3)?);
        d.residual_rotation = d.residual_rotation.max(parse(4)?);
        d.residual_field = d.residual_field.max(parse(5)?);
        d.so3_error = d.so3_error.max(parse(6)?);
        d.span_residual = d.span_residual.max(parse(7)?);
        d.untouched_identical &= &rec[9] == "true";
    }
    Ok(out)
}

/// Standard output layout below a results directory.
#[derive(Clone, Debug)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics.csv")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn field(&self) -> PathBuf {
        self.root.join("field.csv")
    }

    /// Sensor data of the first simulated run, in the input format.
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
}
