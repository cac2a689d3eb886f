//! File I/O: EuRoC CSV ingestion and export, label JSON, the weights
//! container, TUM trajectories and timestamped bias CSVs.
//!
//! Timestamps are kept as integer nanoseconds on disk. In memory, times are
//! `f64` seconds relative to a per-sequence base, computed by integer
//! subtraction before the conversion so large epochs lose no precision.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bias_labeler::{ChannelRms, LabelConfig, LabelResult};
use crate::error::{Error, Result};
use crate::fusion::TimedBiasPrior;
use crate::geom::UnitQuat;
use crate::imu_model::{GtState, ImuBias, ImuSample, NavState};

/// Relative tolerance on ground-truth quaternion norms before renormalizing.
pub const GT_QUAT_NORM_TOL: f64 = 1e-3;

pub const IMU_HEADER: &str = "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]";
pub const GT_HEADER: &str = "#timestamp, p_RS_R_x [m], p_RS_R_y [m], p_RS_R_z [m], q_RS_w [], q_RS_x [], q_RS_y [], q_RS_z [], v_RS_R_x [m s^-1], v_RS_R_y [m s^-1], v_RS_R_z [m s^-1], b_w_RS_S_x [rad s^-1], b_w_RS_S_y [rad s^-1], b_w_RS_S_z [rad s^-1], b_a_RS_S_x [m s^-2], b_a_RS_S_y [m s^-2], b_a_RS_S_z [m s^-2]";

pub const IMU_REL_PATH: &str = "mav0/imu0/data.csv";
pub const GT_REL_PATH: &str = "mav0/state_groundtruth_estimate0/data.csv";

fn ns_to_rel_seconds(ns: i64, base: i64) -> f64 {
    // exact integer difference, then one correctly rounded division
    (ns - base) as f64 / 1e9
}

fn rel_seconds_to_ns(t: f64, base: i64) -> i64 {
    base + (t * 1e9).round() as i64
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Renormalizes a `[w, x, y, z]` row within `tol` of unit norm. Rows
/// already unit to rounding are kept bit-exact so files re-export unchanged.
fn quat_from_file(path: &Path, line: usize, c: [f64; 4], tol: f64) -> Result<UnitQuat<f64>> {
    let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !((n - 1.0).abs() <= tol) {
        return Err(parse_err(
            path,
            line,
            format!("quaternion norm {n} deviates from 1 by more than {tol}"),
        ));
    }
    let n = if (n - 1.0).abs() <= 1e-14 { 1.0 } else { n };
    Ok(UnitQuat::from_components_unchecked(c[0] / n, c[1] / n, c[2] / n, c[3] / n))
}

/// Data rows as `(line number, fields)`, skipping blank and `#` lines.
fn csv_rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            None
        } else {
            Some((i + 1, l.split(',').map(str::trim).collect()))
        }
    })
}

fn parse_row(path: &Path, line: usize, fields: &[&str], want: usize) -> Result<(i64, Vec<f64>)> {
    if fields.len() < want {
        return Err(parse_err(
            path,
            line,
            format!("expected {want} columns, found {}", fields.len()),
        ));
    }
    let ns: i64 = fields[0]
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad timestamp '{}'", fields[0])))?;
    let mut vals = Vec::with_capacity(fields.len() - 1);
    for (c, f) in fields[1..].iter().enumerate() {
        let v: f64 = f
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad number '{f}' in column {}", c + 2)))?;
        if !v.is_finite() {
            return Err(parse_err(path, line, format!("non-finite value in column {}", c + 2)));
        }
        vals.push(v);
    }
    Ok((ns, vals))
}

fn check_monotone(path: &Path, lines: &[usize], ns: &[i64]) -> Result<()> {
    for k in 1..ns.len() {
        if ns[k] <= ns[k - 1] {
            return Err(parse_err(
                path,
                lines[k],
                format!(
                    "timestamp {} not after previous {} (line {})",
                    ns[k],
                    ns[k - 1],
                    lines[k - 1]
                ),
            ));
        }
    }
    Ok(())
}

/// Rows read from one EuRoC file, with raw integer timestamps kept so the
/// time base can be changed without loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested<T> {
    pub timestamps_ns: Vec<i64>,
    pub items: Vec<T>,
    pub warnings: Vec<String>,
}

impl<T> Ingested<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn first_ns(&self) -> Option<i64> {
        self.timestamps_ns.first().copied()
    }
}

impl Ingested<ImuSample<f64>> {
    /// Re-expresses sample times relative to `base_ns`.
    pub fn rebase(&mut self, base_ns: i64) {
        for (s, ns) in self.items.iter_mut().zip(&self.timestamps_ns) {
            s.t = ns_to_rel_seconds(*ns, base_ns);
        }
    }
}

impl Ingested<GtState<f64>> {
    pub fn rebase(&mut self, base_ns: i64) {
        for (s, ns) in self.items.iter_mut().zip(&self.timestamps_ns) {
            s.t = ns_to_rel_seconds(*ns, base_ns);
        }
    }
}

/// Reads an EuRoC `imu0/data.csv`. Times are relative to the first row.
pub fn read_euroc_imu(path: &Path) -> Result<Ingested<ImuSample<f64>>> {
    let text = read_text(path)?;
    let mut out = Ingested {
        timestamps_ns: Vec::new(),
        items: Vec::new(),
        warnings: Vec::new(),
    };
    let mut lines = Vec::new();
    for (line, fields) in csv_rows(&text) {
        let (ns, v) = parse_row(path, line, &fields, 7)?;
        out.timestamps_ns.push(ns);
        lines.push(line);
        out.items.push(ImuSample::new(
            0.0,
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        ));
    }
    check_monotone(path, &lines, &out.timestamps_ns)?;
    if out.items.is_empty() {
        out.warnings
            .push(format!("{}: no IMU rows (header only)", path.display()));
    }
    if let Some(base) = out.first_ns() {
        out.rebase(base);
    }
    Ok(out)
}

/// Reads an EuRoC `state_groundtruth_estimate0/data.csv`. Bias columns are
/// optional; quaternions off unit norm by more than [`GT_QUAT_NORM_TOL`] are
/// rejected, smaller deviations renormalized.
pub fn read_euroc_gt(path: &Path) -> Result<Ingested<GtState<f64>>> {
    let text = read_text(path)?;
    let mut out = Ingested {
        timestamps_ns: Vec::new(),
        items: Vec::new(),
        warnings: Vec::new(),
    };
    let mut lines = Vec::new();
    for (line, fields) in csv_rows(&text) {
        let (ns, v) = parse_row(path, line, &fields, 11)?;
        let q = quat_from_file(path, line, [v[3], v[4], v[5], v[6]], GT_QUAT_NORM_TOL)?;
        let bias = match v.len() {
            10 => None,
            16.. => Some(ImuBias::new(
                Vector3::new(v[13], v[14], v[15]),
                Vector3::new(v[10], v[11], v[12]),
            )),
            k => {
                return Err(parse_err(
                    path,
                    line,
                    format!("expected 11 or 17 columns, found {}", k + 1),
                ))
            }
        };
        out.timestamps_ns.push(ns);
        lines.push(line);
        out.items.push(GtState {
            t: 0.0,
            nav: NavState::new(
                Vector3::new(v[0], v[1], v[2]),
                Vector3::new(v[7], v[8], v[9]),
                q,
            ),
            bias,
        });
    }
    check_monotone(path, &lines, &out.timestamps_ns)?;
    if out.items.is_empty() {
        out.warnings
            .push(format!("{}: no ground-truth rows (header only)", path.display()));
    }
    if let Some(base) = out.first_ns() {
        out.rebase(base);
    }
    Ok(out)
}

/// Writes IMU samples as EuRoC CSV with timestamps `base_ns + round(t * 1e9)`.
pub fn write_euroc_imu(path: &Path, base_ns: i64, samples: &[ImuSample<f64>]) -> Result<()> {
    let mut s = String::with_capacity(samples.len() * 96);
    s.push_str(IMU_HEADER);
    s.push('\n');
    for x in samples {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            rel_seconds_to_ns(x.t, base_ns),
            x.gyro.x,
            x.gyro.y,
            x.gyro.z,
            x.accel.x,
            x.accel.y,
            x.accel.z
        );
    }
    write_text(path, &s)
}

/// Writes ground truth in the 17-column EuRoC layout. States without a bias
/// get zero bias columns.
pub fn write_euroc_gt(path: &Path, base_ns: i64, states: &[GtState<f64>]) -> Result<()> {
    let mut s = String::with_capacity(states.len() * 256);
    s.push_str(GT_HEADER);
    s.push('\n');
    for x in states {
        let b = x.bias.unwrap_or_default();
        let q = x.nav.q;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            rel_seconds_to_ns(x.t, base_ns),
            x.nav.p.x,
            x.nav.p.y,
            x.nav.p.z,
            q.w,
            q.x,
            q.y,
            q.z,
            x.nav.v.x,
            x.nav.v.y,
            x.nav.v.z,
            b.bw.x,
            b.bw.y,
            b.bw.z,
            b.ba.x,
            b.ba.y,
            b.ba.z
        );
    }
    write_text(path, &s)
}

/// One sequence in memory, times relative to the first IMU timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    pub id: String,
    pub base_ns: i64,
    pub imu: Vec<ImuSample<f64>>,
    pub gt: Option<Vec<GtState<f64>>>,
    pub source: String,
}

impl SequenceBundle {
    /// Loads `<dir>/mav0/imu0/data.csv` and, if present, the ground truth.
    pub fn load_euroc(dir: &Path) -> Result<(Self, Vec<String>)> {
        let mut imu = read_euroc_imu(&dir.join(IMU_REL_PATH))?;
        let base = imu.first_ns().unwrap_or(0);
        let mut warnings = std::mem::take(&mut imu.warnings);
        let gt_path = dir.join(GT_REL_PATH);
        let gt = if gt_path.exists() {
            let mut gt = read_euroc_gt(&gt_path)?;
            gt.rebase(base);
            warnings.append(&mut gt.warnings);
            Some(gt.items)
        } else {
            None
        };
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into());
        Ok((
            Self {
                id,
                base_ns: base,
                imu: imu.items,
                gt,
                source: format!("euroc:{}", dir.display()),
            },
            warnings,
        ))
    }
}

/// Writes a bundle in the EuRoC directory layout under `dir`.
pub fn write_synthetic_euroc(bundle: &SequenceBundle, dir: &Path) -> Result<()> {
    write_euroc_imu(&dir.join(IMU_REL_PATH), bundle.base_ns, &bundle.imu)?;
    if let Some(gt) = &bundle.gt {
        write_euroc_gt(&dir.join(GT_REL_PATH), bundle.base_ns, gt)?;
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_string(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualStats {
    pub rms_before: ChannelRms,
    pub rms_after: ChannelRms,
    pub intervals: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-sequence bias label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelFile {
    pub sequence_id: String,
    pub ba_mean: [f64; 3],
    pub bw_mean: [f64; 3],
    pub residual_stats: ResidualStats,
    /// SHA-256 of the compact JSON of `config`.
    pub solver_config_hash: String,
    pub config: LabelConfig,
}

pub fn config_hash<T: Serialize>(config: &T) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("serializable config"))
}

impl LabelFile {
    pub fn new(sequence_id: &str, result: &LabelResult, config: &LabelConfig) -> Self {
        Self {
            sequence_id: sequence_id.to_string(),
            ba_mean: result.bias.ba.into(),
            bw_mean: result.bias.bw.into(),
            residual_stats: ResidualStats {
                rms_before: result.rms_before,
                rms_after: result.rms_after,
                intervals: result.intervals,
                iterations: result.iterations,
                converged: result.converged,
            },
            solver_config_hash: config_hash(config),
            config: *config,
        }
    }

    pub fn bias(&self) -> ImuBias<f64> {
        ImuBias::new(Vector3::from(self.ba_mean), Vector3::from(self.bw_mean))
    }
}

pub fn write_label(path: &Path, label: &LabelFile) -> Result<()> {
    write_json(path, label)
}

pub fn read_label(path: &Path) -> Result<LabelFile> {
    let label: LabelFile = read_json(path)?;
    let schema = |msg: String| Error::Schema {
        path: path.to_path_buf(),
        msg,
    };
    if label.ba_mean.iter().chain(&label.bw_mean).any(|v| !v.is_finite()) {
        return Err(schema("non-finite bias label".into()));
    }
    if config_hash(&label.config) != label.solver_config_hash {
        return Err(schema("solver_config_hash does not match config".into()));
    }
    Ok(label)
}

/// Tensor record in a weights header; `offset` counts f64 values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsHeader {
    pub format: String,
    pub config: serde_json::Value,
    pub normalization: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    /// SHA-256 over magic, header (with this field empty) and data.
    pub checksum: String,
}

/// Named f64 tensors behind a JSON header.
///
/// Layout: 8-byte magic, header length as u64 LE, compact JSON header, then
/// every tensor's values as f64 LE in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsContainer {
    pub config: serde_json::Value,
    pub normalization: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub const WEIGHTS_MAGIC: &[u8; 8] = b"BPWEIGHT";
const WEIGHTS_FORMAT: &str = "biasprior-weights-v1";

impl WeightsContainer {
    fn header_and_data(&self) -> Result<(WeightsHeader, Vec<u8>)> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut data = Vec::new();
        let mut offset = 0;
        for (name, shape, values) in &self.tensors {
            let n: usize = shape.iter().product();
            if n != values.len() {
                return Err(Error::InvalidInput(format!(
                    "tensor '{name}' has shape {shape:?} but {} values",
                    values.len()
                )));
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += n;
            for v in values {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok((
            WeightsHeader {
                format: WEIGHTS_FORMAT.into(),
                config: self.config.clone(),
                normalization: self.normalization.clone(),
                tensors: entries,
                checksum: String::new(),
            },
            data,
        ))
    }

    fn checksum(header: &WeightsHeader, data: &[u8]) -> String {
        let mut h = header.clone();
        h.checksum.clear();
        let json = serde_json::to_vec(&h).expect("serializable header");
        let mut hasher = Sha256::new();
        hasher.update(WEIGHTS_MAGIC);
        hasher.update((json.len() as u64).to_le_bytes());
        hasher.update(&json);
        hasher.update(data);
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (mut header, data) = self.header_and_data()?;
        header.checksum = Self::checksum(&header, &data);
        let json = serde_json::to_vec(&header).expect("serializable header");
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let schema = |msg: &str| Error::Schema {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
            return Err(schema("not a weights file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| schema("truncated header"))?;
        let header: WeightsHeader =
            serde_json::from_slice(&bytes[16..hend]).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
        if header.format != WEIGHTS_FORMAT {
            return Err(schema(&format!("unsupported format '{}'", header.format)));
        }
        let data = &bytes[hend..];
        if Self::checksum(&header, data) != header.checksum {
            return Err(schema("checksum mismatch"));
        }
        if data.len() % 8 != 0 {
            return Err(schema("data section is not a whole number of f64 values"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > values.len() {
                return Err(schema(&format!("tensor '{}' has inconsistent offset", e.name)));
            }
            tensors.push((e.name.clone(), e.shape.clone(), values[e.offset..e.offset + n].to_vec()));
            expected += n;
        }
        if expected != values.len() {
            return Err(schema("trailing data after last tensor"));
        }
        Ok(Self {
            config: header.config,
            normalization: header.normalization,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TumPose {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: UnitQuat<f64>,
}

pub fn tum_line(pose: &TumPose) -> String {
    let q = pose.q;
    format!(
        "{:.9} {} {} {} {} {} {} {}",
        pose.t, pose.p.x, pose.p.y, pose.p.z, q.x, q.y, q.z, q.w
    )
}

/// `timestamp tx ty tz qx qy qz qw`, one pose per line.
pub fn write_tum(path: &Path, poses: &[TumPose]) -> Result<()> {
    let mut s = String::new();
    for p in poses {
        s.push_str(&tum_line(p));
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn read_tum(path: &Path) -> Result<Vec<TumPose>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        if v.len() != 8 {
            return Err(parse_err(path, i + 1, format!("expected 8 fields, found {}", v.len())));
        }
        let q = quat_from_file(path, i + 1, [v[7], v[4], v[5], v[6]], 1e-6)?;
        out.push(TumPose {
            t: v[0],
            p: Vector3::new(v[1], v[2], v[3]),
            q,
        });
    }
    Ok(out)
}

pub const PRIOR_HEADER: &str = "t,warmup,ba_x,ba_y,ba_z,bw_x,bw_y,bw_z";

/// Timestamped bias priors as CSV.
pub fn write_prior_csv(path: &Path, priors: &[TimedBiasPrior]) -> Result<()> {
    let mut s = String::from(PRIOR_HEADER);
    s.push('\n');
    for p in priors {
        let b = p.bias;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            p.t,
            u8::from(p.warmup),
            b.ba.x,
            b.ba.y,
            b.ba.z,
            b.bw.x,
            b.bw.y,
            b.bw.z
        );
    }
    write_text(path, &s)
}

pub fn read_prior_csv(path: &Path) -> Result<Vec<TimedBiasPrior>> {
    let text = read_text(path)?;
    let mut out: Vec<TimedBiasPrior> = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let l = l.trim();
        if l.is_empty() || l.starts_with('t') || l.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = l
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        if v.len() != 8 || v.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(path, i + 1, "expected 8 finite fields"));
        }
        if out.last().is_some_and(|p| p.t > v[0]) {
            return Err(parse_err(path, i + 1, "prior timestamps must be non-decreasing"));
        }
        out.push(TimedBiasPrior {
            t: v[0],
            warmup: v[1] != 0.0,
            bias: ImuBias::from_slice(&v[2..8]),
        });
    }
    Ok(out)
}

/// Plain CSV with a header and shortest round-trip numbers.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    write_text(path, &s)
}

/// Collects the relative paths of all files under `dir`, sorted.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for e in entries {
            let e = e.map_err(|err| Error::io(dir, err))?;
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.push(p.strip_prefix(root).unwrap_or(&p).to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// SHA-256 over the sorted relative paths and contents of every file in `dir`.
pub fn tree_checksum(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for rel in list_files(dir)? {
        let full = dir.join(&rel);
        let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
