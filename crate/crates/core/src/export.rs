//! Plot-ready CSV and text artifacts.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a fixed
//! seed always yields byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attack::AttackSchedule;
use crate::error::{Error, Result};
use crate::grid::{MeasurementFrame, PhasorStream, Provenance};
use crate::harness::{DetectorReport, ForecastStudyRow, ScenarioResult};

pub const RESULT_FILES: [&str; 6] = [
    "flows.csv",
    "residuals.csv",
    "hankel_errors.csv",
    "gradients.csv",
    "schedule.csv",
    "summary.txt",
];

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn flows_csv(r: &ScenarioResult) -> String {
    let mut s = String::from("t_seconds,true_mva,perceived_mva,limit_mva,critical_mva\n");
    for ((t, tv), pv) in r.times.iter().zip(&r.true_flow_mva).zip(&r.perceived_flow_mva) {
        let _ = writeln!(s, "{t},{tv},{pv},{},{}", r.limit_mva, r.critical_mva);
    }
    s
}

pub fn residuals_csv(rep: &DetectorReport) -> String {
    let mut s = String::from("t_seconds,wls_max_norm_resid,dkf_max_norm_resid,beta\n");
    for (k, t) in rep.times.iter().enumerate() {
        let _ = writeln!(
            s,
            "{t},{},{},{}",
            opt(rep.wls.max_normalized.get(k).copied().flatten()),
            opt(rep.dkf.max_normalized.get(k).copied().flatten()),
            rep.beta
        );
    }
    s
}

pub fn hankel_csv(rep: &DetectorReport) -> String {
    let mut s = String::from("t_seconds");
    for h in &rep.hankel {
        let _ = write!(s, ",w{}_bus{}", h.window, h.bus);
    }
    s.push('\n');
    for (k, t) in rep.times.iter().enumerate() {
        let _ = write!(s, "{t}");
        for h in &rep.hankel {
            let _ = write!(s, ",{}", opt(h.errors.get(k).copied().flatten()));
        }
        s.push('\n');
    }
    s
}

pub fn gradients_csv(rep: &DetectorReport) -> String {
    let mut s = String::from("t_seconds,pair,flag\n");
    for (k, t) in rep.times.iter().enumerate() {
        for g in &rep.gradients {
            let _ = writeln!(s, "{t},{}-{},{}", g.pair.0, g.pair.1, g.series.flags[k] as u8);
        }
    }
    s
}

pub fn schedule_csv(schedule: Option<&AttackSchedule>, support_hint: &[usize]) -> String {
    let support: Vec<usize> = schedule.map_or_else(|| support_hint.to_vec(), |s| s.support.clone());
    let mut s = String::from("epoch,t_seconds");
    for b in &support {
        let _ = write!(s, ",a_{b}");
    }
    if support.len() == 1 {
        s.push_str(",cum_shift_rad,time_shift_us");
    } else {
        for b in &support {
            let _ = write!(s, ",cum_shift_rad_{b},time_shift_us_{b}");
        }
    }
    s.push_str(",feasible\n");
    if let Some(sched) = schedule {
        for st in &sched.steps {
            let _ = write!(s, "{},{}", st.epoch, st.t_seconds);
            for a in &st.increment {
                let _ = write!(s, ",{a}");
            }
            for (c, dt) in st.cumulative.iter().zip(&st.time_shift) {
                let _ = write!(s, ",{c},{}", dt * 1e6);
            }
            let _ = writeln!(s, ",{}", st.feasible);
        }
    }
    s
}

pub fn summary_text(r: &ScenarioResult) -> String {
    let rep = &r.report;
    let mut s = String::new();
    let _ = writeln!(s, "target branch limit: {} MVA (critical {} MVA)", r.limit_mva, r.critical_mva);
    let _ = writeln!(s, "max true flow: {:.3} MVA", r.max_true_mva());
    let _ = writeln!(s, "max perceived flow: {:.3} MVA", r.perceived_flow_mva.iter().copied().fold(0.0, f64::max));
    match r.first_crossing(r.critical_mva) {
        Some(t) => {
            let _ = writeln!(s, "perceived flow first exceeds critical at t = {t:.4} s");
        }
        None => {
            let _ = writeln!(s, "perceived flow never exceeds critical");
        }
    }
    if let Some(t) = r.onset {
        let _ = writeln!(s, "attack onset: {t:.4} s");
    }
    if let Some(sched) = &r.schedule {
        let accepted = sched.accepted().count();
        let total: f64 = sched.accepted().map(|st| st.l1()).sum();
        let _ = writeln!(s, "attack steps accepted: {accepted}/{}", sched.steps.len());
        let _ = writeln!(s, "cumulative |shift|: {total:.6} rad");
    }
    s.push_str(&detector_summary(rep, r.onset));
    s
}

pub fn detector_summary(rep: &DetectorReport, onset: Option<f64>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "peak WLS normalized residual: {:.6} (beta {})", rep.wls.peak(), rep.beta);
    let _ = writeln!(s, "peak DKF normalized residual: {:.6} (beta {})", rep.dkf.peak(), rep.beta);
    for g in &rep.gradients {
        let mut line = format!("gradient {}-{}: mismatch rate {:.4}", g.pair.0, g.pair.1, g.series.rate);
        if let Some(t0) = onset {
            let pre = g.series.rate_where(&rep.times, |t| t <= t0);
            let post = g.series.rate_where(&rep.times, |t| t > t0);
            let _ = write!(line, " (pre-onset {pre:.4}, post-onset {post:.4})");
        }
        let _ = writeln!(s, "{line}");
    }
    for v in &rep.verdicts {
        let first = v.first_detection.map_or("-".to_string(), |t| format!("{t:.4} s"));
        let _ = writeln!(
            s,
            "verdict {}: {} (first {first})",
            v.name,
            if v.detected { "DETECTED" } else { "not detected" }
        );
    }
    s
}

/// Writes the six result files into `out_dir`, creating it if needed.
pub fn export_results(r: &ScenarioResult, out_dir: &Path, support_hint: &[usize]) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let bodies = [
        flows_csv(r),
        residuals_csv(&r.report),
        hankel_csv(&r.report),
        gradients_csv(&r.report),
        schedule_csv(r.schedule.as_ref(), support_hint),
        summary_text(r),
    ];
    let mut paths = Vec::new();
    for (name, body) in RESULT_FILES.iter().zip(bodies) {
        let p = out_dir.join(name);
        write_file(&p, &body)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Writes the detector traces and a verdict summary for an externally
/// supplied stream.
pub fn export_detection(rep: &DetectorReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let files = [
        ("residuals.csv", residuals_csv(rep)),
        ("hankel_errors.csv", hankel_csv(rep)),
        ("gradients.csv", gradients_csv(rep)),
        ("summary.txt", detector_summary(rep, None)),
    ];
    let mut paths = Vec::new();
    for (name, body) in files {
        let p = out_dir.join(name);
        write_file(&p, &body)?;
        paths.push(p);
    }
    Ok(paths)
}

pub fn forecast_study_csv(rows: &[ForecastStudyRow]) -> String {
    let mut s = String::from("trusted_len,step,abs_error,tau_e,below\n");
    for row in rows {
        for (k, e) in row.errors.iter().enumerate() {
            let _ = writeln!(s, "{},{},{e},{},{}", row.trusted_len, k + 1, row.tau_e, (*e < row.tau_e) as u8);
        }
    }
    s
}

pub fn forecast_study_summary(rows: &[ForecastStudyRow]) -> String {
    let mut s = String::new();
    for row in rows {
        let _ = writeln!(
            s,
            "L = {}: tau_e = {:.6e} rad, consecutive predictions below threshold = {}",
            row.trusted_len, row.tau_e, row.horizon_below
        );
    }
    s
}

pub fn write_forecast_study(rows: &[ForecastStudyRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let a = out_dir.join("forecast.csv");
    write_file(&a, &forecast_study_csv(rows))?;
    let b = out_dir.join("summary.txt");
    write_file(&b, &forecast_study_summary(rows))?;
    Ok(vec![a, b])
}

pub fn stream_header(n_buses: usize, n_branches: usize) -> Vec<String> {
    let mut h = vec!["t_seconds".to_string()];
    h.extend((1..=n_buses).map(|b| format!("theta_{b}")));
    h.extend((1..=n_branches).map(|k| format!("z_{k}")));
    h.push("provenance".into());
    h
}

pub fn stream_csv(stream: &PhasorStream) -> String {
    let (n, m) = stream
        .frames
        .first()
        .map_or((0, 0), |f| (f.theta_meas.len(), f.z.len()));
    let mut s = stream_header(n, m).join(",");
    s.push('\n');
    for f in &stream.frames {
        let _ = write!(s, "{}", f.timestamp);
        for v in f.theta_meas.iter().chain(&f.z) {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{}", f.provenance.as_str());
    }
    s
}

pub fn write_stream(stream: &PhasorStream, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    write_file(path, &stream_csv(stream))
}

/// Reads a stream written by [`write_stream`]; every `theta_1..n` and
/// `z_1..m` column must be present.
pub fn read_stream(path: &Path, n_buses: usize, n_branches: usize) -> Result<PhasorStream> {
    let fmt_err = |message: String| Error::Format { path: path.to_path_buf(), message };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| fmt_err(e.to_string()))?.clone();
    let want = stream_header(n_buses, n_branches);
    let missing: Vec<&str> = want
        .iter()
        .filter(|c| c.as_str() != "provenance" && !headers.iter().any(|h| h.trim() == c.as_str()))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(fmt_err(format!("missing required columns: {}", missing.join(", "))));
    }
    let idx = |name: &str| headers.iter().position(|h| h.trim() == name);
    let t_col = idx("t_seconds").expect("checked above");
    let theta_cols: Vec<usize> = (1..=n_buses).map(|b| idx(&format!("theta_{b}")).expect("checked")).collect();
    let z_cols: Vec<usize> = (1..=n_branches).map(|k| idx(&format!("z_{k}")).expect("checked")).collect();
    let prov_col = idx("provenance");

    let mut frames = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| fmt_err(e.to_string()))?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| fmt_err(format!("row {}: column {} is not a number", line + 2, &headers[c])))
        };
        let provenance = match prov_col.and_then(|c| rec.get(c)) {
            Some(p) if !p.trim().is_empty() => Provenance::parse(p.trim())
                .ok_or_else(|| fmt_err(format!("row {}: unknown provenance {p:?}", line + 2)))?,
            _ => Provenance::Noisy,
        };
        frames.push(MeasurementFrame {
            timestamp: num(t_col)?,
            theta_meas: theta_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            z: z_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            provenance,
        });
    }
    if frames.len() < 2 {
        return Err(fmt_err("stream needs at least two frames".into()));
    }
    let dt = frames[1].timestamp - frames[0].timestamp;
    if !(dt > 0.0) {
        return Err(fmt_err("timestamps must increase".into()));
    }
    Ok(PhasorStream { frame_rate: (1.0 / dt * 1e6).round() / 1e6, frames })
}
