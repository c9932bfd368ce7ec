use std::fs;

use spoofsim::attack::AttackSchedule;
use spoofsim::config::ScenarioConfig;
use spoofsim::detectors::ResidualSeries;
use spoofsim::export::*;
use spoofsim::grid::{PhasorStream, Provenance};
use spoofsim::harness::{run_detectors, simulate, DetectorReport, ScenarioResult};
use spoofsim::Error;

fn short_cfg() -> ScenarioConfig {
    ScenarioConfig {
        duration_s: 3.0,
        load_step_times: vec![1.0],
        attack_enabled: false,
        ..ScenarioConfig::default()
    }
}

fn empty_result() -> ScenarioResult {
    let empty = ResidualSeries { max_normalized: vec![], flags: vec![] };
    ScenarioResult {
        times: vec![],
        true_flow_mva: vec![],
        perceived_flow_mva: vec![],
        limit_mva: 500.0,
        critical_mva: 475.0,
        schedule: None,
        report: DetectorReport {
            times: vec![],
            beta: 3.0,
            wls: empty.clone(),
            dkf: empty,
            hankel: vec![],
            gradients: vec![],
            verdicts: vec![],
        },
        forecast_log: vec![],
        reported: PhasorStream { frame_rate: 60.0, frames: vec![] },
        onset: None,
    }
}

#[test]
fn stream_round_trips_through_csv() {
    let cfg = short_cfg();
    let sim = simulate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("nested/stream.csv");
    write_stream(&sim.clean, &p).unwrap();
    let back = read_stream(&p, 24, 38).unwrap();
    assert_eq!(back, sim.clean);
}

#[test]
fn missing_columns_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    fs::write(&p, "t_seconds,theta_1,z_1\n0,0,0\n").unwrap();
    let err = read_stream(&p, 24, 38).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Format { .. }));
    assert!(msg.contains("theta_2") && msg.contains("z_38") && !msg.contains("theta_1,"), "{msg}");
}

#[test]
fn unknown_provenance_is_rejected() {
    let cfg = short_cfg();
    let sim = simulate(&cfg).unwrap();
    let text = stream_csv(&sim.clean).replacen(",true\n", ",forged\n", 1);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    fs::write(&p, text).unwrap();
    assert!(read_stream(&p, 24, 38).unwrap_err().to_string().contains("forged"));
}

#[test]
fn missing_file_is_io_error() {
    let err = read_stream(std::path::Path::new("/nonexistent/stream.csv"), 24, 38).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn empty_result_writes_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let paths = export_results(&empty_result(), dir.path(), &[23]).unwrap();
    assert_eq!(paths.len(), 6);
    let read = |n: &str| fs::read_to_string(dir.path().join(n)).unwrap();
    assert_eq!(read("flows.csv"), "t_seconds,true_mva,perceived_mva,limit_mva,critical_mva\n");
    assert_eq!(read("residuals.csv"), "t_seconds,wls_max_norm_resid,dkf_max_norm_resid,beta\n");
    assert_eq!(read("hankel_errors.csv"), "t_seconds\n");
    assert_eq!(read("gradients.csv"), "t_seconds,pair,flag\n");
    assert_eq!(read("schedule.csv"), "epoch,t_seconds,a_23,cum_shift_rad,time_shift_us,feasible\n");
}

#[test]
fn two_bus_schedule_header_is_suffixed() {
    let sched = AttackSchedule::empty(vec![13, 23], 38);
    assert_eq!(
        schedule_csv(Some(&sched), &[]),
        "epoch,t_seconds,a_13,a_23,cum_shift_rad_13,time_shift_us_13,cum_shift_rad_23,time_shift_us_23,feasible\n"
    );
}

#[test]
fn detection_export_marks_undefined_cells_empty() {
    let cfg = short_cfg();
    let sim = simulate(&cfg).unwrap();
    let rep = run_detectors(&sim.clean, &sim.grid, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_detection(&rep, dir.path()).unwrap();
    let res = fs::read_to_string(dir.path().join("residuals.csv")).unwrap();
    // the Kalman filter has no posterior residual on its first frame
    assert!(res.lines().nth(1).unwrap().contains(",,"));
    assert_eq!(res.lines().count(), sim.clean.len() + 1);
    let hk = fs::read_to_string(dir.path().join("hankel_errors.csv")).unwrap();
    assert!(hk.lines().next().unwrap().contains("w80_bus13"));
    assert!(sim.clean.frames.iter().all(|f| f.provenance == Provenance::True));
}
