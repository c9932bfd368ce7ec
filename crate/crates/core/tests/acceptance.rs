//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::fs;
use std::time::Instant;

use common::*;
use spoofsim::attack::{compute_f_matrix, solve_attack_step, StepOutcome};
use spoofsim::config::ScenarioConfig;
use spoofsim::detectors::state_estimation_jacobian;
use spoofsim::export::{export_results, write_forecast_study, RESULT_FILES};
use spoofsim::grid::{branch_flow_by_index, load_ieee24_rts, solve_dc_power_flow, InjectionVector};
use spoofsim::hankel::low_rank_error;
use spoofsim::harness::{operator_estimator, run_forecast_study, run_limit_crossing_scenario, ScenarioResult};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn limit_crossing(r: &ScenarioResult, secs: f64) -> Outcome {
    let in_window = r
        .times
        .iter()
        .zip(&r.perceived_flow_mva)
        .any(|(t, v)| (13.0..=15.0).contains(t) && *v > r.critical_mva);
    let true_max = r.max_true_mva();
    let early = r.max_perceived_between(f64::NEG_INFINITY, 13.0);
    let crossing = r.first_crossing(r.critical_mva);
    check(
        secs < 60.0 && in_window && true_max <= r.limit_mva && early < r.critical_mva,
        format!(
            "runtime {secs:.2} s; first perceived crossing of {} MVA at {}; max true {true_max:.1} MVA; max perceived before 13 s {early:.1} MVA",
            r.critical_mva,
            crossing.map_or("never".into(), |t| format!("{t:.3} s")),
        ),
    )
}

fn undetectability(r: &ScenarioResult) -> Outcome {
    let (w, d) = (r.report.wls.peak(), r.report.dkf.peak());
    check(w < 3.0 && d < 3.0, format!("peak WLS {w:.4}, peak DKF {d:.4} (β = 3)"))
}

fn forecast_horizon(cfg: &ScenarioConfig) -> Outcome {
    match run_forecast_study(cfg, &[50]) {
        Ok(rows) => {
            let h = rows[0].horizon_below;
            check(
                h >= 9,
                format!("L = 50: {h} consecutive predictions below τ^e (target ≥ 20: {})", if h >= 20 { "met" } else { "not met" }),
            )
        }
        Err(e) => check(false, format!("forecast study failed: {e}")),
    }
}

fn gradient(r: &ScenarioResult) -> Outcome {
    let onset = 2.0;
    let (Some(g1), Some(g2)) = (r.report.gradient((13, 23)), r.report.gradient((13, 12))) else {
        return check(false, "gradient pairs (13,23)/(13,12) not monitored");
    };
    let pre = g1.series.rate_where(&r.report.times, |t| t <= onset);
    let post = g1.series.rate_where(&r.report.times, |t| t > onset);
    let quiet = g2.series.rate;
    check(
        post > 0.0 && post >= 3.0 * pre && quiet < 0.05,
        format!("(13,23) pre {pre:.4} post {post:.4}; (13,12) overall {quiet:.4}"),
    )
}

fn band(r: &ScenarioResult) -> Outcome {
    let Some(s) = &r.schedule else {
        return check(false, "no attack schedule");
    };
    let mut ok = true;
    let (mut sum_l1, mut sum_zeta) = (0.0, 0.0);
    for st in s.accepted() {
        let l1 = st.l1();
        ok &= st.zeta < l1 && l1 < st.zeta + st.epsilon;
        sum_l1 += l1;
        sum_zeta += st.zeta;
    }
    let accepted = s.accepted().count();
    ok &= accepted > 0 && sum_l1 > sum_zeta;
    check(
        ok,
        format!(
            "{accepted}/{} steps accepted, all inside the band: {}; Σ‖a‖₁ = {sum_l1:.12} > Σζ′ = {sum_zeta:.12}",
            s.steps.len(),
            if ok { "yes" } else { "no" }
        ),
    )
}

fn oracles(cfg: &ScenarioConfig) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let g = three_bus();
    let st = solve_dc_power_flow(&g, &InjectionVector(THREE_BUS_INJ.to_vec())).expect("3-bus solve");
    let dc_err = st
        .theta
        .iter()
        .zip(THREE_BUS_THETA)
        .map(|(a, b)| (a - b).abs())
        .chain((0..3).map(|k| (branch_flow_by_index(&g, &st.theta, k) - THREE_BUS_FLOWS[k]).abs()))
        .fold(0.0, f64::max);
    ok &= dc_err < 1e-10;
    notes.push(format!("3-bus DC err {dc_err:.1e}"));

    // brute force: random 1- and 2-bus problems plus the operator's own F
    let mut worst_gap = f64::NEG_INFINITY;
    let mut r = rng(2024);
    let mut cases = Vec::new();
    for k in 0..20 {
        let s = 1 + k % 2;
        let h = random_matrix(&mut r, 12, 4);
        let mut e = random_matrix(&mut r, 12, s);
        for mut c in e.column_iter_mut() {
            let n = c.norm();
            c /= n;
        }
        cases.push((compute_f_matrix(&h).expect("random H full rank"), e, 0.001 + 0.002 * k as f64));
    }
    let grid = load_ieee24_rts();
    let (est, _) = operator_estimator(&grid, cfg).expect("estimator");
    let wh = est.whitener() * est.jacobian();
    let f_op = compute_f_matrix(&wh).expect("operator F");
    let n_flows = grid.n_branches();
    let angles_only = est.whitener().select_columns(&[n_flows + 12, n_flows + 22]);
    let scale = angles_only.column(0).norm();
    cases.push((f_op, angles_only / scale, 0.02));
    for (f, e, zeta) in &cases {
        let eps = 0.05 * zeta;
        let grid_min = brute_force_band_min(f, e, 1.0, *zeta, eps);
        let pref = vec![1.0; e.ncols()];
        match (solve_attack_step(f, e, 1.0, *zeta, eps, &pref), grid_min) {
            (Ok(StepOutcome::Feasible { objective, .. }), Some(gm)) => worst_gap = worst_gap.max(objective - gm),
            (Ok(StepOutcome::Infeasible { .. }), None) => {}
            _ => ok = false,
        }
    }
    ok &= worst_gap <= 1e-6;
    notes.push(format!("solver − brute force ≤ {worst_gap:.1e} over {} cases", cases.len()));

    let h = state_estimation_jacobian(&grid);
    let mut inv = 0.0f64;
    for _ in 0..10 {
        let z = random_matrix(&mut r, h.nrows(), 1).column(0).into_owned() * 0.1;
        let c = random_matrix(&mut r, h.ncols(), 1).column(0).into_owned() * 0.1;
        let a = est.estimate(&z).expect("wls");
        let b = est.estimate(&(&z + &h * &c)).expect("wls");
        inv = inv.max((&a.residual - &b.residual).amax());
    }
    ok &= inv < 1e-9;
    notes.push(format!("WLS residual change under a = Hc {inv:.1e}"));

    let mut monotone = true;
    for _ in 0..100 {
        let rows = r_dim(&mut r);
        let cols = r_dim(&mut r);
        let m = random_matrix(&mut r, rows, cols);
        let mut prev = f64::INFINITY;
        for rank in 1..=rows.min(cols) {
            let e = low_rank_error(&m, rank).expect("low rank");
            monotone &= e <= prev + 1e-12;
            prev = e;
        }
        monotone &= prev < 1e-9;
    }
    ok &= monotone;
    notes.push(format!("low-rank error monotone on 100 matrices: {monotone}"));

    check(ok, notes.join("; "))
}

fn r_dim(r: &mut rand_chacha::ChaCha8Rng) -> usize {
    rand::Rng::random_range(r, 2..12)
}

fn determinism(cfg: &ScenarioConfig) -> Outcome {
    let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
    for d in &dirs {
        let res = run_limit_crossing_scenario(cfg).expect("scenario");
        export_results(&res, d.path(), &cfg.support).expect("export");
        let rows = run_forecast_study(cfg, &cfg.forecast_trusted_lens).expect("forecast study");
        write_forecast_study(&rows, &d.path().join("forecast")).expect("forecast export");
    }
    let mut names: Vec<String> = RESULT_FILES.iter().map(|s| s.to_string()).collect();
    names.push("forecast/forecast.csv".into());
    names.push("forecast/summary.txt".into());
    let mut differing = Vec::new();
    for n in &names {
        let a = fs::read(dirs[0].path().join(n)).unwrap_or_default();
        let b = fs::read(dirs[1].path().join(n)).unwrap_or_default();
        if a.is_empty() || a != b {
            differing.push(n.clone());
        }
    }
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two seeded runs", names.len())
        } else {
            format!("differing or empty: {}", differing.join(", "))
        },
    )
}

fn main() {
    let cfg = ScenarioConfig::default();
    let t0 = Instant::now();
    let result = run_limit_crossing_scenario(&cfg);
    let secs = t0.elapsed().as_secs_f64();

    let mut outcomes: Vec<(&str, Outcome)> = Vec::new();
    match &result {
        Ok(r) => {
            outcomes.push(("1 limit crossing", limit_crossing(r, secs)));
            outcomes.push(("2 undetectability", undetectability(r)));
        }
        Err(e) => {
            outcomes.push(("1 limit crossing", check(false, format!("scenario failed: {e}"))));
            outcomes.push(("2 undetectability", check(false, format!("scenario failed: {e}"))));
        }
    }
    outcomes.push(("3 forecast horizon", forecast_horizon(&cfg)));
    match &result {
        Ok(r) => {
            outcomes.push(("4 gradient detector", gradient(r)));
            outcomes.push(("5 band/accumulation", band(r)));
        }
        Err(e) => {
            outcomes.push(("4 gradient detector", check(false, format!("scenario failed: {e}"))));
            outcomes.push(("5 band/accumulation", check(false, format!("scenario failed: {e}"))));
        }
    }
    outcomes.push(("6 oracle equivalences", oracles(&cfg)));
    outcomes.push(("7 determinism", determinism(&cfg)));

    let mut failed = 0;
    println!("\nacceptance criteria");
    for (name, o) in &outcomes {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += (!o.pass) as usize;
    }
    println!("{} passed, {failed} failed\n", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
