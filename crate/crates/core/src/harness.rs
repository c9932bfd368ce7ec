//! End-to-end experiment: simulate, attack, detect.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::attack::{
    apply_schedule, impact_threshold, plan_relentless_attack, AttackConfig, AttackSchedule, AttackStep,
    HankelForecaster,
};
use crate::config::{GradientSource, ScenarioConfig};
use crate::detectors::{
    dkf_residual_series, gradient_sign_detector, hankel_error_series, stacked_measurements,
    state_estimation_jacobian, wls_residual_series, DetectorVerdict, DkfConfig, GradientSeries, ResidualSeries,
    WlsEstimator,
};
use crate::error::{Error, Result};
use crate::grid::{
    build_measurement_jacobian, load_ieee24_rts, scenario_injections, AmbientLoad, DcSolver, GridModel,
    LoadProfile, MeasurementFrame, NoiseModel, PhasorStream, Provenance,
};
use crate::hankel::{estimation_threshold, predict_horizon, unwrap_phase, HankelWindow};

// Independent random streams derived from the one configured seed.
const STREAM_NOISE: u64 = 0x6e6f_6973_6500_0001;
const STREAM_FORECAST: u64 = 0x666f_7265_6361_0002;
const STREAM_RANDOM_CASE: u64 = 0x7261_6e64_6f6d_0003;

/// The embedded grid with the configured slack bus.
pub fn build_grid(cfg: &ScenarioConfig) -> Result<GridModel> {
    let mut grid = load_ieee24_rts();
    grid.slack_bus = cfg.slack_bus;
    grid.validate()?;
    Ok(grid)
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub grid: GridModel,
    /// Physical angles per frame.
    pub truth: Vec<Vec<f64>>,
    /// What the PMUs report before any attack.
    pub clean: PhasorStream,
}

pub fn simulate(cfg: &ScenarioConfig) -> Result<Simulation> {
    cfg.validate()?;
    let grid = build_grid(cfg)?;
    let solver = DcSolver::new(&grid)?;
    let hf = build_measurement_jacobian(&grid);
    let mut profile = LoadProfile::from_grid(&grid, cfg.step_bus, cfg.load_step_times.clone(), cfg.load_step_fraction);
    if cfg.ambient_load_pct != 0.0 {
        profile.ambient = Some(AmbientLoad::seeded(cfg.ambient_load_pct / 100.0, cfg.seed));
    }
    let noise = NoiseModel::from_variance_deg2(cfg.noise_var_deg2);
    let normal = Normal::new(0.0, noise.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ STREAM_NOISE);

    let n_frames = cfg.n_frames();
    let mut truth = Vec::with_capacity(n_frames);
    let mut frames = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let t = k as f64 / cfg.frame_rate;
        let theta = solver.solve(&scenario_injections(&grid, &profile, t)?)?;
        let drift = 2.0 * std::f64::consts::PI * cfg.freq_offset_hz * t;
        let mut z: Vec<f64> = (&hf * DVector::from_column_slice(&theta)).iter().copied().collect();
        let mut theta_meas: Vec<f64> = theta.iter().map(|v| v + drift).collect();
        let provenance = if cfg.noise_on_stream {
            for v in z.iter_mut().chain(theta_meas.iter_mut()) {
                *v += normal.sample(&mut rng);
            }
            Provenance::Noisy
        } else {
            Provenance::True
        };
        truth.push(theta);
        frames.push(MeasurementFrame { timestamp: t, z, theta_meas, provenance });
    }
    Ok(Simulation {
        grid,
        truth,
        clean: PhasorStream { frame_rate: cfg.frame_rate, frames },
    })
}

/// Operator's estimator: flows and angles weighted by the configured noise.
pub fn operator_estimator(grid: &GridModel, cfg: &ScenarioConfig) -> Result<(WlsEstimator, Vec<f64>)> {
    let h = state_estimation_jacobian(grid);
    let var = NoiseModel::from_variance_deg2(cfg.noise_var_deg2).variance();
    let r_diag = vec![var; h.nrows()];
    let r = DMatrix::from_diagonal(&DVector::from_column_slice(&r_diag));
    Ok((WlsEstimator::new(&h, &r)?, r_diag))
}

/// `sqrt(χ²_0.95(dof))`.
pub fn chi_square_gate(dof: usize) -> Result<f64> {
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(chi.inverse_cdf(0.95).sqrt())
}

pub fn attack_config(cfg: &ScenarioConfig, grid: &GridModel) -> Result<AttackConfig> {
    let tau_r = match cfg.tau_r {
        Some(v) => v,
        None => chi_square_gate(grid.n_branches())?,
    };
    let ac = AttackConfig {
        target: cfg.target,
        support: cfg.support.clone(),
        steps: cfg.attack_steps,
        epsilon_fraction: cfg.epsilon_fraction,
        lead_time: cfg.lead_time,
        start_time: cfg.attack_start,
        tau_r,
        divisor: cfg.zeta_divisor,
        imprint: cfg.imprint(),
    };
    ac.validate()?;
    Ok(ac)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HankelTrace {
    pub bus: usize,
    pub window: usize,
    pub errors: Vec<Option<f64>>,
    pub spikes: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientTrace {
    pub pair: (usize, usize),
    pub series: GradientSeries,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorReport {
    pub times: Vec<f64>,
    pub beta: f64,
    pub wls: ResidualSeries,
    pub dkf: ResidualSeries,
    pub hankel: Vec<HankelTrace>,
    pub gradients: Vec<GradientTrace>,
    pub verdicts: Vec<DetectorVerdict>,
}

impl DetectorReport {
    pub fn gradient(&self, pair: (usize, usize)) -> Option<&GradientTrace> {
        self.gradients.iter().find(|g| g.pair == pair)
    }

    pub fn hankel(&self, bus: usize, window: usize) -> Option<&HankelTrace> {
        self.hankel.iter().find(|h| h.bus == bus && h.window == window)
    }
}

/// Flags errors exceeding `factor` times the median of all earlier errors.
fn spike_flags(errors: &[Option<f64>], factor: f64) -> Vec<bool> {
    let mut seen: Vec<f64> = Vec::new();
    errors
        .iter()
        .map(|e| {
            let Some(v) = *e else { return false };
            let flag = if seen.len() >= 10 {
                let mut s = seen.clone();
                s.sort_by(f64::total_cmp);
                let med = s[s.len() / 2];
                v > factor * med && v > 1e-12
            } else {
                false
            };
            seen.push(v);
            flag
        })
        .collect()
}

pub fn run_detectors(stream: &PhasorStream, grid: &GridModel, cfg: &ScenarioConfig) -> Result<DetectorReport> {
    let times = stream.times();
    let (est, r_diag) = operator_estimator(grid, cfg)?;
    let zs = stacked_measurements(stream);
    let wls = wls_residual_series(&zs, &est, cfg.beta)?;
    let dkf = dkf_residual_series(
        &zs,
        est.jacobian(),
        &r_diag,
        DkfConfig { q_scale: cfg.dkf_q, variance_cap: cfg.dkf_cap, beta: cfg.beta },
    )?;

    let mut buses: Vec<usize> = cfg.gradient_pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    buses.sort_unstable();
    buses.dedup();
    let mut windows = cfg.hankel_windows.clone();
    if !windows.contains(&cfg.gradient_window) {
        windows.push(cfg.gradient_window);
    }
    let mut hankel = Vec::new();
    for &bus in &buses {
        if bus == 0 || bus > grid.n_buses() {
            return Err(Error::Config(format!("monitored bus {bus} does not exist")));
        }
        let ch = stream.angle_channel(bus);
        for &w in &windows {
            let errors = hankel_error_series(&ch, w, cfg.detect_rank)?;
            let spikes = spike_flags(&errors, cfg.hankel_spike_factor);
            hankel.push(HankelTrace { bus, window: w, errors, spikes });
        }
    }

    let source = |bus: usize| -> Vec<Option<f64>> {
        match cfg.gradient_source {
            GradientSource::Error => hankel
                .iter()
                .find(|h| h.bus == bus && h.window == cfg.gradient_window)
                .map(|h| h.errors.clone())
                .unwrap_or_default(),
            GradientSource::Angle => unwrap_phase(&stream.angle_channel(bus)).into_iter().map(Some).collect(),
        }
    };
    let gradients = cfg
        .gradient_pairs
        .iter()
        .map(|&(a, b)| {
            Ok(GradientTrace {
                pair: (a, b),
                series: gradient_sign_detector(&source(a), &source(b), cfg.dead_band)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut verdicts = vec![
        DetectorVerdict::from_flags("wls_lnr", wls.flags.clone(), &times),
        DetectorVerdict::from_flags("dkf_lnr", dkf.flags.clone(), &times),
    ];
    for h in hankel.iter().filter(|h| cfg.hankel_windows.contains(&h.window)) {
        verdicts.push(DetectorVerdict::from_flags(
            format!("hankel_w{}_bus{}", h.window, h.bus),
            h.spikes.clone(),
            &times,
        ));
    }
    for g in &gradients {
        let mut v = DetectorVerdict::from_flags(
            format!("gradient_{}_{}", g.pair.0, g.pair.1),
            g.series.flags.clone(),
            &times,
        );
        v.detected = g.series.rate > cfg.gradient_rate_threshold;
        if !v.detected {
            v.first_detection = None;
        }
        verdicts.push(v);
    }
    Ok(DetectorReport { times, beta: cfg.beta, wls, dkf, hankel, gradients, verdicts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastLogEntry {
    pub epoch: usize,
    pub t_seconds: f64,
    pub bus: usize,
    pub predicted: f64,
    pub actual: f64,
    pub tau_e: f64,
}

impl ForecastLogEntry {
    pub fn error(&self) -> f64 {
        (self.predicted - self.actual).abs()
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub times: Vec<f64>,
    pub true_flow_mva: Vec<f64>,
    pub perceived_flow_mva: Vec<f64>,
    pub limit_mva: f64,
    pub critical_mva: f64,
    pub schedule: Option<AttackSchedule>,
    pub report: DetectorReport,
    pub forecast_log: Vec<ForecastLogEntry>,
    pub reported: PhasorStream,
    /// Time of the first injected shift, if any.
    pub onset: Option<f64>,
}

impl ScenarioResult {
    pub fn max_true_mva(&self) -> f64 {
        self.true_flow_mva.iter().copied().fold(0.0, f64::max)
    }

    /// Largest perceived flow over frames with `lo <= t < hi`.
    pub fn max_perceived_between(&self, lo: f64, hi: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.perceived_flow_mva)
            .filter(|(t, _)| **t >= lo && **t < hi)
            .map(|(_, v)| *v)
            .fold(0.0, f64::max)
    }

    pub fn first_crossing(&self, level_mva: f64) -> Option<f64> {
        self.times
            .iter()
            .zip(&self.perceived_flow_mva)
            .find(|(_, v)| **v > level_mva)
            .map(|(t, _)| *t)
    }
}

fn flow_series_mva(grid: &GridModel, angles: impl Iterator<Item = Vec<f64>>, (i, j): (usize, usize)) -> Result<Vec<f64>> {
    let (k, _) = grid.find_branch(i, j)?;
    let x = grid.branches[k].x;
    Ok(angles.map(|th| ((th[i - 1] - th[j - 1]) / x).abs() * grid.base_mva).collect())
}

fn assemble(
    cfg: &ScenarioConfig,
    sim: &Simulation,
    reported: PhasorStream,
    schedule: Option<AttackSchedule>,
    forecast_log: Vec<ForecastLogEntry>,
) -> Result<ScenarioResult> {
    let grid = &sim.grid;
    let (k, _) = grid.find_branch(cfg.target.0, cfg.target.1)?;
    let limit_mva = grid.branches[k].mva_limit;
    let true_flow_mva = flow_series_mva(grid, sim.truth.iter().cloned(), cfg.target)?;
    let perceived_flow_mva = flow_series_mva(
        grid,
        reported.frames.iter().map(|f| f.theta_meas.clone()),
        cfg.target,
    )?;
    let report = run_detectors(&reported, grid, cfg)?;
    let onset = schedule
        .as_ref()
        .and_then(|s| s.steps.iter().find(|st| st.feasible && st.l1() > 0.0).map(|st| st.t_seconds));
    Ok(ScenarioResult {
        times: reported.times(),
        true_flow_mva,
        perceived_flow_mva,
        limit_mva,
        critical_mva: cfg.critical_fraction * limit_mva,
        schedule,
        report,
        forecast_log,
        reported,
        onset,
    })
}

fn forecast_log(cfg: &ScenarioConfig, reported: &PhasorStream, schedule: &AttackSchedule) -> Result<Vec<ForecastLogEntry>> {
    let lead = (cfg.lead_time * cfg.frame_rate - 1e-9).ceil().max(0.0) as usize;
    let mut out = Vec::new();
    for st in &schedule.steps {
        let k = reported.frame_index(st.t_seconds);
        let last_seen = k.saturating_sub(lead);
        for (bus, predicted) in [(cfg.target.0, st.forecast.0), (cfg.target.1, st.forecast.1)] {
            // Value the attacker was predicting: the reported angle before
            // this epoch's own increment lands.
            let own = schedule
                .support
                .iter()
                .position(|&b| b == bus)
                .map_or(0.0, |p| st.increment[p]);
            let actual = reported.frames[k].theta_meas[bus - 1] - own;
            let history = unwrap_phase(
                &reported.frames[..=last_seen].iter().map(|f| f.theta_meas[bus - 1]).collect::<Vec<_>>(),
            );
            let tau_e = if history.len() >= cfg.trusted_len {
                estimation_threshold(&history, st.t_seconds, f64::NEG_INFINITY, cfg.trusted_len)?
            } else {
                f64::NAN
            };
            out.push(ForecastLogEntry { epoch: st.epoch, t_seconds: st.t_seconds, bus, predicted, actual, tau_e });
        }
    }
    Ok(out)
}

/// Simulates the grid, plans and injects the optimized attack (unless
/// disabled), and runs every detector over the reported stream.
pub fn run_limit_crossing_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult> {
    let sim = simulate(cfg)?;
    if !cfg.attack_enabled {
        return assemble(cfg, &sim, sim.clean.clone(), None, Vec::new());
    }
    let (est, _) = operator_estimator(&sim.grid, cfg)?;
    let ac = attack_config(cfg, &sim.grid)?;
    let forecaster = HankelForecaster {
        tau: cfg.hankel_tau,
        kappa: cfg.hankel_kappa,
        rank: cfg.forecast_rank_rule(),
    };
    let schedule = plan_relentless_attack(&sim.grid, &sim.clean, &ac, &forecaster, &est)?;
    let reported = apply_schedule(&sim.clean, &schedule);
    let log = forecast_log(cfg, &reported, &schedule)?;
    assemble(cfg, &sim, reported, Some(schedule), log)
}

/// Step budget computed from the true angles at the attack start.
pub fn reference_step_budget(cfg: &ScenarioConfig, sim: &Simulation) -> Result<f64> {
    let (i, j) = cfg.target;
    let k = sim.clean.frame_index(cfg.attack_start).min(sim.truth.len() - 1);
    let th = &sim.truth[k];
    let (ti, tj) = (th[i - 1], th[j - 1]);
    let (kb, _) = sim.grid.find_branch(i, j)?;
    if (ti - tj) / sim.grid.branches[kb].x >= 0.0 {
        impact_threshold(&sim.grid, i, j, ti, tj, cfg.attack_steps)
    } else {
        impact_threshold(&sim.grid, j, i, tj, ti, cfg.attack_steps)
    }
}

/// Unoptimized comparison case: independent random per-epoch angle shifts at
/// the configured buses, with no flow-channel imprint.
pub fn run_random_shift_case(cfg: &ScenarioConfig) -> Result<ScenarioResult> {
    let sim = simulate(cfg)?;
    let n = sim.grid.n_buses();
    if cfg.random_buses.is_empty() || cfg.random_buses.iter().any(|&b| b == 0 || b > n) {
        return Err(Error::Config("random.buses must list existing buses".into()));
    }
    let budget = reference_step_budget(cfg, &sim)?;
    let amplitude = cfg.random_scale * budget;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ STREAM_RANDOM_CASE);
    let support = cfg.random_buses.clone();
    let mut schedule = AttackSchedule::empty(support.clone(), sim.grid.n_branches());
    let mut cumulative = vec![0.0; support.len()];
    let mut epoch = 0;
    loop {
        let t = cfg.random_start + epoch as f64;
        if t >= cfg.duration_s {
            break;
        }
        let increment: Vec<f64> = support.iter().map(|_| amplitude * rng.random_range(-1.0..=1.0)).collect();
        for (c, a) in cumulative.iter_mut().zip(&increment) {
            *c += a;
        }
        let time_shift = cumulative
            .iter()
            .map(|c| crate::attack::angle_to_time_shift(*c, sim.grid.nominal_frequency))
            .collect::<Result<_>>()?;
        let k = sim.clean.frame_index(t);
        schedule.steps.push(AttackStep {
            epoch,
            t_seconds: sim.clean.frames.get(k).map_or(t, |f| f.timestamp),
            increment,
            cumulative: cumulative.clone(),
            time_shift,
            forecast: (f64::NAN, f64::NAN),
            zeta: budget,
            epsilon: 0.0,
            headroom: f64::NAN,
            objective: f64::NAN,
            feasible: true,
            note: Some("random shift".into()),
        });
        epoch += 1;
    }
    let reported = apply_schedule(&sim.clean, &schedule);
    assemble(cfg, &sim, reported, Some(schedule), Vec::new())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastStudyRow {
    pub trusted_len: usize,
    pub tau_e: f64,
    /// Absolute error against the noise-free channel, per horizon step.
    pub errors: Vec<f64>,
    /// Length of the leading run of steps whose error is below `tau_e`.
    pub horizon_below: usize,
}

/// Forecasts a noisy angle channel from `L` trusted samples for each `L` and
/// measures how many consecutive predictions stay inside the estimation
/// threshold.
pub fn run_forecast_study(cfg: &ScenarioConfig, trusted_lens: &[usize]) -> Result<Vec<ForecastStudyRow>> {
    let sim = simulate(cfg)?;
    let bus = cfg.forecast_bus;
    if bus == 0 || bus > sim.grid.n_buses() {
        return Err(Error::Config(format!("forecast.bus {bus} does not exist")));
    }
    let reference: Vec<f64> = sim.truth.iter().map(|th| th[bus - 1]).collect();
    let noise = NoiseModel::from_variance_deg2(cfg.noise_var_deg2);
    let normal = Normal::new(0.0, noise.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ STREAM_FORECAST);
    let noisy: Vec<f64> = reference.iter().map(|v| v + normal.sample(&mut rng)).collect();

    let start = sim.clean.frame_index(cfg.forecast_start);
    let mut rows = Vec::new();
    for &len in trusted_lens {
        if len > start {
            return Err(Error::Config(format!(
                "forecast.start_time leaves {start} samples, fewer than L = {len}"
            )));
        }
        let horizon = cfg.forecast_max_horizon.min(reference.len() - start);
        if horizon == 0 {
            return Err(Error::Config("forecast.start_time leaves no frames to predict".into()));
        }
        let trusted = &noisy[start - len..start];
        let tau_e = estimation_threshold(trusted, cfg.forecast_start, f64::NEG_INFINITY, len)?;
        let window = HankelWindow::half(trusted.to_vec())?;
        let fc = predict_horizon(&window, horizon, cfg.forecast_rank_rule())?;
        let errors: Vec<f64> = fc
            .predicted
            .iter()
            .zip(&reference[start..start + horizon])
            .map(|(p, r)| (p - r).abs())
            .collect();
        let horizon_below = errors.iter().take_while(|e| **e < tau_e).count();
        rows.push(ForecastStudyRow { trusted_len: len, tau_e, errors, horizon_below });
    }
    Ok(rows)
}
