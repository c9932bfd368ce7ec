//! Relentless incremental GPS-spoofing attack synthesis.
//!
//! Once per 1-PPS epoch the attacker forecasts the target branch's end-bus
//! angles over its computation delay, derives the per-step impact budget ζ′,
//! and picks the increment `a` that keeps the state-estimation residual
//! inside the bad-data threshold while its L1 norm sits just above ζ′.
//! Summed over `T` epochs the increments push perceived flow past the limit.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::detectors::WlsEstimator;
use crate::error::{Error, Result};
use crate::grid::{build_measurement_jacobian, GridModel, PhasorStream, Provenance};
use crate::hankel::{checked_svd, predict_horizon, unwrap_phase, HankelWindow, RankRule};

/// Minimum slack required on every certified constraint.
pub const CERT_SLACK: f64 = 1e-10;

/// `F = H(HᵀH)⁻¹Hᵀ − I`, the negated projector onto the residual space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    pub f: DMatrix<f64>,
}

pub fn compute_f_matrix(h: &DMatrix<f64>) -> Result<ProjectionMatrix> {
    let (m, n) = h.shape();
    if m < n || n == 0 {
        return Err(Error::RankDeficient(format!("{m}×{n} matrix cannot have full column rank")));
    }
    let svd = checked_svd(h);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(Error::RankDeficient(format!(
            "measurement matrix is not full column rank (σ_min={smin:e}, σ_max={smax:e})"
        )));
    }
    // Column-space basis from the left singular vectors avoids forming (HᵀH)⁻¹.
    let u = svd.u.expect("u requested");
    let f = &u * u.transpose() - DMatrix::identity(m, m);
    Ok(ProjectionMatrix { f: (&f + f.transpose()) * 0.5 })
}

/// Per-step budget `ζ′ = x·(|P_lim| − (θ_i − θ_j)/x) / T` for branch `i → j`.
pub fn impact_threshold(grid: &GridModel, i: usize, j: usize, theta_i: f64, theta_j: f64, steps: usize) -> Result<f64> {
    if steps < 1 {
        return Err(Error::InvalidArgument("attack needs at least one step".into()));
    }
    let (k, _) = grid.find_branch(i, j)?;
    let br = &grid.branches[k];
    let limit = br.mva_limit.abs() / grid.base_mva;
    let flow = (theta_i - theta_j) / br.x;
    let bracket = limit - flow;
    if bracket < 0.0 {
        return Err(Error::TargetUnreachable { flow_pu: flow, limit_pu: limit });
    }
    Ok(br.x * bracket / steps as f64)
}

pub fn angle_to_time_shift(angle: f64, f0: f64) -> Result<f64> {
    if !(f0 > 0.0) {
        return Err(Error::InvalidArgument(format!("frequency must be positive, got {f0}")));
    }
    Ok(angle / (2.0 * PI * f0))
}

pub fn time_shift_to_angle(dt: f64, f0: f64) -> Result<f64> {
    if !(f0 > 0.0) {
        return Err(Error::InvalidArgument(format!("frequency must be positive, got {f0}")));
    }
    Ok(2.0 * PI * f0 * dt)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Feasible { a: Vec<f64>, objective: f64 },
    Infeasible { reason: String },
}

/// Minimizes `‖F·E·a‖₂` subject to `‖F·E·a‖₂ ≤ headroom` and
/// `ζ′ < ‖a‖₁ < ζ′ + ε`, for a support of one or two coordinates.
///
/// `embed` (m × s) maps support coordinates into measurement space.
/// `preference` breaks ties between equally good candidates: the candidate
/// with the largest `preference·a` wins.
///
/// The objective is homogeneous of degree two, so on the band its infimum is
/// reached at the smallest admissible L1 radius. Each sign orthant turns the
/// L1 sphere into a simplex face on which the quadratic has a closed-form
/// minimum.
pub fn solve_attack_step(
    f: &ProjectionMatrix,
    embed: &DMatrix<f64>,
    headroom: f64,
    zeta: f64,
    epsilon: f64,
    preference: &[f64],
) -> Result<StepOutcome> {
    let s = embed.ncols();
    if !(1..=2).contains(&s) {
        return Err(Error::InvalidArgument(format!("support must have 1 or 2 buses, got {s}")));
    }
    if embed.nrows() != f.f.nrows() {
        return Err(Error::LengthMismatch { left: embed.nrows(), right: f.f.nrows() });
    }
    if preference.len() != s {
        return Err(Error::LengthMismatch { left: preference.len(), right: s });
    }
    if !(zeta > 0.0) || !(epsilon > 0.0) || !zeta.is_finite() || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "band needs ζ′ > 0 and ε > 0, got ζ′={zeta} ε={epsilon}"
        )));
    }
    if !(headroom > 0.0) {
        return Ok(StepOutcome::Infeasible {
            reason: format!("no residual headroom ({headroom:.3e})"),
        });
    }
    let margin = (1e-6 * epsilon).max(2.0 * CERT_SLACK);
    if epsilon - margin < CERT_SLACK {
        return Ok(StepOutcome::Infeasible {
            reason: format!("band width {epsilon:e} too narrow to certify"),
        });
    }
    let radius = zeta + margin;

    let fe = &f.f * embed;
    let m = fe.transpose() * &fe;

    let mut candidates: Vec<Vec<f64>> = Vec::new();
    if s == 1 {
        candidates.push(vec![radius]);
        candidates.push(vec![-radius]);
    } else {
        for (s1, s2) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let m11 = m[(0, 0)];
            let m22 = m[(1, 1)];
            let m12 = s1 * s2 * m[(0, 1)];
            let curv = m11 - 2.0 * m12 + m22;
            let mut lambdas = vec![0.0, 1.0];
            if curv > 1e-300 {
                let lam = (m22 - m12) / curv;
                if (0.0..=1.0).contains(&lam) {
                    lambdas.push(lam);
                }
            }
            for lam in lambdas {
                // `+ 0.0` turns a signed zero into a plain one
                candidates.push(vec![s1 * radius * lam + 0.0, s2 * radius * (1.0 - lam) + 0.0]);
            }
        }
    }

    let objective = |a: &[f64]| (&fe * DVector::from_column_slice(a)).norm();
    let best = candidates
        .iter()
        .map(|a| objective(a))
        .fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * (1.0 + best) + 1e-14 * radius;
    let chosen = candidates
        .into_iter()
        .filter(|a| objective(a) <= best + tol)
        .max_by(|a, b| {
            let pa: f64 = a.iter().zip(preference).map(|(x, p)| x * p).sum();
            let pb: f64 = b.iter().zip(preference).map(|(x, p)| x * p).sum();
            pa.total_cmp(&pb)
        })
        .ok_or_else(|| Error::Solver("no candidate increment produced".into()))?;
    let obj = objective(&chosen);

    // Certificate: recheck both constraints on the returned point.
    let l1: f64 = chosen.iter().map(|v| v.abs()).sum();
    if !(l1 - zeta >= CERT_SLACK && zeta + epsilon - l1 >= CERT_SLACK) {
        return Err(Error::Solver(format!(
            "band certificate failed: ‖a‖₁={l1:e}, ζ′={zeta:e}, ε={epsilon:e}"
        )));
    }
    if headroom - obj < CERT_SLACK {
        return Ok(StepOutcome::Infeasible {
            reason: format!("minimum residual growth {obj:.3e} exceeds headroom {headroom:.3e}"),
        });
    }
    Ok(StepOutcome::Feasible { a: chosen, objective: obj })
}

/// Predicts a channel `steps` samples past the end of `history`.
pub trait Forecaster {
    fn forecast(&self, history: &[f64], steps: usize) -> Result<f64>;
}

/// Recursive Hankel subspace forecaster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HankelForecaster {
    pub tau: usize,
    pub kappa: usize,
    pub rank: RankRule,
}

impl Forecaster for HankelForecaster {
    fn forecast(&self, history: &[f64], steps: usize) -> Result<f64> {
        if history.len() < self.tau {
            return Err(Error::InvalidArgument(format!(
                "forecast needs {} samples of history, have {}",
                self.tau,
                history.len()
            )));
        }
        if steps == 0 {
            return Ok(*history.last().expect("non-empty history"));
        }
        let w = HankelWindow::new(history[history.len() - self.tau..].to_vec(), self.kappa)?;
        let f = predict_horizon(&w, steps, self.rank)?;
        Ok(*f.predicted.last().expect("at least one step"))
    }
}

/// Holds the last observed value; exact when the lead time is zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LastValue;

impl Forecaster for LastValue {
    fn forecast(&self, history: &[f64], _steps: usize) -> Result<f64> {
        history
            .last()
            .copied()
            .ok_or_else(|| Error::InvalidArgument("empty history".into()))
    }
}

/// Divisor used when turning the remaining gap into a per-step budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZetaDivisor {
    /// Always the planned number of steps `T`.
    InitialSteps,
    /// `T − t` for epoch `t` (0-based).
    RemainingSteps,
}

/// Which measurement channels carry the injected shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Imprint {
    /// Angles and the branch flows implied by them move together.
    Consistent,
    /// Only the angle channels move.
    AnglesOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub target: (usize, usize),
    pub support: Vec<usize>,
    pub steps: usize,
    /// ε as a fraction of the epoch's ζ′.
    pub epsilon_fraction: f64,
    /// Computation lead time Ts in seconds.
    pub lead_time: f64,
    pub start_time: f64,
    pub tau_r: f64,
    pub divisor: ZetaDivisor,
    pub imprint: Imprint,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("attack.steps must be at least 1".into()));
        }
        if !(self.epsilon_fraction > 0.0) {
            return Err(Error::Config("attack.epsilon_fraction must be positive".into()));
        }
        if !(self.lead_time >= 0.0) {
            return Err(Error::Config("attack.lead_time must be non-negative".into()));
        }
        if self.support.is_empty() || self.support.len() > 2 {
            return Err(Error::Config("attack.support must name 1 or 2 buses".into()));
        }
        let (i, j) = self.target;
        if self.support.iter().any(|b| *b != i && *b != j) {
            return Err(Error::Config(format!(
                "attack.support must be a subset of the target branch ends {{{i}, {j}}}"
            )));
        }
        if self.support.len() == 2 && self.support[0] == self.support[1] {
            return Err(Error::Config("attack.support lists the same bus twice".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackStep {
    pub epoch: usize,
    pub t_seconds: f64,
    /// Increment per support bus, rad. Zero when the step was skipped.
    pub increment: Vec<f64>,
    /// Cumulative shift per support bus after this step, rad.
    pub cumulative: Vec<f64>,
    /// Equivalent GPS time shift per support bus, seconds.
    pub time_shift: Vec<f64>,
    /// Forecast angles of the target branch ends (from, to).
    pub forecast: (f64, f64),
    pub zeta: f64,
    pub epsilon: f64,
    pub headroom: f64,
    pub objective: f64,
    pub feasible: bool,
    pub note: Option<String>,
}

impl AttackStep {
    pub fn l1(&self) -> f64 {
        self.increment.iter().map(|v| v.abs()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSchedule {
    pub support: Vec<usize>,
    /// Flow-channel imprint per unit angle at each support bus (m × s).
    pub flow_imprint: DMatrix<f64>,
    pub steps: Vec<AttackStep>,
}

impl AttackSchedule {
    pub fn empty(support: Vec<usize>, n_flows: usize) -> Self {
        let s = support.len();
        AttackSchedule {
            support,
            flow_imprint: DMatrix::zeros(n_flows, s),
            steps: Vec::new(),
        }
    }

    /// Cumulative shift per support bus active at time `t`.
    pub fn cumulative_at(&self, t: f64, half_frame: f64) -> Vec<f64> {
        let mut cum = vec![0.0; self.support.len()];
        for st in &self.steps {
            if st.t_seconds <= t + half_frame {
                for (c, a) in cum.iter_mut().zip(&st.increment) {
                    *c += a;
                }
            }
        }
        cum
    }

    pub fn accepted(&self) -> impl Iterator<Item = &AttackStep> {
        self.steps.iter().filter(|s| s.feasible)
    }
}

fn imprint_matrix(grid: &GridModel, support: &[usize], imprint: Imprint) -> DMatrix<f64> {
    let hf = build_measurement_jacobian(grid);
    let cols: Vec<usize> = support.iter().map(|b| b - 1).collect();
    match imprint {
        Imprint::Consistent => hf.select_columns(&cols),
        Imprint::AnglesOnly => DMatrix::zeros(hf.nrows(), cols.len()),
    }
}

fn shift_frames(stream: &mut PhasorStream, from_frame: usize, support: &[usize], flow_imprint: &DMatrix<f64>, a: &[f64]) {
    let da = DVector::from_column_slice(a);
    let dz = flow_imprint * da;
    for frame in &mut stream.frames[from_frame..] {
        for (b, v) in support.iter().zip(a) {
            frame.theta_meas[b - 1] += v;
        }
        for (z, d) in frame.z.iter_mut().zip(dz.iter()) {
            *z += d;
        }
        frame.provenance = Provenance::Attacked;
    }
}

/// Applies the held cumulative shift to every frame at or after each epoch.
pub fn apply_schedule(stream: &PhasorStream, schedule: &AttackSchedule) -> PhasorStream {
    let mut out = stream.clone();
    for st in &schedule.steps {
        if !st.feasible || st.increment.iter().all(|v| *v == 0.0) {
            continue;
        }
        let k = out.frame_index(st.t_seconds);
        shift_frames(&mut out, k, &schedule.support, &schedule.flow_imprint, &st.increment);
    }
    out
}

/// Plans the attack against `stream` (the clean reported stream) and returns
/// the schedule. Epochs are `start_time + t` for `t` in `0..steps`.
///
/// The attacker observes the stream it has already corrupted, so each
/// forecast uses the reported angles including earlier increments, with data
/// up to `t − Ts` only.
pub fn plan_relentless_attack(
    grid: &GridModel,
    stream: &PhasorStream,
    cfg: &AttackConfig,
    forecaster: &dyn Forecaster,
    estimator: &WlsEstimator,
) -> Result<AttackSchedule> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::InvalidArgument("cannot plan against an empty stream".into()));
    }
    let (i, j) = cfg.target;
    let (k_branch, _) = grid.find_branch(i, j)?;
    let x = grid.branches[k_branch].x;
    let f0 = grid.nominal_frequency;
    let lead_frames = (cfg.lead_time * stream.frame_rate - 1e-9).ceil().max(0.0) as usize;

    let whitened_h = estimator.whitener() * estimator.jacobian();
    let f = compute_f_matrix(&whitened_h)?;
    let flow_imprint = imprint_matrix(grid, &cfg.support, cfg.imprint);
    let n_flows = flow_imprint.nrows();
    let n = grid.n_buses();
    let embed_raw = DMatrix::from_fn(n_flows + n, cfg.support.len(), |row, c| {
        if row < n_flows {
            flow_imprint[(row, c)]
        } else if row - n_flows == cfg.support[c] - 1 {
            1.0
        } else {
            0.0
        }
    });
    let embed = estimator.whitener() * embed_raw;

    let mut reported = stream.clone();
    let mut schedule = AttackSchedule {
        support: cfg.support.clone(),
        flow_imprint: flow_imprint.clone(),
        steps: Vec::with_capacity(cfg.steps),
    };
    let mut cumulative = vec![0.0; cfg.support.len()];

    for epoch in 0..cfg.steps {
        let t = cfg.start_time + epoch as f64;
        let k_epoch = reported.frame_index(t);
        if k_epoch >= reported.len() {
            return Err(Error::InvalidArgument(format!(
                "attack epoch at {t} s lies beyond the stream"
            )));
        }
        let last_seen = k_epoch.checked_sub(lead_frames).ok_or_else(|| {
            Error::InvalidArgument(format!("epoch at {t} s starts before the lead time is available"))
        })?;

        let history = |bus: usize| -> Vec<f64> {
            let ch: Vec<f64> = reported.frames[..=last_seen].iter().map(|fr| fr.theta_meas[bus - 1]).collect();
            unwrap_phase(&ch)
        };
        let theta_i = forecaster.forecast(&history(i), lead_frames)?;
        let theta_j = forecaster.forecast(&history(j), lead_frames)?;

        let flow = (theta_i - theta_j) / x;
        let dir = if flow < 0.0 { -1.0 } else { 1.0 };
        let divisor = match cfg.divisor {
            ZetaDivisor::InitialSteps => cfg.steps,
            ZetaDivisor::RemainingSteps => cfg.steps - epoch,
        };
        let zeta = if dir > 0.0 {
            impact_threshold(grid, i, j, theta_i, theta_j, divisor)
        } else {
            impact_threshold(grid, j, i, theta_j, theta_i, divisor)
        };

        let residual_norm = {
            let z = crate::detectors::stacked_measurements(&PhasorStream {
                frame_rate: reported.frame_rate,
                frames: vec![reported.frames[last_seen].clone()],
            });
            estimator.whitened_residual_norm(&z[0])?
        };
        let headroom = cfg.tau_r - residual_norm;

        let mut step = AttackStep {
            epoch,
            t_seconds: reported.frames[k_epoch].timestamp,
            increment: vec![0.0; cfg.support.len()],
            cumulative: cumulative.clone(),
            time_shift: vec![0.0; cfg.support.len()],
            forecast: (theta_i, theta_j),
            zeta: 0.0,
            epsilon: 0.0,
            headroom,
            objective: 0.0,
            feasible: false,
            note: None,
        };

        match zeta {
            Err(Error::TargetUnreachable { .. }) => {
                step.note = Some("forecast flow already at or beyond the limit".into());
            }
            Err(e) => return Err(e),
            Ok(z) if z <= 0.0 => {
                step.note = Some("forecast flow exactly at the limit".into());
            }
            Ok(zeta) => {
                let epsilon = cfg.epsilon_fraction * zeta;
                step.zeta = zeta;
                step.epsilon = epsilon;
                // Raising θ_i (or lowering θ_j) raises flow i→j; push along `dir`.
                let preference: Vec<f64> = cfg
                    .support
                    .iter()
                    .map(|&b| if b == i { dir } else { -dir })
                    .collect();
                match solve_attack_step(&f, &embed, headroom, zeta, epsilon, &preference)? {
                    StepOutcome::Feasible { a, objective } => {
                        shift_frames(&mut reported, k_epoch, &cfg.support, &flow_imprint, &a);
                        for (c, v) in cumulative.iter_mut().zip(&a) {
                            *c += v;
                        }
                        step.increment = a;
                        step.objective = objective;
                        step.feasible = true;
                    }
                    StepOutcome::Infeasible { reason } => step.note = Some(reason),
                }
            }
        }
        step.cumulative = cumulative.clone();
        step.time_shift = cumulative
            .iter()
            .map(|c| angle_to_time_shift(*c, f0))
            .collect::<Result<_>>()?;
        schedule.steps.push(step);
    }
    Ok(schedule)
}
