//! Scenario configuration as flat `dotted.key = value` pairs.
//!
//! A config file holds one assignment per line; blank lines and `#` comments
//! are ignored. Command-line overrides use the same keys. Every key is listed
//! in [`KEYS`]; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::attack::{Imprint, ZetaDivisor};
use crate::error::{Error, Result};
use crate::hankel::RankRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientSource {
    /// Gradients of the Hankel low-rank-error series.
    Error,
    /// Gradients of the unwrapped angle series themselves.
    Angle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub duration_s: f64,
    pub frame_rate: f64,
    pub seed: u64,

    pub slack_bus: usize,
    pub step_bus: usize,
    pub load_step_times: Vec<f64>,
    pub load_step_fraction: f64,
    pub ambient_load_pct: f64,
    pub freq_offset_hz: f64,

    pub noise_var_deg2: f64,
    pub noise_on_stream: bool,

    pub attack_enabled: bool,
    pub attack_start: f64,
    pub attack_steps: usize,
    pub target: (usize, usize),
    pub support: Vec<usize>,
    pub epsilon_fraction: f64,
    pub lead_time: f64,
    /// `None` selects `sqrt(χ²_0.95(m − n))`.
    pub tau_r: Option<f64>,
    pub zeta_divisor: ZetaDivisor,
    pub critical_fraction: f64,

    pub trusted_len: usize,
    pub hankel_tau: usize,
    pub hankel_kappa: usize,
    /// `None` selects the energy rule.
    pub forecast_rank: Option<usize>,
    pub rank_energy: f64,

    pub beta: f64,
    pub hankel_windows: Vec<usize>,
    pub detect_rank: usize,
    pub hankel_spike_factor: f64,
    pub gradient_window: usize,
    pub gradient_pairs: Vec<(usize, usize)>,
    pub dead_band: f64,
    pub gradient_source: GradientSource,
    pub gradient_rate_threshold: f64,
    pub dkf_q: f64,
    pub dkf_cap: f64,

    pub forecast_bus: usize,
    pub forecast_trusted_lens: Vec<usize>,
    pub forecast_start: f64,
    pub forecast_max_horizon: usize,

    pub random_buses: Vec<usize>,
    pub random_start: f64,
    pub random_scale: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration_s: 15.0,
            frame_rate: 60.0,
            seed: 42,
            slack_bus: 23,
            step_bus: 13,
            load_step_times: vec![5.0, 9.0, 13.0],
            load_step_fraction: 0.5,
            ambient_load_pct: 1.0,
            freq_offset_hz: 0.0,
            noise_var_deg2: 0.5,
            noise_on_stream: false,
            attack_enabled: true,
            attack_start: 2.0,
            attack_steps: 12,
            target: (13, 23),
            support: vec![23],
            epsilon_fraction: 0.05,
            lead_time: 0.15,
            tau_r: None,
            zeta_divisor: ZetaDivisor::InitialSteps,
            critical_fraction: 0.95,
            trusted_len: 50,
            hankel_tau: 50,
            hankel_kappa: 25,
            forecast_rank: None,
            rank_energy: 0.99,
            beta: 3.0,
            hankel_windows: vec![80, 100, 120],
            detect_rank: 2,
            hankel_spike_factor: 5.0,
            gradient_window: 80,
            gradient_pairs: vec![(13, 23), (13, 12), (23, 12), (23, 11)],
            dead_band: 1e-9,
            gradient_source: GradientSource::Error,
            gradient_rate_threshold: 0.1,
            dkf_q: 1e-4,
            dkf_cap: 1e6,
            forecast_bus: 3,
            forecast_trusted_lens: vec![20, 30, 50],
            forecast_start: 1.0,
            forecast_max_horizon: 60,
            random_buses: vec![3, 18],
            random_start: 5.0,
            random_scale: 1.0,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("scenario.duration_s", "simulated time span in seconds"),
    ("scenario.frame_rate", "PMU frames per second"),
    ("scenario.seed", "seed for every random draw"),
    ("grid.slack_bus", "slack bus id"),
    ("grid.step_bus", "bus whose load steps up"),
    ("grid.load_step_times", "comma-separated load step times, s"),
    ("grid.load_step_fraction", "each step adds this fraction of the base load"),
    ("grid.ambient_load_pct", "amplitude of the slow system-wide load fluctuation, %"),
    ("grid.freq_offset_hz", "off-nominal frequency; adds a common angle drift"),
    ("noise.var_deg2", "measurement noise variance, degrees squared"),
    ("noise.apply_to_stream", "add noise to the detection stream (true/false)"),
    ("attack.enabled", "plan and inject the optimized attack (true/false)"),
    ("attack.start_time", "first attack epoch, s"),
    ("attack.steps", "number of 1-PPS attack epochs T"),
    ("attack.target_branch", "target branch as from-to"),
    ("attack.support", "comma-separated spoofed buses (1 or 2, ends of the target)"),
    ("attack.epsilon_fraction", "L1 band width as a fraction of the step budget"),
    ("attack.lead_time", "attacker computation lead time Ts, s"),
    ("attack.tau_r", "residual threshold, or auto for the chi-square 95% gate"),
    ("attack.zeta_divisor", "initial (divide by T) or remaining (divide by T - t)"),
    ("attack.critical_fraction", "fraction of the line rating reported as critical"),
    ("hankel.trusted_len", "trusted samples L for the estimation threshold"),
    ("hankel.tau", "forecast window length"),
    ("hankel.kappa", "forecast Hankel row count"),
    ("hankel.rank", "forecast rank, or auto for the energy rule"),
    ("hankel.rank_energy", "energy fraction used by the auto rank rule"),
    ("detect.beta", "normalized residual threshold"),
    ("detect.windows", "comma-separated Hankel monitor window lengths"),
    ("detect.rank", "rank of the Hankel monitor approximation"),
    ("detect.hankel_spike_factor", "spike when the error exceeds this multiple of its running median"),
    ("detect.gradient_window", "window length whose errors feed the gradient detector"),
    ("detect.gradient_pairs", "comma-separated bus pairs as a-b"),
    ("detect.dead_band", "gradients smaller than this are sign-neutral"),
    ("detect.gradient_source", "error (low-rank error series) or angle (unwrapped angles)"),
    ("detect.gradient_rate_threshold", "mismatch rate above which a pair is reported"),
    ("detect.dkf_q", "Kalman process noise scale"),
    ("detect.dkf_cap", "cap on DKF variance growth relative to the initial value"),
    ("forecast.bus", "bus whose angle the forecast study predicts"),
    ("forecast.trusted_lens", "comma-separated trusted lengths L to study"),
    ("forecast.start_time", "time at which the forecast study starts predicting, s"),
    ("forecast.max_horizon", "longest horizon evaluated by the forecast study"),
    ("random.buses", "buses shifted in the random-shift case"),
    ("random.start_time", "first random shift epoch, s"),
    ("random.scale", "random shift magnitude as a multiple of the reference step budget"),
];

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v
        .trim()
        .split_once('-')
        .ok_or_else(|| Error::Config(format!("{key}: expected a-b, got {v:?}")))?;
    Ok((parse_num(key, a)?, parse_num(key, b)?))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl ScenarioConfig {
    /// Current value of `key` in config-file syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "scenario.duration_s" => self.duration_s.to_string(),
            "scenario.frame_rate" => self.frame_rate.to_string(),
            "scenario.seed" => self.seed.to_string(),
            "grid.slack_bus" => self.slack_bus.to_string(),
            "grid.step_bus" => self.step_bus.to_string(),
            "grid.load_step_times" => join(&self.load_step_times),
            "grid.load_step_fraction" => self.load_step_fraction.to_string(),
            "grid.ambient_load_pct" => self.ambient_load_pct.to_string(),
            "grid.freq_offset_hz" => self.freq_offset_hz.to_string(),
            "noise.var_deg2" => self.noise_var_deg2.to_string(),
            "noise.apply_to_stream" => self.noise_on_stream.to_string(),
            "attack.enabled" => self.attack_enabled.to_string(),
            "attack.start_time" => self.attack_start.to_string(),
            "attack.steps" => self.attack_steps.to_string(),
            "attack.target_branch" => format!("{}-{}", self.target.0, self.target.1),
            "attack.support" => join(&self.support),
            "attack.epsilon_fraction" => self.epsilon_fraction.to_string(),
            "attack.lead_time" => self.lead_time.to_string(),
            "attack.tau_r" => self.tau_r.map_or("auto".into(), |v| v.to_string()),
            "attack.zeta_divisor" => match self.zeta_divisor {
                ZetaDivisor::InitialSteps => "initial".into(),
                ZetaDivisor::RemainingSteps => "remaining".into(),
            },
            "attack.critical_fraction" => self.critical_fraction.to_string(),
            "hankel.trusted_len" => self.trusted_len.to_string(),
            "hankel.tau" => self.hankel_tau.to_string(),
            "hankel.kappa" => self.hankel_kappa.to_string(),
            "hankel.rank" => self.forecast_rank.map_or("auto".into(), |r| r.to_string()),
            "hankel.rank_energy" => self.rank_energy.to_string(),
            "detect.beta" => self.beta.to_string(),
            "detect.windows" => join(&self.hankel_windows),
            "detect.rank" => self.detect_rank.to_string(),
            "detect.hankel_spike_factor" => self.hankel_spike_factor.to_string(),
            "detect.gradient_window" => self.gradient_window.to_string(),
            "detect.gradient_pairs" => self
                .gradient_pairs
                .iter()
                .map(|(a, b)| format!("{a}-{b}"))
                .collect::<Vec<_>>()
                .join(","),
            "detect.dead_band" => self.dead_band.to_string(),
            "detect.gradient_source" => match self.gradient_source {
                GradientSource::Error => "error".into(),
                GradientSource::Angle => "angle".into(),
            },
            "detect.gradient_rate_threshold" => self.gradient_rate_threshold.to_string(),
            "detect.dkf_q" => self.dkf_q.to_string(),
            "detect.dkf_cap" => self.dkf_cap.to_string(),
            "forecast.bus" => self.forecast_bus.to_string(),
            "forecast.trusted_lens" => join(&self.forecast_trusted_lens),
            "forecast.start_time" => self.forecast_start.to_string(),
            "forecast.max_horizon" => self.forecast_max_horizon.to_string(),
            "random.buses" => join(&self.random_buses),
            "random.start_time" => self.random_start.to_string(),
            "random.scale" => self.random_scale.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "scenario.duration_s" => self.duration_s = parse_num(k, v)?,
            "scenario.frame_rate" => self.frame_rate = parse_num(k, v)?,
            "scenario.seed" => self.seed = parse_num(k, v)?,
            "grid.slack_bus" => self.slack_bus = parse_num(k, v)?,
            "grid.step_bus" => self.step_bus = parse_num(k, v)?,
            "grid.load_step_times" => self.load_step_times = parse_list(k, v)?,
            "grid.load_step_fraction" => self.load_step_fraction = parse_num(k, v)?,
            "grid.ambient_load_pct" => self.ambient_load_pct = parse_num(k, v)?,
            "grid.freq_offset_hz" => self.freq_offset_hz = parse_num(k, v)?,
            "noise.var_deg2" => self.noise_var_deg2 = parse_num(k, v)?,
            "noise.apply_to_stream" => self.noise_on_stream = parse_bool(k, v)?,
            "attack.enabled" => self.attack_enabled = parse_bool(k, v)?,
            "attack.start_time" => self.attack_start = parse_num(k, v)?,
            "attack.steps" => self.attack_steps = parse_num(k, v)?,
            "attack.target_branch" => self.target = parse_pair(k, v)?,
            "attack.support" => self.support = parse_list(k, v)?,
            "attack.epsilon_fraction" => self.epsilon_fraction = parse_num(k, v)?,
            "attack.lead_time" => self.lead_time = parse_num(k, v)?,
            "attack.tau_r" => {
                self.tau_r = if v.trim() == "auto" { None } else { Some(parse_num(k, v)?) }
            }
            "attack.zeta_divisor" => {
                self.zeta_divisor = match v.trim() {
                    "initial" => ZetaDivisor::InitialSteps,
                    "remaining" => ZetaDivisor::RemainingSteps,
                    _ => return Err(Error::Config(format!("{k}: expected initial or remaining, got {v:?}"))),
                }
            }
            "attack.critical_fraction" => self.critical_fraction = parse_num(k, v)?,
            "hankel.trusted_len" => self.trusted_len = parse_num(k, v)?,
            "hankel.tau" => self.hankel_tau = parse_num(k, v)?,
            "hankel.kappa" => self.hankel_kappa = parse_num(k, v)?,
            "hankel.rank" => {
                self.forecast_rank = if v.trim() == "auto" { None } else { Some(parse_num(k, v)?) }
            }
            "hankel.rank_energy" => self.rank_energy = parse_num(k, v)?,
            "detect.beta" => self.beta = parse_num(k, v)?,
            "detect.windows" => self.hankel_windows = parse_list(k, v)?,
            "detect.rank" => self.detect_rank = parse_num(k, v)?,
            "detect.hankel_spike_factor" => self.hankel_spike_factor = parse_num(k, v)?,
            "detect.gradient_window" => self.gradient_window = parse_num(k, v)?,
            "detect.gradient_pairs" => {
                self.gradient_pairs = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_pair(k, s))
                    .collect::<Result<_>>()?
            }
            "detect.dead_band" => self.dead_band = parse_num(k, v)?,
            "detect.gradient_source" => {
                self.gradient_source = match v.trim() {
                    "error" => GradientSource::Error,
                    "angle" => GradientSource::Angle,
                    _ => return Err(Error::Config(format!("{k}: expected error or angle, got {v:?}"))),
                }
            }
            "detect.gradient_rate_threshold" => self.gradient_rate_threshold = parse_num(k, v)?,
            "detect.dkf_q" => self.dkf_q = parse_num(k, v)?,
            "detect.dkf_cap" => self.dkf_cap = parse_num(k, v)?,
            "forecast.bus" => self.forecast_bus = parse_num(k, v)?,
            "forecast.trusted_lens" => self.forecast_trusted_lens = parse_list(k, v)?,
            "forecast.start_time" => self.forecast_start = parse_num(k, v)?,
            "forecast.max_horizon" => self.forecast_max_horizon = parse_num(k, v)?,
            "random.buses" => self.random_buses = parse_list(k, v)?,
            "random.start_time" => self.random_start = parse_num(k, v)?,
            "random.scale" => self.random_scale = parse_num(k, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?}; valid keys: {}",
                    KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn apply_assignment(&mut self, line: &str) -> Result<()> {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn parse_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_assignment(line).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ScenarioConfig::default();
        cfg.parse_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: match e {
                Error::Config(m) => m,
                other => other.to_string(),
            },
        })?;
        Ok(cfg)
    }

    /// The whole configuration in file syntax, one key per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("every listed key has a value"));
        }
        out
    }

    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.frame_rate).round() as usize
    }

    pub fn forecast_rank_rule(&self) -> RankRule {
        match self.forecast_rank {
            Some(r) => RankRule::Fixed(r),
            None => RankRule::Energy(self.rank_energy),
        }
    }

    pub fn imprint(&self) -> Imprint {
        Imprint::Consistent
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.frame_rate > 0.0) {
            return bad("scenario.frame_rate must be positive".into());
        }
        if !(self.duration_s > 0.0) || self.n_frames() < 2 {
            return bad("scenario.duration_s must cover at least two frames".into());
        }
        for &t in &self.load_step_times {
            if !(0.0..=self.duration_s).contains(&t) {
                return bad(format!("load step at {t} s lies outside the run"));
            }
        }
        if self.noise_var_deg2 <= 0.0 {
            return bad("noise.var_deg2 must be positive (it also sets the estimator weights)".into());
        }
        if self.attack_enabled {
            let last = self.attack_start + self.attack_steps.saturating_sub(1) as f64;
            if self.attack_start < 0.0 || last >= self.duration_s {
                return bad(format!(
                    "attack epochs {}..={last} s must lie inside the run",
                    self.attack_start
                ));
            }
        }
        if self.hankel_tau < 3 || self.hankel_kappa < 2 || self.hankel_kappa + 1 > self.hankel_tau {
            return bad("hankel.kappa must satisfy 2 <= kappa <= tau-1".into());
        }
        if !(0.0..=1.0).contains(&self.rank_energy) || self.rank_energy == 0.0 {
            return bad("hankel.rank_energy must lie in (0, 1]".into());
        }
        if self.trusted_len < 2 {
            return bad("hankel.trusted_len must be at least 2".into());
        }
        if self.hankel_windows.iter().any(|&w| w < 4) || self.gradient_window < 4 {
            return bad("Hankel monitor windows must be at least 4 samples".into());
        }
        if self.detect_rank < 1 {
            return bad("detect.rank must be at least 1".into());
        }
        if self.forecast_trusted_lens.iter().any(|&l| l < 4) {
            return bad("forecast.trusted_lens entries must be at least 4".into());
        }
        if self.forecast_max_horizon < 1 {
            return bad("forecast.max_horizon must be at least 1".into());
        }
        Ok(())
    }
}

/// Key reference for help output: `key = default  # description`.
pub fn key_reference() -> String {
    let d = ScenarioConfig::default();
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, desc) in KEYS {
        let _ = writeln!(
            out,
            "  {k:<width$} = {:<14} {desc}",
            d.get(k).expect("every listed key has a default")
        );
    }
    out
}
