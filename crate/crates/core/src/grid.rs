//! Static network model, lossless DC power flow and measurement synthesis.
//!
//! Bus ids are 1-based everywhere in the public API; vectors indexed by bus
//! use `id - 1`. All powers are per-unit on [`GridModel::base_mva`] and all
//! angles are radians.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const BUSES_CSV: &str = include_str!("../data/buses.csv");
const BRANCHES_CSV: &str = include_str!("../data/branches.csv");

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub load_mw: f64,
    pub gen_mw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    /// Series reactance, p.u.
    pub x: f64,
    /// Series resistance, p.u. Stored for reference; the DC solve ignores it.
    pub r: f64,
    pub mva_limit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub slack_bus: usize,
    pub base_mva: f64,
    /// Nominal system frequency in Hz.
    pub nominal_frequency: f64,
}

impl GridModel {
    /// Builds a grid and checks every structural invariant.
    pub fn new(
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        slack_bus: usize,
        base_mva: f64,
        nominal_frequency: f64,
    ) -> Result<Self> {
        let grid = GridModel {
            buses,
            branches,
            slack_bus,
            base_mva,
            nominal_frequency,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.buses.len();
        if n < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 buses, got {n}")));
        }
        for (k, bus) in self.buses.iter().enumerate() {
            if bus.id != k + 1 {
                return Err(Error::InvalidGrid(format!(
                    "bus ids must be 1..n in order; position {} holds id {}",
                    k + 1,
                    bus.id
                )));
            }
        }
        if self.slack_bus == 0 || self.slack_bus > n {
            return Err(Error::InvalidGrid(format!(
                "slack bus {} is not a valid bus",
                self.slack_bus
            )));
        }
        for br in &self.branches {
            for end in [br.from, br.to] {
                if end == 0 || end > n {
                    return Err(Error::InvalidGrid(format!(
                        "branch {} references unknown bus {end}",
                        br.id
                    )));
                }
            }
            if br.from == br.to {
                return Err(Error::InvalidGrid(format!("branch {} is a self-loop", br.id)));
            }
            if !(br.x > 0.0) {
                return Err(Error::NonPositiveReactance { branch: br.id, x: br.x });
            }
        }
        if !(self.base_mva > 0.0) || !(self.nominal_frequency > 0.0) {
            return Err(Error::InvalidGrid(
                "base MVA and nominal frequency must be positive".into(),
            ));
        }
        if !self.is_connected() {
            return Err(Error::InvalidGrid("network graph is not connected".into()));
        }
        Ok(())
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.buses.len();
        if n == 0 {
            return false;
        }
        let mut adj = vec![Vec::new(); n];
        for br in &self.branches {
            if br.from >= 1 && br.from <= n && br.to >= 1 && br.to <= n {
                adj[br.from - 1].push(br.to - 1);
                adj[br.to - 1].push(br.from - 1);
            }
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Locates the first branch joining `i` and `j`, in either orientation.
    ///
    /// Returns the branch index and `+1.0` if the branch is stored `i -> j`,
    /// `-1.0` if stored `j -> i`.
    pub fn find_branch(&self, i: usize, j: usize) -> Result<(usize, f64)> {
        self.branches
            .iter()
            .enumerate()
            .find_map(|(k, br)| {
                if br.from == i && br.to == j {
                    Some((k, 1.0))
                } else if br.from == j && br.to == i {
                    Some((k, -1.0))
                } else {
                    None
                }
            })
            .ok_or_else(|| Error::UnknownBranch(format!("{i}-{j}")))
    }

    /// Buses sharing a branch with `bus`, ascending, without duplicates.
    pub fn neighbors(&self, bus: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .branches
            .iter()
            .filter_map(|br| {
                if br.from == bus {
                    Some(br.to)
                } else if br.to == bus {
                    Some(br.from)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Per-bus net real power injection in p.u. (generation minus load).
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionVector(pub Vec<f64>);

impl InjectionVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Moves the total mismatch onto the slack bus so the entries sum to zero.
    pub fn balance(&mut self, slack_bus: usize) {
        let total: f64 = self.0.iter().sum();
        self.0[slack_bus - 1] -= total;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngleState {
    pub theta: Vec<f64>,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    True,
    Noisy,
    Attacked,
    Predicted,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::True => "true",
            Provenance::Noisy => "noisy",
            Provenance::Attacked => "attacked",
            Provenance::Predicted => "predicted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "true" => Some(Provenance::True),
            "noisy" => Some(Provenance::Noisy),
            "attacked" => Some(Provenance::Attacked),
            "predicted" => Some(Provenance::Predicted),
            _ => None,
        }
    }
}

/// One PMU reporting instant: branch flows `z` (p.u.) and bus angles (rad).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFrame {
    pub timestamp: f64,
    pub z: Vec<f64>,
    pub theta_meas: Vec<f64>,
    pub provenance: Provenance,
}

/// Fixed-rate sequence of measurement frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasorStream {
    pub frame_rate: f64,
    pub frames: Vec<MeasurementFrame>,
}

impl PhasorStream {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }

    /// Angle channel of one bus (1-based) across all frames.
    pub fn angle_channel(&self, bus: usize) -> Vec<f64> {
        self.frames.iter().map(|f| f.theta_meas[bus - 1]).collect()
    }

    /// Index of the first frame at or after `t` (with a half-frame tolerance).
    pub fn frame_index(&self, t: f64) -> usize {
        let half = 0.5 / self.frame_rate;
        self.frames
            .iter()
            .position(|f| f.timestamp >= t - half)
            .unwrap_or(self.frames.len())
    }
}

/// Loads the embedded 24-bus / 38-branch reliability test system.
///
/// The slack defaults to bus 23, the generator bus adjacent to load bus 13.
pub fn load_ieee24_rts() -> GridModel {
    let buses = parse_buses(BUSES_CSV).expect("embedded bus table is well formed");
    let branches = parse_branches(BRANCHES_CSV).expect("embedded branch table is well formed");
    GridModel::new(buses, branches, 23, 100.0, 60.0).expect("embedded RTS data is valid")
}

fn parse_buses(text: &str) -> std::result::Result<Vec<Bus>, csv::Error> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            Ok(Bus {
                id: rec[0].trim().parse().expect("bus id"),
                load_mw: rec[1].trim().parse().expect("load_mw"),
                gen_mw: rec[2].trim().parse().expect("gen_mw"),
            })
        })
        .collect()
}

fn parse_branches(text: &str) -> std::result::Result<Vec<Branch>, csv::Error> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            Ok(Branch {
                id: rec[0].trim().parse().expect("branch id"),
                from: rec[1].trim().parse().expect("from"),
                to: rec[2].trim().parse().expect("to"),
                x: rec[3].trim().parse().expect("x_pu"),
                r: rec[4].trim().parse().expect("r_pu"),
                mva_limit: rec[5].trim().parse().expect("mva_limit"),
            })
        })
        .collect()
}

/// Bus susceptance matrix of the lossless DC model, `b_ij = -1/x_ij`.
pub fn build_b_matrix(grid: &GridModel) -> Result<DMatrix<f64>> {
    let n = grid.n_buses();
    let mut b = DMatrix::zeros(n, n);
    for br in &grid.branches {
        if !(br.x > 0.0) {
            return Err(Error::NonPositiveReactance { branch: br.id, x: br.x });
        }
        let (i, j) = (br.from - 1, br.to - 1);
        let y = 1.0 / br.x;
        b[(i, i)] += y;
        b[(j, j)] += y;
        b[(i, j)] -= y;
        b[(j, i)] -= y;
    }
    Ok(b)
}

/// Factorized reduced susceptance matrix, reusable across many injections.
#[derive(Debug, Clone)]
pub struct DcSolver {
    slack: usize,
    keep: Vec<usize>,
    reduced: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DcSolver {
    pub fn new(grid: &GridModel) -> Result<Self> {
        let n = grid.n_buses();
        if grid.slack_bus == 0 || grid.slack_bus > n {
            return Err(Error::InvalidGrid(format!("slack bus {} is not a valid bus", grid.slack_bus)));
        }
        let b = build_b_matrix(grid)?;
        let s = grid.slack_bus - 1;
        let keep: Vec<usize> = (0..n).filter(|&k| k != s).collect();
        let reduced = b.select_rows(&keep).select_columns(&keep);
        let lu = reduced.clone().lu();
        let scale = reduced.amax().max(1.0);
        let u = lu.u();
        let min_pivot = (0..u.nrows())
            .map(|k| u[(k, k)].abs())
            .fold(f64::INFINITY, f64::min);
        if !(min_pivot > 1e-12 * scale) {
            return Err(Error::Singular(
                "reduced susceptance matrix is singular (is the network connected?)".into(),
            ));
        }
        Ok(DcSolver { slack: s, keep, reduced, lu })
    }

    /// Solves `B' θ' = p'` with the slack row and column removed; `θ_slack = 0`.
    pub fn solve(&self, inj: &InjectionVector) -> Result<Vec<f64>> {
        let n = self.keep.len() + 1;
        if inj.len() != n {
            return Err(Error::LengthMismatch { left: inj.len(), right: n });
        }
        let rhs = DVector::from_iterator(self.keep.len(), self.keep.iter().map(|&k| inj.0[k]));
        let sol = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("reduced susceptance matrix is singular".into()))?;
        let resid = (&self.reduced * &sol - &rhs).amax();
        if !(resid < 1e-10) {
            return Err(Error::Singular(format!("DC solve residual {resid:e} exceeds tolerance")));
        }
        let mut theta = vec![0.0; n];
        for (pos, &k) in self.keep.iter().enumerate() {
            theta[k] = sol[pos];
        }
        debug_assert_eq!(theta[self.slack], 0.0);
        Ok(theta)
    }
}

/// One-shot DC power flow; see [`DcSolver`] for repeated solves.
pub fn solve_dc_power_flow(grid: &GridModel, inj: &InjectionVector) -> Result<AngleState> {
    let theta = DcSolver::new(grid)?.solve(inj)?;
    Ok(AngleState { theta, timestamp: 0.0 })
}

/// DC flow from `from` to `to`, `(θ_from − θ_to) / x`, in p.u.
pub fn branch_flow(grid: &GridModel, state: &AngleState, from: usize, to: usize) -> Result<f64> {
    let (k, _) = grid.find_branch(from, to)?;
    let x = grid.branches[k].x;
    Ok((state.theta[from - 1] - state.theta[to - 1]) / x)
}

/// Flow on branch `k` in its stored orientation.
pub fn branch_flow_by_index(grid: &GridModel, theta: &[f64], k: usize) -> f64 {
    let br = &grid.branches[k];
    (theta[br.from - 1] - theta[br.to - 1]) / br.x
}

/// Real power flow from bus i to bus j in the full AC branch model.
///
/// Only used to check the small-angle DC approximation.
pub fn ac_branch_flow(
    v_i: f64,
    v_j: f64,
    theta_i: f64,
    theta_j: f64,
    g_si: f64,
    g_ij: f64,
    b_ij: f64,
) -> f64 {
    let d = theta_i - theta_j;
    v_i * v_i * (g_si + g_ij) - v_i * v_j * (g_ij * d.cos() + b_ij * d.sin())
}

/// Branch-flow Jacobian with respect to bus angles (one row per branch).
pub fn build_measurement_jacobian(grid: &GridModel) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(grid.n_branches(), grid.n_buses());
    for (row, br) in grid.branches.iter().enumerate() {
        h[(row, br.from - 1)] = 1.0 / br.x;
        h[(row, br.to - 1)] = -1.0 / br.x;
    }
    h
}

/// Gaussian measurement noise shared by the angle and flow channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// Standard deviation in radians (angle channels) and p.u. (flow channels).
    pub sigma: f64,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel { sigma: 0.0 };

    /// Interprets `var_deg2` as an angle variance in degrees squared.
    pub fn from_variance_deg2(var_deg2: f64) -> Self {
        NoiseModel {
            sigma: var_deg2.max(0.0).sqrt() * PI / 180.0,
        }
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }
}

/// `z = Hθ + e`, `θ_meas = θ + e'`, with both noise draws from `rng`.
pub fn synthesize_with_rng<R: rand::Rng + ?Sized>(
    h: &DMatrix<f64>,
    state: &AngleState,
    noise: NoiseModel,
    rng: &mut R,
) -> Result<MeasurementFrame> {
    if !(noise.sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be non-negative, got {}",
            noise.sigma
        )));
    }
    let theta = DVector::from_column_slice(&state.theta);
    let mut z: Vec<f64> = (h * &theta).iter().copied().collect();
    let mut theta_meas = state.theta.clone();
    let provenance = if noise.sigma > 0.0 {
        let dist = Normal::new(0.0, noise.sigma).expect("finite sigma");
        for v in z.iter_mut() {
            *v += dist.sample(rng);
        }
        for v in theta_meas.iter_mut() {
            *v += dist.sample(rng);
        }
        Provenance::Noisy
    } else {
        Provenance::True
    };
    Ok(MeasurementFrame {
        timestamp: state.timestamp,
        z,
        theta_meas,
        provenance,
    })
}

/// Seeded convenience wrapper around [`synthesize_with_rng`].
pub fn synthesize_measurements(
    grid: &GridModel,
    state: &AngleState,
    noise_seed: u64,
    noise: NoiseModel,
) -> Result<MeasurementFrame> {
    let h = build_measurement_jacobian(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut frame = synthesize_with_rng(&h, state, noise, &mut rng)?;
    // noise-free frames from this entry point are still "noisy" channel output
    frame.provenance = Provenance::Noisy;
    Ok(frame)
}

/// Smooth system-wide load fluctuation: every load is scaled by
/// `1 + amplitude * s(t)` where `s` is the mean of a few slow sinusoids.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbientLoad {
    pub amplitude: f64,
    pub components: Vec<(f64, f64)>,
}

impl AmbientLoad {
    pub fn seeded(amplitude: f64, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a3b1_e47d_0001);
        let components = [0.07, 0.13, 0.31]
            .into_iter()
            .map(|f| (f, rng.random_range(0.0..2.0 * PI)))
            .collect();
        AmbientLoad { amplitude, components }
    }

    pub fn factor(&self, t: f64) -> f64 {
        if self.components.is_empty() {
            return 1.0;
        }
        let s: f64 = self
            .components
            .iter()
            .map(|&(f, phase)| (2.0 * PI * f * t + phase).sin())
            .sum::<f64>()
            / self.components.len() as f64;
        1.0 + self.amplitude * s
    }
}

/// Base dispatch plus right-continuous load steps at one bus.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    pub load_mw: Vec<f64>,
    pub gen_mw: Vec<f64>,
    pub step_bus: usize,
    pub step_times: Vec<f64>,
    /// Each step adds this fraction of the step bus's base load.
    pub step_fraction: f64,
    pub ambient: Option<AmbientLoad>,
}

impl LoadProfile {
    pub fn from_grid(grid: &GridModel, step_bus: usize, step_times: Vec<f64>, step_fraction: f64) -> Self {
        LoadProfile {
            load_mw: grid.buses.iter().map(|b| b.load_mw).collect(),
            gen_mw: grid.buses.iter().map(|b| b.gen_mw).collect(),
            step_bus,
            step_times,
            step_fraction,
            ambient: None,
        }
    }

    pub fn steps_active(&self, t: f64) -> usize {
        self.step_times.iter().filter(|&&ts| t >= ts).count()
    }

    /// Load in MW at `bus` and time `t`.
    pub fn load_at(&self, bus: usize, t: f64) -> f64 {
        let mut load = self.load_mw[bus - 1];
        if bus == self.step_bus {
            load *= 1.0 + self.step_fraction * self.steps_active(t) as f64;
        }
        if let Some(amb) = &self.ambient {
            load *= amb.factor(t);
        }
        load
    }
}

/// Net injections at time `t`, balanced onto the slack bus.
pub fn scenario_injections(grid: &GridModel, profile: &LoadProfile, t: f64) -> Result<InjectionVector> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time must be non-negative, got {t}")));
    }
    let n = grid.n_buses();
    if profile.load_mw.len() != n || profile.gen_mw.len() != n {
        return Err(Error::LengthMismatch {
            left: profile.load_mw.len(),
            right: n,
        });
    }
    let p = (1..=n)
        .map(|bus| (profile.gen_mw[bus - 1] - profile.load_at(bus, t)) / grid.base_mva)
        .collect();
    let mut inj = InjectionVector(p);
    inj.balance(grid.slack_bus);
    Ok(inj)
}
