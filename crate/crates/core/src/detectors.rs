//! Defender-side bad-data detection.
//!
//! Four detectors share the stream: the WLS largest-normalized-residual test,
//! a deviation-based Kalman filter (DKF), a Hankel low-rank-error monitor and
//! the cross-node gradient-sign comparison of two low-rank-error series.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{build_measurement_jacobian, GridModel, PhasorStream};
use crate::hankel::{build_hankel, low_rank_error, unwrap_phase, HankelWindow};

/// State-estimation Jacobian: branch-flow rows stacked on direct angle rows.
///
/// The angle rows make the matrix full column rank without discarding the
/// slack column.
pub fn state_estimation_jacobian(grid: &GridModel) -> DMatrix<f64> {
    let hf = build_measurement_jacobian(grid);
    let n = grid.n_buses();
    let m = hf.nrows();
    let mut h = DMatrix::zeros(m + n, n);
    h.view_mut((0, 0), (m, n)).copy_from(&hf);
    h.view_mut((m, 0), (n, n)).fill_with_identity();
    h
}

/// Measurement vectors `[flows; unwrapped angles]`, one per frame.
pub fn stacked_measurements(stream: &PhasorStream) -> Vec<DVector<f64>> {
    if stream.is_empty() {
        return Vec::new();
    }
    let n = stream.frames[0].theta_meas.len();
    let unwrapped: Vec<Vec<f64>> = (1..=n).map(|b| unwrap_phase(&stream.angle_channel(b))).collect();
    stream
        .frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let m = f.z.len();
            DVector::from_fn(m + n, |i, _| if i < m { f.z[i] } else { unwrapped[i - m][k] })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WlsResult {
    pub x_hat: DVector<f64>,
    pub residual: DVector<f64>,
    /// `r_i / sqrt(Ω_ii)`; zero for critical measurements (`Ω_ii ≈ 0`).
    pub normalized: DVector<f64>,
    /// `rᵀ R⁻¹ r`.
    pub objective: f64,
}

impl WlsResult {
    pub fn max_normalized(&self) -> f64 {
        self.normalized.amax()
    }
}

/// WLS estimator with the gain and residual covariance factored once.
#[derive(Debug, Clone)]
pub struct WlsEstimator {
    h: DMatrix<f64>,
    weight: DMatrix<f64>,
    /// `(HᵀWH)⁻¹HᵀW`.
    projector: DMatrix<f64>,
    omega_diag: DVector<f64>,
    /// `R^{-1/2}` from the Cholesky factor of `R`.
    whitener: DMatrix<f64>,
}

impl WlsEstimator {
    pub fn new(h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Self> {
        let (m, n) = h.shape();
        if r.shape() != (m, m) {
            return Err(Error::LengthMismatch { left: r.nrows(), right: m });
        }
        if m < n {
            return Err(Error::RankDeficient(format!("{m} measurements for {n} states")));
        }
        let chol_r = r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("measurement covariance is not positive definite".into()))?;
        let weight = chol_r.inverse();
        let l_inv = chol_r
            .l()
            .try_inverse()
            .ok_or_else(|| Error::Singular("Cholesky factor of R".into()))?;

        let gain = h.transpose() * &weight * h;
        let eig = gain.clone().symmetric_eigen().eigenvalues;
        let (smax, smin) = (eig.max(), eig.min());
        if !(smin > 1e-12 * smax) {
            return Err(Error::RankDeficient(format!(
                "gain matrix condition exceeds 1e12 (σ_min={smin:e}, σ_max={smax:e})"
            )));
        }
        let gain_inv = gain
            .cholesky()
            .ok_or_else(|| Error::RankDeficient("gain matrix is not positive definite".into()))?
            .inverse();
        let projector = &gain_inv * h.transpose() * &weight;
        let cov_est = h * &gain_inv * h.transpose();
        let omega_diag = DVector::from_fn(m, |i, _| r[(i, i)] - cov_est[(i, i)]);
        Ok(WlsEstimator {
            h: h.clone(),
            weight,
            projector,
            omega_diag,
            whitener: l_inv,
        })
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn whitener(&self) -> &DMatrix<f64> {
        &self.whitener
    }

    pub fn estimate(&self, z: &DVector<f64>) -> Result<WlsResult> {
        if z.len() != self.h.nrows() {
            return Err(Error::LengthMismatch { left: z.len(), right: self.h.nrows() });
        }
        let x_hat = &self.projector * z;
        let residual = z - &self.h * &x_hat;
        let normalized = normalize(&residual, &self.omega_diag, |i| 1.0 / self.weight[(i, i)]);
        let objective = residual.dot(&(&self.weight * &residual));
        Ok(WlsResult { x_hat, residual, normalized, objective })
    }

    /// `‖R^{-1/2}(z − Hx̂)‖₂`.
    pub fn whitened_residual_norm(&self, z: &DVector<f64>) -> Result<f64> {
        let res = self.estimate(z)?;
        Ok((&self.whitener * res.residual).norm())
    }
}

fn normalize(residual: &DVector<f64>, omega: &DVector<f64>, r_ii: impl Fn(usize) -> f64) -> DVector<f64> {
    DVector::from_fn(residual.len(), |i, _| {
        // Critical measurements have Ω_ii ≈ 0 and a structurally zero residual.
        if omega[i] > 1e-12 * r_ii(i).abs() {
            residual[i] / omega[i].sqrt()
        } else {
            0.0
        }
    })
}

/// `x̂ = (HᵀR⁻¹H)⁻¹HᵀR⁻¹z` with normalized residuals from `Ω = R − H(HᵀR⁻¹H)⁻¹Hᵀ`.
pub fn wls_estimate(h: &DMatrix<f64>, r: &DMatrix<f64>, z: &DVector<f64>) -> Result<WlsResult> {
    WlsEstimator::new(h, r)?.estimate(z)
}

/// Largest-normalized-residual test.
pub fn lnr_test(wls: &WlsResult, beta: f64) -> bool {
    wls.max_normalized() > beta
}

#[derive(Debug, Clone)]
pub struct KalmanState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    /// Most recent gain.
    pub gain: DMatrix<f64>,
    /// Diagonal of the weighting matrix `W = R⁻¹`.
    pub weights: DVector<f64>,
    /// Weights at start-up; the DKF floor is taken relative to these.
    pub initial_weights: DVector<f64>,
    pub q: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl KalmanState {
    /// Quasi-static model (`A = I`) with isotropic process noise.
    pub fn new(h: DMatrix<f64>, r_diag: &[f64], q_scale: f64, x0: DVector<f64>, p0: DMatrix<f64>) -> Result<Self> {
        let (m, n) = h.shape();
        if r_diag.len() != m {
            return Err(Error::LengthMismatch { left: r_diag.len(), right: m });
        }
        if x0.len() != n || p0.shape() != (n, n) {
            return Err(Error::LengthMismatch { left: x0.len(), right: n });
        }
        if r_diag.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument("measurement variances must be positive".into()));
        }
        let weights = DVector::from_iterator(m, r_diag.iter().map(|v| 1.0 / v));
        Ok(KalmanState {
            x_hat: x0,
            p: p0,
            gain: DMatrix::zeros(n, m),
            initial_weights: weights.clone(),
            weights,
            q: DMatrix::identity(n, n) * q_scale,
            a: DMatrix::identity(n, n),
            h,
        })
    }

    pub fn r_diag(&self) -> DVector<f64> {
        self.weights.map(|w| 1.0 / w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanOutput {
    pub innovation: DVector<f64>,
    /// Posterior residual `z − Hx̂(t)`.
    pub residual: DVector<f64>,
    /// Posterior residual normalized by `sqrt(diag(R − HPHᵀ))`.
    pub normalized: DVector<f64>,
}

impl KalmanOutput {
    pub fn max_normalized(&self) -> f64 {
        self.normalized.amax()
    }
}

/// DKF reweighting: `W⁻¹ ← W⁻¹ · e^{|ν|}` elementwise, i.e. `W ← W · e^{−|ν|}`.
pub fn dkf_update_weights(weights: &[f64], innovation: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != innovation.len() {
        return Err(Error::LengthMismatch { left: weights.len(), right: innovation.len() });
    }
    Ok(weights
        .iter()
        .zip(innovation)
        .map(|(w, nu)| w * (-nu.abs()).exp())
        .collect())
}

/// Plain Kalman time and measurement update with the current weights.
pub fn kf_step(state: &mut KalmanState, z: &DVector<f64>) -> Result<KalmanOutput> {
    step(state, z, None)
}

/// DKF step: weights shrink with the innovation before the gain is formed.
/// `cap` bounds the growth of any variance to `cap ×` its initial value.
pub fn dkf_step(state: &mut KalmanState, z: &DVector<f64>, cap: f64) -> Result<KalmanOutput> {
    step(state, z, Some(cap))
}

fn step(state: &mut KalmanState, z: &DVector<f64>, dkf_cap: Option<f64>) -> Result<KalmanOutput> {
    let h = &state.h;
    if z.len() != h.nrows() {
        return Err(Error::LengthMismatch { left: z.len(), right: h.nrows() });
    }
    let x_prior = &state.a * &state.x_hat;
    let p_prior = &state.a * &state.p * state.a.transpose() + &state.q;
    let innovation = z - h * &x_prior;

    if let Some(cap) = dkf_cap {
        let updated = dkf_update_weights(state.weights.as_slice(), innovation.as_slice())?;
        for (k, w) in updated.into_iter().enumerate() {
            state.weights[k] = w.max(state.initial_weights[k] / cap);
        }
    }
    let r = DMatrix::from_diagonal(&state.r_diag());
    let s = h * &p_prior * h.transpose() + &r;
    let s_inv = s
        .cholesky()
        .ok_or_else(|| Error::Singular("innovation covariance is not positive definite".into()))?
        .inverse();
    let gain = &p_prior * h.transpose() * s_inv;
    let x_hat = &x_prior + &gain * &innovation;
    let n = x_hat.len();
    // Joseph form: equal to (I−KH)P for the optimal gain, but stays PSD in
    // floating point when R is tiny.
    let ikh = DMatrix::identity(n, n) - &gain * h;
    let p = &ikh * &p_prior * ikh.transpose() + &gain * &r * gain.transpose();
    let p = (&p + p.transpose()) * 0.5;

    let residual = z - h * &x_hat;
    let hph = h * &p * h.transpose();
    let omega = DVector::from_fn(z.len(), |i, _| r[(i, i)] - hph[(i, i)]);
    let normalized = normalize(&residual, &omega, |i| r[(i, i)]);

    state.x_hat = x_hat;
    state.p = p;
    state.gain = gain;
    Ok(KalmanOutput { innovation, residual, normalized })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DkfConfig {
    pub q_scale: f64,
    pub variance_cap: f64,
    pub beta: f64,
}

impl Default for DkfConfig {
    fn default() -> Self {
        DkfConfig { q_scale: 1e-4, variance_cap: 1e6, beta: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSeries {
    /// Largest normalized residual per frame; `None` where undefined.
    pub max_normalized: Vec<Option<f64>>,
    pub flags: Vec<bool>,
}

impl ResidualSeries {
    pub fn peak(&self) -> f64 {
        self.max_normalized.iter().flatten().fold(0.0, |a, &b| a.max(b))
    }
}

/// WLS LNR test applied frame by frame.
pub fn wls_residual_series(measurements: &[DVector<f64>], est: &WlsEstimator, beta: f64) -> Result<ResidualSeries> {
    let mut max_normalized = Vec::with_capacity(measurements.len());
    let mut flags = Vec::with_capacity(measurements.len());
    for z in measurements {
        let res = est.estimate(z)?;
        max_normalized.push(Some(res.max_normalized()));
        flags.push(lnr_test(&res, beta));
    }
    Ok(ResidualSeries { max_normalized, flags })
}

/// Runs the DKF over the stream. The filter is initialized from the WLS
/// estimate of the first frame, so that frame carries no residual.
pub fn dkf_residual_series(
    measurements: &[DVector<f64>],
    h: &DMatrix<f64>,
    r_diag: &[f64],
    cfg: DkfConfig,
) -> Result<ResidualSeries> {
    if measurements.len() < 2 {
        return Err(Error::InvalidArgument("DKF needs at least two frames".into()));
    }
    let r = DMatrix::from_diagonal(&DVector::from_column_slice(r_diag));
    let x0 = wls_estimate(h, &r, &measurements[0])?.x_hat;
    let n = h.ncols();
    let p0_scale = r_diag.iter().sum::<f64>() / r_diag.len() as f64;
    let mut state = KalmanState::new(h.clone(), r_diag, cfg.q_scale, x0, DMatrix::identity(n, n) * p0_scale)?;

    let mut max_normalized = vec![None];
    let mut flags = vec![false];
    for z in &measurements[1..] {
        let out = dkf_step(&mut state, z, cfg.variance_cap)?;
        let peak = out.max_normalized();
        max_normalized.push(Some(peak));
        flags.push(peak > cfg.beta);
    }
    Ok(ResidualSeries { max_normalized, flags })
}

/// Relative rank-`r` Hankel error over a trailing window of `w_len` samples.
///
/// Entry `k` uses samples `k+1−w_len ..= k` of the unwrapped channel; earlier
/// entries are `None`.
pub fn hankel_error_series(channel: &[f64], w_len: usize, rank: usize) -> Result<Vec<Option<f64>>> {
    if w_len < 3 {
        return Err(Error::InvalidArgument(format!("window length must be at least 3, got {w_len}")));
    }
    let kappa = w_len / 2;
    let unwrapped = unwrap_phase(channel);
    let mut out = vec![None; channel.len()];
    for end in w_len..=channel.len() {
        let w = HankelWindow::new(unwrapped[end - w_len..end].to_vec(), kappa)?;
        let h = build_hankel(&w)?;
        let r = rank.min(h.nrows().min(h.ncols()));
        out[end - 1] = Some(low_rank_error(&h, r)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSeries {
    /// `true` where the two gradients have opposite signs.
    pub flags: Vec<bool>,
    /// `true` where both gradients are defined.
    pub valid: Vec<bool>,
    pub rate: f64,
}

impl GradientSeries {
    /// Mismatch rate over valid frames whose time satisfies `keep`.
    pub fn rate_where(&self, times: &[f64], keep: impl Fn(f64) -> bool) -> f64 {
        let (mut hits, mut total) = (0usize, 0usize);
        for ((&f, &v), &t) in self.flags.iter().zip(&self.valid).zip(times) {
            if v && keep(t) {
                total += 1;
                hits += f as usize;
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

/// Compares the signs of the finite-difference gradients of two series.
/// Gradients smaller than `dead_band` in magnitude are sign-neutral.
pub fn gradient_sign_detector(err_i: &[Option<f64>], err_j: &[Option<f64>], dead_band: f64) -> Result<GradientSeries> {
    if err_i.len() != err_j.len() {
        return Err(Error::LengthMismatch { left: err_i.len(), right: err_j.len() });
    }
    let n = err_i.len();
    let mut flags = vec![false; n];
    let mut valid = vec![false; n];
    for k in 1..n {
        let (Some(a1), Some(a0), Some(b1), Some(b0)) = (err_i[k], err_i[k - 1], err_j[k], err_j[k - 1]) else {
            continue;
        };
        valid[k] = true;
        let (ga, gb) = (a1 - a0, b1 - b0);
        if ga.abs() >= dead_band && gb.abs() >= dead_band {
            flags[k] = ga.signum() != gb.signum();
        }
    }
    let total = valid.iter().filter(|&&v| v).count();
    let hits = flags.iter().filter(|&&f| f).count();
    let rate = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    Ok(GradientSeries { flags, valid, rate })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorVerdict {
    pub name: String,
    pub flags: Vec<bool>,
    pub detected: bool,
    pub first_detection: Option<f64>,
}

impl DetectorVerdict {
    pub fn from_flags(name: impl Into<String>, flags: Vec<bool>, times: &[f64]) -> Self {
        let first = flags.iter().position(|&f| f).map(|k| times[k]);
        DetectorVerdict {
            name: name.into(),
            detected: first.is_some(),
            first_detection: first,
            flags,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::load_ieee24_rts;

    fn rts_model() -> (DMatrix<f64>, DMatrix<f64>) {
        let h = state_estimation_jacobian(&load_ieee24_rts());
        let r = DMatrix::identity(h.nrows(), h.nrows()) * 1e-4;
        (h, r)
    }

    #[test]
    fn se_jacobian_full_rank() {
        let (h, _) = rts_model();
        assert_eq!(h.shape(), (62, 24));
        assert_eq!(h.rank(1e-9), 24);
    }

    #[test]
    fn wls_noiseless_recovers_state() {
        let (h, r) = rts_model();
        let x = DVector::from_fn(24, |i, _| 0.01 * i as f64 - 0.1);
        let res = wls_estimate(&h, &r, &(&h * &x)).unwrap();
        assert!((&res.x_hat - &x).amax() < 1e-10);
        assert!(res.residual.amax() < 1e-10);
        assert!(!lnr_test(&res, 3.0));
    }

    #[test]
    fn identity_weights_match_normal_equations() {
        let h = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -1.0]);
        let z = DVector::from_column_slice(&[1.0, 2.0, 2.9, -1.2]);
        let res = wls_estimate(&h, &DMatrix::identity(4, 4), &z).unwrap();
        let ols = (h.transpose() * &h).try_inverse().unwrap() * h.transpose() * &z;
        assert!((res.x_hat - ols).amax() < 1e-12);
    }

    #[test]
    fn single_bad_measurement_has_largest_normalized_residual() {
        let (h, r) = rts_model();
        let x = DVector::from_fn(24, |i, _| 0.02 * (i as f64).sin());
        let est = WlsEstimator::new(&h, &r).unwrap();
        for k in [0usize, 7, 21, 40, 61] {
            let mut z = &h * &x;
            z[k] += 0.5;
            let res = est.estimate(&z).unwrap();
            let argmax = res.normalized.iamax();
            assert_eq!(argmax, k);
        }
    }

    #[test]
    fn rank_deficient_rejected() {
        let h = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert!(matches!(
            wls_estimate(&h, &DMatrix::identity(3, 3), &DVector::zeros(3)),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn lnr_threshold_cases() {
        let mk = |v: f64| WlsResult {
            x_hat: DVector::zeros(1),
            residual: DVector::zeros(2),
            normalized: DVector::from_column_slice(&[0.1, v]),
            objective: 0.0,
        };
        assert!(!lnr_test(&mk(0.0), 3.0));
        assert!(lnr_test(&mk(3.5), 3.0));
        assert!(lnr_test(&mk(-3.5), 3.0));
    }

    #[test]
    fn dkf_weight_update_values() {
        assert_eq!(dkf_update_weights(&[2.0, 3.0], &[0.0, 0.0]).unwrap(), vec![2.0, 3.0]);
        let w = dkf_update_weights(&[1.0], &[-1.0]).unwrap();
        assert!((1.0 / w[0] - std::f64::consts::E).abs() < 1e-12);
        assert!(dkf_update_weights(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn kf_converges_and_stays_psd() {
        let (h, _) = rts_model();
        let x = DVector::from_fn(24, |i, _| 0.03 * (i as f64).cos());
        let z = &h * &x;
        let mut st = KalmanState::new(h.clone(), &vec![1e-6; 62], 0.0, DVector::zeros(24), DMatrix::identity(24, 24)).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..5 {
            kf_step(&mut st, &z).unwrap();
            let err = (&st.x_hat - &x).norm();
            assert!(err <= last + 1e-15);
            last = err;
            let ikh = DMatrix::identity(24, 24) - &st.gain * &h;
            assert!(ikh.singular_values().max() <= 1.0 + 1e-9);
            assert!((&st.p - st.p.transpose()).amax() < 1e-12);
            assert!(st.p.clone().symmetric_eigen().eigenvalues.min() >= -1e-10);
        }
        assert!(last < 1e-4);
    }

    #[test]
    fn dkf_flags_spike() {
        let (h, _) = rts_model();
        let sigma2 = 1.5e-4;
        let x = DVector::from_fn(24, |i, _| 0.01 * i as f64);
        let mut zs: Vec<DVector<f64>> = (0..40).map(|_| &h * &x).collect();
        let clean = dkf_residual_series(&zs, &h, &vec![sigma2; 62], DkfConfig::default()).unwrap();
        assert!(clean.flags.iter().all(|f| !f));
        zs[20][5] += 10.0 * sigma2.sqrt() * 10.0;
        let hit = dkf_residual_series(&zs, &h, &vec![sigma2; 62], DkfConfig::default()).unwrap();
        assert!(hit.flags[20], "peak {:?}", hit.max_normalized[20]);
    }

    #[test]
    fn hankel_series_constant_channel() {
        let e = hankel_error_series(&[0.4; 100], 80, 2).unwrap();
        assert!(e[..79].iter().all(|v| v.is_none()));
        assert!(e[79..].iter().all(|v| v.unwrap() < 1e-12));
    }

    #[test]
    fn hankel_series_spikes_at_step() {
        let ch: Vec<f64> = (0..200)
            .map(|k| 0.1 * (0.05 * k as f64).sin() + if k >= 120 { 0.05 } else { 0.0 })
            .collect();
        let e = hankel_error_series(&ch, 40, 2).unwrap();
        let before = e[100].unwrap();
        let during = e[125].unwrap();
        assert!(during > 10.0 * before, "{before} {during}");
    }

    #[test]
    fn gradient_cases() {
        let a: Vec<Option<f64>> = (0..10).map(|k| Some(k as f64 * 0.1)).collect();
        let g = gradient_sign_detector(&a, &a, 1e-9).unwrap();
        assert!(g.flags.iter().all(|f| !f));
        let b: Vec<Option<f64>> = (0..10).map(|k| Some(-(k as f64) * 0.1)).collect();
        let g = gradient_sign_detector(&a, &b, 1e-9).unwrap();
        assert!(g.flags[1..].iter().all(|&f| f));
        assert_eq!(g.rate, 1.0);
        assert!(gradient_sign_detector(&a, &b[1..], 1e-9).is_err());
    }
}
