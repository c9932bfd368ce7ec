//! Hankel-matrix low-rank modelling of a single phasor channel.
//!
//! Used by the attacker to look ahead over its computation delay and by the
//! defender to watch for spikes in the low-rank approximation error.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A length-τ buffer of one channel plus the row count κ of its Hankel form.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelWindow {
    pub samples: Vec<f64>,
    pub kappa: usize,
}

impl HankelWindow {
    pub fn new(samples: Vec<f64>, kappa: usize) -> Result<Self> {
        let w = HankelWindow { samples, kappa };
        w.check()?;
        Ok(w)
    }

    /// Window using the conventional `κ = ⌊τ/2⌋`.
    pub fn half(samples: Vec<f64>) -> Result<Self> {
        let kappa = samples.len() / 2;
        Self::new(samples, kappa)
    }

    pub fn tau(&self) -> usize {
        self.samples.len()
    }

    fn check(&self) -> Result<()> {
        let tau = self.samples.len();
        if self.kappa < 2 || self.kappa + 1 > tau {
            return Err(Error::InvalidArgument(format!(
                "kappa must satisfy 2 <= kappa <= tau-1, got kappa={} tau={tau}",
                self.kappa
            )));
        }
        Ok(())
    }
}

/// Element `(p, q)` is `samples[p + q]`; shape `κ × (τ − κ + 1)`.
pub fn build_hankel(window: &HankelWindow) -> Result<DMatrix<f64>> {
    window.check()?;
    let cols = window.tau() - window.kappa + 1;
    Ok(DMatrix::from_fn(window.kappa, cols, |p, q| window.samples[p + q]))
}

/// How many singular directions to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankRule {
    Fixed(usize),
    /// Smallest rank whose cumulative `σ²` share reaches the fraction.
    Energy(f64),
}

impl RankRule {
    /// `singular` must be sorted descending.
    pub fn resolve(self, singular: &[f64]) -> usize {
        let max = singular.len().max(1);
        match self {
            RankRule::Fixed(r) => r.clamp(1, max),
            RankRule::Energy(frac) => {
                let total: f64 = singular.iter().map(|s| s * s).sum();
                if total <= 0.0 {
                    return 1;
                }
                let mut acc = 0.0;
                for (k, s) in singular.iter().enumerate() {
                    acc += s * s;
                    if acc >= frac * total {
                        return k + 1;
                    }
                }
                max
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvdTruncation {
    pub u: DMatrix<f64>,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub v_t: DMatrix<f64>,
    pub rank: usize,
    pub approx: DMatrix<f64>,
    pub rel_error: f64,
    /// Set when the input is identically zero.
    pub degenerate: bool,
}

/// Thin SVD whose factors are verified to recompose the input.
///
/// nalgebra's bidiagonal iteration occasionally returns inconsistent factors
/// for exactly low-rank inputs (e.g. a constant window) at the default
/// tolerance; a slightly looser tolerance converges correctly, and as a last
/// resort the factors come from the eigen-decomposition of the Gram matrix.
pub(crate) fn checked_svd(h: &DMatrix<f64>) -> nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn> {
    let scale = h.norm().max(f64::MIN_POSITIVE);
    for eps in [f64::EPSILON, 1e-13, 1e-12, 1e-10] {
        if let Some(svd) = h.clone().try_svd(true, true, eps, 0) {
            if let Ok(back) = svd.clone().recompose() {
                if (back - h).norm() <= 1e-10 * scale {
                    return svd;
                }
            }
        }
    }
    gram_svd(h)
}

fn gram_svd(h: &DMatrix<f64>) -> nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn> {
    let k = h.nrows().min(h.ncols());
    let tall = h.nrows() >= h.ncols();
    let gram = if tall { h.transpose() * h } else { h * h.transpose() };
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vecs = eig.eigenvectors.select_columns(&order[..k]);
    let sing = DVector::from_iterator(k, order[..k].iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()));
    // Other side: h·v/σ (or hᵀ·u/σ); zero singular values get a zero column.
    let other = if tall { h * &vecs } else { h.transpose() * &vecs };
    let other = DMatrix::from_fn(other.nrows(), k, |i, j| {
        if sing[j] > 0.0 { other[(i, j)] / sing[j] } else { 0.0 }
    });
    let (u, v_t) = if tall { (other, vecs.transpose()) } else { (vecs, other.transpose()) };
    nalgebra::SVD {
        u: Some(u),
        v_t: Some(v_t),
        singular_values: sing,
    }
}

/// Singular values of `h`, descending.
///
/// The cheap values-only decomposition is accepted when it satisfies
/// `Σσ² = ‖H‖²_F`; otherwise the verified full decomposition is used.
pub(crate) fn singular_values_desc(h: &DMatrix<f64>) -> Vec<f64> {
    let fro2 = h.norm_squared();
    let quick = h.clone().try_svd(false, false, 1e-13, 0).map(|svd| svd.singular_values);
    let values = match quick {
        Some(sv) if (sv.norm_squared() - fro2).abs() <= 1e-10 * fro2.max(f64::MIN_POSITIVE) => sv,
        _ => checked_svd(h).singular_values,
    };
    let mut s: Vec<f64> = values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Thin SVD with singular triplets reordered descending.
fn sorted_svd(h: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = checked_svd(h);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = order.iter().map(|&k| svd.singular_values[k]).collect();
    let u = u.select_columns(&order);
    let v_t = v_t.select_rows(&order);
    (u, s, v_t)
}

/// Best rank-`r` approximation and its relative Frobenius error.
pub fn low_rank_approx(h: &DMatrix<f64>, r: usize) -> Result<SvdTruncation> {
    let full = h.nrows().min(h.ncols());
    if r < 1 || r > full {
        return Err(Error::InvalidArgument(format!(
            "rank must be in 1..={full}, got {r}"
        )));
    }
    let norm = h.norm();
    let (u, s, v_t) = sorted_svd(h);
    if norm == 0.0 {
        return Ok(SvdTruncation {
            approx: DMatrix::zeros(h.nrows(), h.ncols()),
            u,
            singular_values: s,
            v_t,
            rank: r,
            rel_error: 0.0,
            degenerate: true,
        });
    }
    let mut approx = DMatrix::zeros(h.nrows(), h.ncols());
    for (k, sk) in s.iter().take(r).enumerate() {
        approx += *sk * u.column(k) * v_t.row(k);
    }
    let rel_error = (&approx - h).norm() / norm;
    Ok(SvdTruncation {
        u,
        singular_values: s,
        v_t,
        rank: r,
        approx,
        rel_error,
        degenerate: false,
    })
}

/// Relative rank-`r` error from the singular values alone (Eckart–Young).
///
/// Equal to `low_rank_approx(h, r).rel_error` but skips the factor matrices.
pub fn low_rank_error(h: &DMatrix<f64>, r: usize) -> Result<f64> {
    let full = h.nrows().min(h.ncols());
    if r < 1 || r > full {
        return Err(Error::InvalidArgument(format!(
            "rank must be in 1..={full}, got {r}"
        )));
    }
    let s = singular_values_desc(h);
    let total: f64 = s.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let tail: f64 = s[r..].iter().map(|v| v * v).sum();
    Ok((tail / total).sqrt())
}

/// One-step subspace prediction of the sample following the window.
///
/// The leading `r` left singular vectors span the column space; the next
/// Hankel column shares its first `κ−1` entries with the last `κ−1` samples,
/// so fitting those coefficients and reading off the last row extrapolates.
pub fn predict_next(window: &HankelWindow, rank: RankRule) -> Result<f64> {
    let h = build_hankel(window)?;
    if h.norm() == 0.0 {
        return Ok(0.0);
    }
    let (u, s, _) = sorted_svd(&h);
    let r = rank.resolve(&s);
    let kappa = window.kappa;
    if r > kappa - 1 {
        return Err(Error::RankDeficient(format!(
            "rank {r} exceeds the {} rows available for the projection",
            kappa - 1
        )));
    }
    let u_r = u.columns(0, r);
    let u_up = u_r.rows(0, kappa - 1).into_owned();
    let u_last = u_r.row(kappa - 1);
    let tail = DVector::from_column_slice(&window.samples[window.tau() - (kappa - 1)..]);

    let svd = checked_svd(&u_up);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-12 * smax.max(1e-300)) {
        return Err(Error::RankDeficient(format!(
            "projection basis is rank deficient (σ_min = {smin:e})"
        )));
    }
    let d = svd
        .solve(&tail, 0.0)
        .map_err(|e| Error::RankDeficient(e.to_string()))?;
    Ok((u_last * d)[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    pub predicted: Vec<f64>,
    /// Relative low-rank error of the window each prediction was made from.
    pub confidence: Vec<f64>,
}

impl ForecastResult {
    pub fn horizon(&self) -> usize {
        self.predicted.len()
    }
}

/// Recursive forecast: each prediction is appended as if measured and the
/// window slides forward one sample.
pub fn predict_horizon(window: &HankelWindow, steps: usize, rank: RankRule) -> Result<ForecastResult> {
    if steps < 1 {
        return Err(Error::InvalidArgument("forecast horizon must be at least 1".into()));
    }
    window.check()?;
    let tau = window.tau();
    let mut buf = window.samples.clone();
    let mut predicted = Vec::with_capacity(steps);
    let mut confidence = Vec::with_capacity(steps);
    for _ in 0..steps {
        let w = HankelWindow {
            samples: buf[buf.len() - tau..].to_vec(),
            kappa: window.kappa,
        };
        let h = build_hankel(&w)?;
        let s = singular_values_desc(&h);
        let r = rank.resolve(&s);
        confidence.push(low_rank_error(&h, r.min(s.len()))?);
        let next = predict_next(&w, rank)?;
        if !next.is_finite() {
            return Err(Error::Solver("forecast diverged to a non-finite value".into()));
        }
        predicted.push(next);
        buf.push(next);
    }
    Ok(ForecastResult { predicted, confidence })
}

/// Adaptive tolerance for forecast error.
///
/// `max(2, 30·e^{−3(t_i − t_d)})` times the mean absolute successive
/// difference of the last `trusted_len` samples. `t_d` is the time of the
/// last detected bad data; pass `f64::NEG_INFINITY` if there was none.
pub fn estimation_threshold(trusted: &[f64], t_i: f64, t_d: f64, trusted_len: usize) -> Result<f64> {
    if trusted_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "trusted length must be at least 2, got {trusted_len}"
        )));
    }
    if trusted.len() < trusted_len {
        return Err(Error::LengthMismatch {
            left: trusted.len(),
            right: trusted_len,
        });
    }
    let w = &trusted[trusted.len() - trusted_len..];
    let mean_step = w.windows(2).map(|p| (p[1] - p[0]).abs()).sum::<f64>() / (trusted_len - 1) as f64;
    let gain = (30.0 * (-3.0 * (t_i - t_d)).exp()).max(2.0);
    Ok(gain * mean_step)
}

/// Removes ±2π jumps so successive differences lie in (−π, π].
pub fn unwrap_phase(series: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut offset = 0.0;
    for (k, &v) in series.iter().enumerate() {
        if k > 0 {
            let prev_raw = series[k - 1];
            let mut d = v - prev_raw;
            let mut corr = 0.0;
            while d > PI {
                d -= 2.0 * PI;
                corr -= 2.0 * PI;
            }
            while d <= -PI {
                d += 2.0 * PI;
                corr += 2.0 * PI;
            }
            offset += corr;
        }
        out.push(v + offset);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sinusoid(n: usize) -> Vec<f64> {
        (0..n).map(|k| (0.2 * k as f64 + 0.3).sin()).collect()
    }

    #[test]
    fn hankel_four_samples() {
        let h = build_hankel(&HankelWindow::new(vec![1.0, 2.0, 3.0, 4.0], 2).unwrap()).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn hankel_shapes_and_bad_kappa() {
        let h = build_hankel(&HankelWindow::new(vec![0.5; 10], 9).unwrap()).unwrap();
        assert_eq!(h.shape(), (9, 2));
        assert!(h.iter().all(|&v| v == 0.5));
        assert!(HankelWindow::new(vec![1.0; 5], 1).is_err());
        assert!(HankelWindow::new(vec![1.0; 5], 5).is_err());
    }

    #[test]
    fn constant_series_is_rank_one() {
        let h = build_hankel(&HankelWindow::half(vec![2.5; 20]).unwrap()).unwrap();
        let t = low_rank_approx(&h, 1).unwrap();
        assert!(t.rel_error < 1e-12, "{} {:?}", t.rel_error, &t.singular_values[..3]);
        assert!(!t.degenerate);
    }

    #[test]
    fn full_rank_has_no_error() {
        let h = DMatrix::from_fn(5, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.3);
        assert!(low_rank_approx(&h, 4).unwrap().rel_error < 1e-12);
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let t = low_rank_approx(&DMatrix::zeros(3, 3), 1).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.rel_error, 0.0);
        assert_eq!(predict_next(&HankelWindow::half(vec![0.0; 10]).unwrap(), RankRule::Fixed(1)).unwrap(), 0.0);
    }

    #[test]
    fn fast_error_matches_reconstruction() {
        let h = DMatrix::from_fn(6, 7, |i, j| ((i + 2 * j) as f64).sin() + 0.1 * (i * j) as f64);
        for r in 1..=6 {
            let a = low_rank_approx(&h, r).unwrap().rel_error;
            let b = low_rank_error(&h, r).unwrap();
            assert!((a - b).abs() < 1e-10, "r={r}: {a} vs {b}");
        }
    }

    #[test]
    fn predicts_constant() {
        let w = HankelWindow::half(vec![0.7; 30]).unwrap();
        assert!((predict_next(&w, RankRule::Fixed(1)).unwrap() - 0.7).abs() < 1e-9);
        let f = predict_horizon(&w, 25, RankRule::Fixed(1)).unwrap();
        assert!(f.predicted.iter().all(|p| (p - 0.7).abs() < 1e-9));
    }

    #[test]
    fn predicts_sinusoid() {
        let s = sinusoid(41);
        let w = HankelWindow::new(s[..40].to_vec(), 20).unwrap();
        let p = predict_next(&w, RankRule::Fixed(2)).unwrap();
        assert!((p - s[40]).abs() < 1e-6, "{p} vs {}", s[40]);
    }

    #[test]
    fn predicts_ramp() {
        let s: Vec<f64> = (0..31).map(|k| 0.01 * k as f64 - 0.1).collect();
        let w = HankelWindow::half(s[..30].to_vec()).unwrap();
        let p = predict_next(&w, RankRule::Fixed(2)).unwrap();
        assert!((p - s[30]).abs() < 1e-6);
    }

    #[test]
    fn sinusoid_horizon_nine() {
        let s = sinusoid(49);
        let w = HankelWindow::new(s[..40].to_vec(), 20).unwrap();
        let f = predict_horizon(&w, 9, RankRule::Fixed(2)).unwrap();
        let one = predict_next(&w, RankRule::Fixed(2)).unwrap();
        assert_eq!(f.predicted[0], one);
        for (k, p) in f.predicted.iter().enumerate() {
            assert!((p - s[40 + k]).abs() < 1e-4);
        }
    }

    #[test]
    fn threshold_hand_values() {
        let ramp: Vec<f64> = (0..10).map(|k| 0.01 * k as f64).collect();
        let far = estimation_threshold(&ramp, 100.0, 0.0, 10).unwrap();
        assert!((far - 0.02).abs() < 1e-12);
        let now = estimation_threshold(&ramp, 5.0, 5.0, 10).unwrap();
        assert!((now - 0.30).abs() < 1e-12);
        assert_eq!(estimation_threshold(&[1.0; 10], 3.0, f64::NEG_INFINITY, 10).unwrap(), 0.0);
        assert!(estimation_threshold(&ramp, 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn unwrap_cases() {
        let smooth = vec![0.1, 0.2, 0.25, -0.3];
        assert_eq!(unwrap_phase(&smooth), smooth);
        let u = unwrap_phase(&[3.1, -3.1]);
        assert_eq!(u[0], 3.1);
        assert!((u[1] - (-3.1 + 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn energy_rule() {
        assert_eq!(RankRule::Energy(0.99).resolve(&[10.0, 0.5, 0.1]), 1);
        assert_eq!(RankRule::Energy(0.999).resolve(&[10.0, 0.5, 0.1]), 2);
        assert_eq!(RankRule::Fixed(9).resolve(&[1.0, 0.5]), 2);
    }
}
