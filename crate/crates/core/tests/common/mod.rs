//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spoofsim::attack::ProjectionMatrix;
use spoofsim::grid::{Branch, Bus, GridModel};

/// Triangle 1-2-3 with x = 0.1, 0.2, 0.25 and slack 1.
///
/// With injections p = (1.5, −1.0, −0.5) p.u. the reduced system
/// `[14 −4; −4 9]·[θ2; θ3] = [−1; −0.5]` solves by hand to θ2 = θ3 = −0.1,
/// giving flows 1→2 = 1.0, 1→3 = 0.5, 2→3 = 0.
pub fn three_bus() -> GridModel {
    let bus = |id| Bus { id, load_mw: 0.0, gen_mw: 0.0 };
    let br = |id, from, to, x| Branch { id, from, to, x, r: 0.0, mva_limit: 100.0 };
    GridModel::new(
        vec![bus(1), bus(2), bus(3)],
        vec![br(1, 1, 2, 0.1), br(2, 1, 3, 0.2), br(3, 2, 3, 0.25)],
        1,
        100.0,
        60.0,
    )
    .unwrap()
}

pub const THREE_BUS_INJ: [f64; 3] = [1.5, -1.0, -0.5];
pub const THREE_BUS_THETA: [f64; 3] = [0.0, -0.1, -0.1];
pub const THREE_BUS_FLOWS: [f64; 3] = [1.0, 0.5, 0.0];

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// `F = H(HᵀH)⁻¹Hᵀ − I` via the normal equations, independent of the SVD path.
pub fn normal_equation_f(h: &DMatrix<f64>) -> DMatrix<f64> {
    let g = (h.transpose() * h).try_inverse().expect("full column rank");
    h * g * h.transpose() - DMatrix::identity(h.nrows(), h.nrows())
}

/// Smallest `‖F·E·a‖₂` over a grid of strictly feasible points of the band
/// `ζ′ < ‖a‖₁ < ζ′ + ε` (100 radii × 100 directions for two coordinates,
/// 5000 radii per sign for one). Only points with `‖F·E·a‖₂ ≤ headroom` count.
pub fn brute_force_band_min(f: &ProjectionMatrix, embed: &DMatrix<f64>, headroom: f64, zeta: f64, eps: f64) -> Option<f64> {
    let fe = &f.f * embed;
    let obj = |a: &[f64]| (&fe * DVector::from_column_slice(a)).norm();
    let mut best: Option<f64> = None;
    let mut consider = |a: &[f64]| {
        let v = obj(a);
        if v <= headroom {
            best = Some(best.map_or(v, |b: f64| b.min(v)));
        }
    };
    if embed.ncols() == 1 {
        for i in 0..5000 {
            let r = zeta + eps * (i as f64 + 0.5) / 5000.0;
            consider(&[r]);
            consider(&[-r]);
        }
    } else {
        for i in 0..100 {
            let r = zeta + eps * (i as f64 + 0.5) / 100.0;
            for k in 0..100 {
                // walk the L1 diamond perimeter: 4 edges, 25 points each
                let u = 4.0 * k as f64 / 100.0;
                let edge = u.floor();
                let s = u - edge;
                let (x, y) = match edge as u32 {
                    0 => (1.0 - s, s),
                    1 => (-s, 1.0 - s),
                    2 => (-(1.0 - s), -s),
                    _ => (s, -(1.0 - s)),
                };
                consider(&[r * x, r * y]);
            }
        }
    }
    best
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
