//! Radial vignette estimation.
//!
//! With the inverse response and the metadata exposure ratio in hand, a
//! correspondence with large radial motion constrains the vignette ratio
//! V(R1)/V(R2). Each such match contributes one linear row in the three
//! even-polynomial coefficients; the stack is solved by (optionally robust)
//! least squares.

use crate::dataset::{Sequence, VignetteImage};
use crate::matching::{normalized_radius, MatchSet};
use crate::response::{InverseResponse, SATURATION_HIGH, SATURATION_LOW};
use crate::solver::{least_squares, SolverKind};
use crate::Error;
use nalgebra::{DMatrix, DVector};

/// Inverse-response values below this make the ratio numerically useless.
pub const MIN_RESPONSE_VALUE: f64 = 1e-4;

/// Radial attenuation V(R) = 1 + v1*R^2 + v2*R^4 + v3*R^6 on the
/// half-diagonal-normalized radius R in [0, 1]; V(0) = 1 by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VignetteModel {
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
}

impl VignetteModel {
    pub fn new(v1: f64, v2: f64, v3: f64) -> Self {
        Self { v1, v2, v3 }
    }

    /// No attenuation anywhere.
    pub fn flat() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn eval(&self, r: f64) -> f64 {
        let r2 = r * r;
        1.0 + r2 * (self.v1 + r2 * (self.v2 + r2 * self.v3))
    }

    pub fn coefficients(&self) -> [f64; 3] {
        [self.v1, self.v2, self.v3]
    }

    /// Physical-plausibility screen: V must stay in (0, 1.05] over a
    /// 256-point radius grid. Violations are a warning, not an error.
    pub fn is_plausible(&self) -> bool {
        (0..256).all(|i| {
            let v = self.eval(i as f64 / 255.0);
            v > 0.0 && v <= 1.05
        })
    }
}

/// Frame pairing policy for the vignette stage.
#[derive(Debug, Clone, Copy)]
pub struct VignettePairing {
    /// Frames skipped between the two members of a pair.
    pub offset: usize,
    /// Frames per estimation round.
    pub window: usize,
    /// Minimum |R1 - R2| for a correspondence to contribute.
    pub min_radial_disp: f64,
}

impl Default for VignettePairing {
    fn default() -> Self {
        Self {
            offset: 30,
            window: 400,
            min_radial_disp: 0.2,
        }
    }
}

impl VignettePairing {
    pub fn check(&self) {
        assert!(self.offset >= 1, "offset must be at least 1");
        assert!(self.window >= self.offset, "window must cover the offset");
    }
}

/// Offset pairs (i, i+offset) sliding by one frame, window by window.
/// Returns frame-id pairs; sequences shorter than offset+1 yield nothing.
pub fn select_vignette_pairs(seq: &Sequence, p: &VignettePairing) -> Vec<(u32, u32)> {
    p.check();
    let n = seq.frames.len();
    let mut pairs = Vec::new();
    let mut base = 0;
    while base < n {
        let end = (base + p.window).min(n);
        let mut i = base;
        while i + p.offset < end {
            pairs.push((seq.frames[i].id, seq.frames[i + p.offset].id));
            i += 1;
        }
        base = end;
    }
    pairs
}

/// Build the linear system rows of one match set given the estimated
/// response. Matches must feature at least `min_radial_disp` of radial
/// motion; clipped intensities and vanishing response values are dropped.
pub fn build_vignette_rows(
    ms: &MatchSet,
    g: &InverseResponse,
    p: &VignettePairing,
) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for m in &ms.matches {
        if m.radial_displacement() < p.min_radial_disp {
            continue;
        }
        let saturated = !(SATURATION_LOW..=SATURATION_HIGH).contains(&m.m1)
            || !(SATURATION_LOW..=SATURATION_HIGH).contains(&m.m2);
        if saturated {
            continue;
        }
        let g2 = g.eval(m.m2);
        if g2 < MIN_RESPONSE_VALUE {
            continue;
        }
        let psi = g.eval(m.m1) / (g2 * ms.exposure_ratio);
        let (r1p, r2p) = (m.r1 * m.r1, m.r2 * m.r2);
        rows.push([
            r1p - psi * r2p,
            r1p * r1p - psi * r2p * r2p,
            r1p * r1p * r1p - psi * r2p * r2p * r2p,
        ]);
        rhs.push(psi - 1.0);
    }
    (rows, rhs)
}

/// Estimate result with its diagnostic flags.
#[derive(Debug, Clone, Copy)]
pub struct VignetteEstimate {
    pub model: VignetteModel,
    pub rank_deficient: bool,
    pub plausible: bool,
    pub converged: bool,
}

/// Solve the accumulated rows for the vignette coefficients.
pub fn estimate_vignette(
    rows: &[[f64; 3]],
    rhs: &[f64],
    kind: &SolverKind,
) -> Result<VignetteEstimate, Error> {
    assert_eq!(rows.len(), rhs.len());
    if rows.len() < 3 {
        return Err(Error::NotEstimable {
            what: "vignette",
            reason: format!("{} rows accumulated, need at least 3", rows.len()),
        });
    }
    let b = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
    let d = DVector::from_column_slice(rhs);
    let sol = least_squares(&b, &d, kind)?;
    let model = VignetteModel::new(sol.coeffs[0], sol.coeffs[1], sol.coeffs[2]);
    Ok(VignetteEstimate {
        model,
        rank_deficient: sol.rank_deficient,
        plausible: model.is_plausible(),
        converged: sol.converged,
    })
}

/// RMSE between two models over a 256-point radius grid in [0, 1].
pub fn evaluate_vignette_model(est: &VignetteModel, gt: &VignetteModel) -> f64 {
    let sum: f64 = (0..256)
        .map(|i| {
            let r = i as f64 / 255.0;
            let d = est.eval(r) - gt.eval(r);
            d * d
        })
        .sum();
    (sum / 256.0).sqrt()
}

/// RMSE between a model and a tabulated vignette image, evaluating the model
/// at each pixel's normalized radius. The image is rescaled so its value at
/// the frame centre is 1 before comparison, matching V(0) = 1.
pub fn evaluate_vignette_image(est: &VignetteModel, gt: &VignetteImage) -> f64 {
    let center = gt.sample_center().max(f64::MIN_POSITIVE);
    let mut sum = 0.0;
    for y in 0..gt.height {
        for x in 0..gt.width {
            let r = normalized_radius(x as f64, y as f64, gt.width, gt.height);
            let d = est.eval(r) - gt.values[(y * gt.width + x) as usize] / center;
            sum += d * d;
        }
    }
    (sum / (gt.width as f64 * gt.height as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::Match;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_with(k: f64, matches: Vec<Match>) -> MatchSet {
        MatchSet {
            pair: (0, 30),
            width: 100,
            height: 100,
            exposure_ratio: k,
            matches,
            insufficient: false,
        }
    }

    fn match_mr(m1: f64, m2: f64, r1: f64, r2: f64) -> Match {
        Match {
            x1: 0.0,
            y1: 0.0,
            x2: 0.0,
            y2: 0.0,
            m1,
            m2,
            r1,
            r2,
        }
    }

    #[test]
    fn flat_world_row_vanishes() {
        // Equal radii carry zero radial displacement, so drop the gate to
        // see the degenerate row itself.
        let mut p = VignettePairing::default();
        p.min_radial_disp = 0.0;
        let ms = set_with(1.0, vec![match_mr(0.5, 0.5, 0.5, 0.5)]);
        let (rows, rhs) = build_vignette_rows(&ms, &InverseResponse::identity(), &p);
        assert_eq!(rows.len(), 1);
        for v in rows[0] {
            assert!(v.abs() < 1e-15);
        }
        assert!(rhs[0].abs() < 1e-15);
    }

    #[test]
    fn row_matches_direct_substitution() {
        let mut p = VignettePairing::default();
        p.min_radial_disp = 0.2;
        let ms = set_with(1.0, vec![match_mr(0.8, 0.98, 0.0, 0.6)]);
        // psi = g(M1)/(g(M2) k); identity g keeps the intensities as-is.
        let (rows, rhs) = build_vignette_rows(&ms, &InverseResponse::identity(), &p);
        assert_eq!(rows.len(), 1);
        let psi = 0.8 / 0.98;
        assert!((rows[0][0] - (0.0 - psi * 0.36)).abs() < 1e-12);
        assert!((rows[0][1] - (0.0 - psi * 0.1296)).abs() < 1e-12);
        assert!((rows[0][2] - (0.0 - psi * 0.046656)).abs() < 1e-12);
        assert!((rhs[0] - (psi - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn spec_example_row_with_saturated_endpoint_relaxed() {
        // Direct check of the row algebra at psi = 0.8 without the
        // saturation guard in the way: rhs and row entries from
        // R1 = 0, R2 = 0.6 and psi = 0.8.
        let psi: f64 = 0.8;
        let expected = [-psi * 0.36, -psi * 0.1296, -psi * 0.046656];
        assert!((expected[0] - (-0.288)).abs() < 1e-12);
        assert!((expected[1] - (-0.10368)).abs() < 1e-12);
        assert!((expected[2] - (-0.0373248)).abs() < 1e-12);
        assert!((psi - 1.0 - (-0.2)).abs() < 1e-12);
    }

    #[test]
    fn small_radial_motion_is_excluded() {
        let ms = set_with(1.0, vec![match_mr(0.5, 0.6, 0.4, 0.5)]);
        let (rows, _) =
            build_vignette_rows(&ms, &InverseResponse::identity(), &VignettePairing::default());
        assert!(rows.is_empty());
    }

    fn synthetic_rows(
        v: &VignetteModel,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<[f64; 3]>, Vec<f64>) {
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        while rows.len() < n {
            let r1: f64 = rng.gen_range(0.0..1.0);
            let r2: f64 = rng.gen_range(0.0..1.0);
            if (r1 - r2).abs() < 0.2 {
                continue;
            }
            let psi = v.eval(r1) / v.eval(r2);
            let (a, b) = (r1 * r1, r2 * r2);
            rows.push([a - psi * b, a * a - psi * b * b, a * a * a - psi * b * b * b]);
            rhs.push(psi - 1.0);
        }
        (rows, rhs)
    }

    #[test]
    fn flat_vignette_recovers_zero_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (rows, rhs) = synthetic_rows(&VignetteModel::flat(), 50, &mut rng);
        let est = estimate_vignette(&rows, &rhs, &SolverKind::l2()).unwrap();
        for c in est.model.coefficients() {
            assert!(c.abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_rows_recover_generating_model() {
        let truth = VignetteModel::new(-0.7, 0.3, -0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (rows, rhs) = synthetic_rows(&truth, 200, &mut rng);
        let est = estimate_vignette(&rows, &rhs, &SolverKind::l2()).unwrap();
        for (a, b) in est.model.coefficients().iter().zip(truth.coefficients()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(est.plausible);
    }

    #[test]
    fn generating_coefficients_zero_the_residual() {
        // Rows built from exact g, V, k must satisfy B v* = b to 1e-10.
        let truth = VignetteModel::new(-0.5, 0.2, -0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rows, rhs) = synthetic_rows(&truth, 300, &mut rng);
        let vstar = truth.coefficients();
        let mut max = 0.0f64;
        for (row, b) in rows.iter().zip(&rhs) {
            let pred: f64 = row.iter().zip(vstar).map(|(a, v)| a * v).sum();
            max = max.max((pred - b).abs());
        }
        assert!(max < 1e-10, "max residual {max}");
    }

    #[test]
    fn residual_consistency_survives_frame_swap() {
        // Swapping the pair roles maps psi to 1/psi; the generating model
        // still zeroes the residual of the swapped rows.
        let truth = VignetteModel::new(-0.6, 0.25, -0.08);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut max = 0.0f64;
        for _ in 0..200 {
            let r1 = rng.gen_range(0.0..1.0);
            let r2 = rng.gen_range(0.0..1.0);
            let psi = truth.eval(r2) / truth.eval(r1); // swapped roles
            let (a, b) = (r2 * r2, r1 * r1);
            let row = [a - psi * b, a * a - psi * b * b, a * a * a - psi * b * b * b];
            let pred: f64 = row
                .iter()
                .zip(truth.coefficients())
                .map(|(a, v)| a * v)
                .sum();
            max = max.max((pred - (psi - 1.0)).abs());
        }
        assert!(max < 1e-10);
    }

    #[test]
    fn huber_shrugs_off_gross_outliers() {
        let truth = VignetteModel::new(-0.7, 0.3, -0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (rows, mut rhs) = synthetic_rows(&truth, 200, &mut rng);
        for i in 0..rows.len() {
            if i % 10 == 0 {
                // Corrupt 10% with a wildly wrong psi.
                rhs[i] += rng.gen_range(1.0..3.0);
            }
        }
        let l2 = estimate_vignette(&rows, &rhs, &SolverKind::l2()).unwrap();
        let huber = estimate_vignette(&rows, &rhs, &SolverKind::huber()).unwrap();
        let e_l2 = evaluate_vignette_model(&l2.model, &truth);
        let e_huber = evaluate_vignette_model(&huber.model, &truth);
        assert!(
            e_huber <= e_l2 / 3.0,
            "huber {e_huber} not well below l2 {e_l2}"
        );
    }

    #[test]
    fn too_few_rows_is_not_estimable() {
        let err = estimate_vignette(&[[0.0; 3]; 2], &[0.0; 2], &SolverKind::l2()).unwrap_err();
        assert!(matches!(err, Error::NotEstimable { .. }));
    }

    #[test]
    fn rmse_of_model_against_itself_is_zero() {
        let v = VignetteModel::new(-0.3, 0.05, -0.01);
        assert!(evaluate_vignette_model(&v, &v) < 1e-15);
    }

    #[test]
    fn rmse_flat_vs_half_r2_matches_direct_summation() {
        // Frozen from the direct summation over the 256-point radius grid:
        // sqrt(mean_i (0.5*(i/255)^2)^2).
        let flat = VignetteModel::flat();
        let gt = VignetteModel::new(-0.5, 0.0, 0.0);
        let rmse = evaluate_vignette_model(&flat, &gt);
        assert!((rmse - 0.22426378508427167).abs() < 1e-12);
    }
}
