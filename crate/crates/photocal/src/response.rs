//! Inverse camera-response estimation.
//!
//! Pairs of frames with a large metadata exposure change and correspondences
//! with small radial motion share (up to the exposure ratio) the same
//! accumulated irradiance, which turns each correspondence into one
//! homogeneous row `[1-k, M1-k*M2, M1^2-k*M2^2]` in the coefficients of the
//! degree-2 inverse response. The boundary constraints g(0)=0, g(1)=1 pin the
//! otherwise scale-free solution; the constrained minimiser comes out of the
//! saddle-point solver in [`crate::solver`].

use crate::dataset::{ResponseCurve, Sequence};
use crate::matching::MatchSet;
use crate::solver::{solve_saddle, KktSystem};
use crate::Error;

/// Intensities below this are treated as dark-clipped.
pub const SATURATION_LOW: f64 = 0.02;
/// Intensities above this are treated as bright-clipped.
pub const SATURATION_HIGH: f64 = 0.98;

/// Inverse response g(M) = c0 + c1*M + c2*M^2 with g(0) = 0 and g(1) = 1.
///
/// Estimated instances always carry c0 = 0 exactly; c1 + c2 = 1 holds to
/// within the solver's constraint residual (1e-10).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseResponse {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl InverseResponse {
    /// Construct from the two free coefficients, pinning c0 = 0.
    pub fn constrained(c1: f64, c2: f64) -> Self {
        Self { c0: 0.0, c1, c2 }
    }

    /// The linear response g(M) = M.
    pub fn identity() -> Self {
        Self::constrained(1.0, 0.0)
    }

    pub fn eval(&self, m: f64) -> f64 {
        self.c0 + m * (self.c1 + m * self.c2)
    }

    /// Coefficient-space distance to the constraint set (|c0|, |sum-1|).
    pub fn constraint_residual(&self) -> f64 {
        self.c0
            .abs()
            .max((self.c0 + self.c1 + self.c2 - 1.0).abs())
    }

    /// Minimum finite difference over a uniform grid; positive means the
    /// response is strictly increasing and therefore invertible.
    pub fn min_grid_slope(&self, grid: usize) -> f64 {
        assert!(grid >= 2);
        let mut min = f64::INFINITY;
        let mut prev = self.eval(0.0);
        for i in 1..grid {
            let cur = self.eval(i as f64 / (grid - 1) as f64);
            min = min.min(cur - prev);
            prev = cur;
        }
        min
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.min_grid_slope(1024) > 0.0
    }

    /// Recover the polynomial from a normalized sampled curve, if the curve
    /// is an exact (to `tol`, after endpoint normalization) quadratic through
    /// (0,0) and (1,1). Lets sampled estimate files round-trip losslessly.
    pub fn fit_from_curve(curve: &ResponseCurve, tol: f64) -> Option<Self> {
        let x = 128.0 / 255.0;
        let c1 = (curve.samples[128] - x * x) / (x - x * x);
        let g = Self::constrained(c1, 1.0 - c1);
        let exact = curve
            .samples
            .iter()
            .enumerate()
            .all(|(i, s)| (g.eval(i as f64 / 255.0) - s).abs() <= tol);
        exact.then_some(g)
    }
}

/// Selection thresholds for response-estimation keyframe pairs.
#[derive(Debug, Clone, Copy)]
pub struct CrfPairGate {
    /// Pairs with exposure ratio below this qualify.
    pub ratio_low: f64,
    /// Pairs with exposure ratio above this qualify.
    pub ratio_high: f64,
    /// Frames per estimation round.
    pub window: usize,
    /// Max |R1 - R2| for a correspondence to enter the system.
    pub max_radial_disp: f64,
    /// Minimum surviving rows for a pair to contribute.
    pub min_samples_per_pair: usize,
}

impl Default for CrfPairGate {
    fn default() -> Self {
        Self {
            ratio_low: 0.92,
            ratio_high: 1.08,
            window: 200,
            max_radial_disp: 0.02,
            min_samples_per_pair: 5,
        }
    }
}

impl CrfPairGate {
    pub fn check(&self) {
        assert!(
            0.0 < self.ratio_low && self.ratio_low < 1.0 && 1.0 < self.ratio_high,
            "need 0 < ratio_low < 1 < ratio_high"
        );
        assert!(self.window >= 2, "window must cover at least one pair");
    }

    /// True when the ratio is outside the dead zone around 1.
    pub fn ratio_qualifies(&self, k: f64) -> bool {
        k < self.ratio_low || k > self.ratio_high
    }
}

/// Scan consecutive frames and keep the pairs whose metadata exposure ratio
/// leaves the gate's dead zone, in arrival order. Returns frame-id pairs.
pub fn select_crf_pairs(seq: &Sequence, gate: &CrfPairGate) -> Vec<(u32, u32)> {
    gate.check();
    let mut pairs = Vec::new();
    for pair in seq.frames.windows(2) {
        let k = pair[0].exposure_ms / pair[1].exposure_ms;
        if gate.ratio_qualifies(k) {
            pairs.push((pair[0].id, pair[1].id));
        }
    }
    pairs
}

/// Build the homogeneous rows of one match set.
///
/// Keeps matches whose radial displacement stays within the gate and whose
/// intensities are not clipped on both ends (both M below the dark or above
/// the bright saturation bound).
pub fn build_crf_rows(ms: &MatchSet, gate: &CrfPairGate) -> Vec<[f64; 3]> {
    let k = ms.exposure_ratio;
    let mut rows = Vec::new();
    for m in &ms.matches {
        if m.radial_displacement() > gate.max_radial_disp {
            continue;
        }
        let dark = m.m1 < SATURATION_LOW && m.m2 < SATURATION_LOW;
        let bright = m.m1 > SATURATION_HIGH && m.m2 > SATURATION_HIGH;
        if dark || bright {
            continue;
        }
        rows.push([
            1.0 - k,
            m.m1 - k * m.m2,
            m.m1 * m.m1 - k * m.m2 * m.m2,
        ]);
    }
    rows
}

/// Estimate result; a rank-deficient system still yields the minimum-norm
/// feasible point but callers should keep gathering pairs.
#[derive(Debug, Clone, Copy)]
pub struct CrfEstimate {
    pub response: InverseResponse,
    pub rank_deficient: bool,
}

/// Solve the accumulated system for the inverse-response coefficients.
pub fn estimate_crf(rows: &[[f64; 3]]) -> Result<CrfEstimate, Error> {
    let sol = solve_saddle(&KktSystem::new(rows.to_vec()))?;
    Ok(CrfEstimate {
        response: InverseResponse::constrained(sol.coeffs[1], sol.coeffs[2]),
        rank_deficient: sol.rank_deficient,
    })
}

/// RMSE between the polynomial and a tabulated curve over the 256 intensity
/// grid points i/255.
pub fn evaluate_crf(g: &InverseResponse, gt: &ResponseCurve) -> f64 {
    let sum: f64 = gt
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let d = g.eval(i as f64 / 255.0) - s;
            d * d
        })
        .sum();
    (sum / 256.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FrameRecord;
    use crate::matching::{Match, MatchSet};
    use image::GrayImage;

    fn seq_with_exposures(exposures: &[f64]) -> Sequence {
        let frames = exposures
            .iter()
            .enumerate()
            .map(|(i, &e)| FrameRecord {
                id: i as u32,
                timestamp: i as f64 * 0.05,
                exposure_ms: e,
                image: GrayImage::new(4, 4),
            })
            .collect();
        Sequence {
            frames,
            width: 4,
            height: 4,
            source: Default::default(),
        }
    }

    fn match_with(m1: f64, m2: f64, r1: f64, r2: f64) -> Match {
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

    fn set_with(k: f64, matches: Vec<Match>) -> MatchSet {
        MatchSet {
            pair: (0, 1),
            width: 100,
            height: 100,
            exposure_ratio: k,
            matches,
            insufficient: false,
        }
    }

    #[test]
    fn constant_exposures_select_nothing() {
        let seq = seq_with_exposures(&[5.0, 5.0, 5.0, 5.0]);
        assert!(select_crf_pairs(&seq, &CrfPairGate::default()).is_empty());
    }

    #[test]
    fn halving_ratio_selects_pair() {
        let seq = seq_with_exposures(&[5.0, 10.0]);
        assert_eq!(
            select_crf_pairs(&seq, &CrfPairGate::default()),
            vec![(0, 1)]
        );
    }

    #[test]
    fn ratio_inside_dead_zone_is_rejected() {
        // k = 10/9.3 ~ 1.075, inside (0.92, 1.08).
        let seq = seq_with_exposures(&[10.0, 9.3]);
        assert!(select_crf_pairs(&seq, &CrfPairGate::default()).is_empty());
    }

    #[test]
    fn row_vanishes_at_unit_ratio_and_equal_intensity() {
        let ms = set_with(1.0, vec![match_with(0.5, 0.5, 0.4, 0.4)]);
        let rows = build_crf_rows(&ms, &CrfPairGate::default());
        assert_eq!(rows.len(), 1);
        for v in rows[0] {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn row_matches_direct_substitution() {
        let ms = set_with(0.5, vec![match_with(0.3, 0.7, 0.4, 0.4)]);
        let rows = build_crf_rows(&ms, &CrfPairGate::default());
        assert_eq!(rows.len(), 1);
        assert!((rows[0][0] - 0.5).abs() < 1e-12);
        assert!((rows[0][1] - (-0.05)).abs() < 1e-12);
        assert!((rows[0][2] - (-0.155)).abs() < 1e-12);
    }

    #[test]
    fn large_radial_displacement_is_excluded() {
        let ms = set_with(0.5, vec![match_with(0.3, 0.7, 0.1, 0.5)]);
        assert!(build_crf_rows(&ms, &CrfPairGate::default()).is_empty());
    }

    #[test]
    fn saturated_both_ends_is_excluded() {
        let gate = CrfPairGate::default();
        let dark = set_with(0.5, vec![match_with(0.01, 0.015, 0.1, 0.1)]);
        assert!(build_crf_rows(&dark, &gate).is_empty());
        let bright = set_with(0.5, vec![match_with(0.99, 0.995, 0.1, 0.1)]);
        assert!(build_crf_rows(&bright, &gate).is_empty());
        // One clipped endpoint alone still contributes.
        let half = set_with(0.5, vec![match_with(0.01, 0.3, 0.1, 0.1)]);
        assert_eq!(build_crf_rows(&half, &gate).len(), 1);
    }

    fn rows_from_response(g: &InverseResponse, ks: &[f64]) -> Vec<[f64; 3]> {
        // Invert the quadratic analytically so row generation is independent
        // of any lookup-table machinery.
        let invert = |y: f64| -> f64 {
            if g.c2.abs() < 1e-14 {
                y / g.c1
            } else {
                let disc = g.c1 * g.c1 + 4.0 * g.c2 * y;
                (-g.c1 + disc.sqrt()) / (2.0 * g.c2)
            }
        };
        let mut rows = Vec::new();
        for &k in ks {
            for i in 1..20 {
                let m2 = i as f64 / 20.0;
                let y1 = k * g.eval(m2);
                if !(0.0..=1.0).contains(&y1) {
                    continue;
                }
                let m1 = invert(y1);
                rows.push([1.0 - k, m1 - k * m2, m1 * m1 - k * m2 * m2]);
            }
        }
        rows
    }

    #[test]
    fn recovers_identity_response() {
        let rows = rows_from_response(&InverseResponse::identity(), &[0.5, 2.0]);
        let est = estimate_crf(&rows).unwrap();
        assert!((est.response.c1 - 1.0).abs() < 1e-9);
        assert!(est.response.c2.abs() < 1e-9);
    }

    #[test]
    fn recovers_pure_quadratic_response() {
        let g = InverseResponse::constrained(0.0, 1.0);
        let rows = rows_from_response(&g, &[0.5, 2.0]);
        let est = estimate_crf(&rows).unwrap();
        assert!(est.response.c1.abs() < 1e-9);
        assert!((est.response.c2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_row_gives_min_norm_feasible_point() {
        let est = estimate_crf(&[[0.0; 3]]).unwrap();
        assert!(est.rank_deficient);
        assert_eq!(est.response.c0, 0.0);
        assert!((est.response.c1 - 0.5).abs() < 1e-9);
        assert!((est.response.c2 - 0.5).abs() < 1e-9);
    }

    #[test]
    fn estimates_satisfy_constraints_regardless_of_data() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.gen_range(1..50);
            let rows: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    ]
                })
                .collect();
            let est = estimate_crf(&rows).unwrap();
            assert_eq!(est.response.eval(0.0), 0.0);
            assert!((est.response.eval(1.0) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn estimate_is_invariant_to_uniform_row_scaling() {
        let g = InverseResponse::constrained(0.7, 0.3);
        let rows = rows_from_response(&g, &[0.5, 2.0]);
        let scaled: Vec<[f64; 3]> = rows
            .iter()
            .map(|r| [r[0] * -3.5, r[1] * -3.5, r[2] * -3.5])
            .collect();
        let a = estimate_crf(&rows).unwrap().response;
        let b = estimate_crf(&scaled).unwrap().response;
        assert!((a.c1 - b.c1).abs() < 1e-9);
        assert!((a.c2 - b.c2).abs() < 1e-9);
    }

    #[test]
    fn estimate_is_invariant_to_frame_exchange() {
        // Swapping (M1, e1) with (M2, e2) in every sample of a fixed-k set
        // rescales each row by -1/k, so the estimate must not move.
        let g = InverseResponse::constrained(0.4, 0.6);
        let k = 0.5;
        let rows = rows_from_response(&g, &[k]);
        let swapped: Vec<[f64; 3]> = rows
            .iter()
            .map(|r| {
                // Recover (m1, m2) implied by the row to swap them exactly.
                // Row structure: [1-k, m1 - k m2, m1^2 - k m2^2].
                [r[0] * (-1.0 / k), r[1] * (-1.0 / k), r[2] * (-1.0 / k)]
            })
            .collect();
        let a = estimate_crf(&rows).unwrap().response;
        let b = estimate_crf(&swapped).unwrap().response;
        assert!((a.c1 - b.c1).abs() < 1e-9);
        assert!((a.c2 - b.c2).abs() < 1e-9);
    }

    #[test]
    fn rmse_of_identity_against_itself_is_zero() {
        let g = InverseResponse::identity();
        let gt = ResponseCurve::from_response(&g);
        assert!(evaluate_crf(&g, &gt) < 1e-15);
    }

    #[test]
    fn rmse_identity_vs_square_matches_direct_summation() {
        // Frozen from the direct summation over the 256-point grid:
        // sqrt(mean_i ((i/255) - (i/255)^2)^2).
        let g = InverseResponse::identity();
        let gt = ResponseCurve::from_response(&InverseResponse::constrained(0.0, 1.0));
        let rmse = evaluate_crf(&g, &gt);
        assert!((rmse - 0.18221724669236808).abs() < 1e-12);
    }

    #[test]
    fn quadratic_curve_round_trips_through_fit() {
        let g = InverseResponse::constrained(0.35, 0.65);
        let curve = ResponseCurve::from_response(&g);
        let fitted = InverseResponse::fit_from_curve(&curve, 1e-12).unwrap();
        assert!((fitted.c1 - g.c1).abs() < 1e-12);
        assert!((fitted.c2 - g.c2).abs() < 1e-12);
    }
}
