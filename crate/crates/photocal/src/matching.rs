//! Point correspondences between frame pairs.
//!
//! The estimators only consume per-match intensities and normalized radii,
//! so the correspondence provider is pluggable: the built-in baseline runs
//! Shi-Tomasi corner detection plus zero-mean normalized cross-correlation
//! patch matching (exposure changes shift patch means, which ZNCC removes),
//! and externally produced matches can be ingested from plain text files.
//!
//! A block-wise orientation filter removes outliers under the assumption
//! that features move the same way locally.

use crate::dataset::FrameRecord;
use crate::Error;
use image::GrayImage;
use std::path::Path;

/// Displacements shorter than this count as zero motion and bypass the
/// orientation filter.
const ZERO_DISPLACEMENT_EPS: f64 = 1e-6;

/// One correspondence with everything the estimators need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    /// Normalized intensity in the first frame, bilinear sample / 255.
    pub m1: f64,
    /// Normalized intensity in the second frame.
    pub m2: f64,
    /// Half-diagonal-normalized radius in the first frame.
    pub r1: f64,
    /// Normalized radius in the second frame.
    pub r2: f64,
}

impl Match {
    /// |R1 - R2|, the quantity both radial gates cut on.
    pub fn radial_displacement(&self) -> f64 {
        (self.r1 - self.r2).abs()
    }

    pub fn displacement(&self) -> (f64, f64) {
        (self.x2 - self.x1, self.y2 - self.y1)
    }
}

/// Correspondences of one frame pair plus the metadata exposure ratio
/// k = e_first / e_second.
#[derive(Debug, Clone)]
pub struct MatchSet {
    pub pair: (u32, u32),
    pub width: u32,
    pub height: u32,
    pub exposure_ratio: f64,
    pub matches: Vec<Match>,
    /// Set when the provider found fewer matches than its minimum; callers
    /// skip the pair rather than treating this as an error.
    pub insufficient: bool,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Copy of this set restricted to matches satisfying `keep`.
    pub fn filtered(&self, keep: impl Fn(&Match) -> bool) -> MatchSet {
        MatchSet {
            matches: self.matches.iter().copied().filter(|m| keep(m)).collect(),
            ..self.clone()
        }
    }
}

/// Baseline detector/matcher tuning.
#[derive(Debug, Clone, Copy)]
pub struct MatcherConfig {
    /// Cap on corners kept per frame, strongest first.
    pub max_features: usize,
    /// Half-width of the square correlation patch.
    pub patch_radius: usize,
    /// Minimum ZNCC score for an accepted match.
    pub min_score: f64,
    /// Lowe-style ratio on correlation distance (1 - ZNCC): the best match
    /// must beat `ratio` times the second best.
    pub ratio: f64,
    /// Below this many surviving matches the set is flagged insufficient.
    pub min_matches: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            max_features: 400,
            patch_radius: 7,
            min_score: 0.6,
            ratio: 0.85,
            min_matches: 10,
        }
    }
}

/// Distance from the frame centre (W/2, H/2) over the half-diagonal, so the
/// result lands in [0, 1] for any aspect ratio.
pub fn normalized_radius(x: f64, y: f64, width: u32, height: u32) -> f64 {
    let (w, h) = (width as f64, height as f64);
    let (dx, dy) = (x - 0.5 * w, y - 0.5 * h);
    let half_diag = 0.5 * (w * w + h * h).sqrt();
    (dx * dx + dy * dy).sqrt() / half_diag
}

/// Bilinear intensity sample in [0, 255]; coordinates are clamped to the
/// valid interpolation domain.
pub fn bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let cx = x.clamp(0.0, (w - 1) as f64);
    let cy = y.clamp(0.0, (h - 1) as f64);
    let x0 = (cx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (cy.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let p = |xx: usize, yy: usize| img.get_pixel(xx as u32, yy as u32).0[0] as f64;
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn make_match(a: &FrameRecord, b: &FrameRecord, x1: f64, y1: f64, x2: f64, y2: f64) -> Match {
    let (w, h) = (a.image.width(), a.image.height());
    Match {
        x1,
        y1,
        x2,
        y2,
        m1: bilinear(&a.image, x1, y1) / 255.0,
        m2: bilinear(&b.image, x2, y2) / 255.0,
        r1: normalized_radius(x1, y1, w, h),
        r2: normalized_radius(x2, y2, w, h),
    }
}

/// Shi-Tomasi corner score (min eigenvalue of the 3x3-summed structure
/// tensor) with 3x3 non-maximum suppression; strongest `max_features` kept.
fn detect_corners(img: &GrayImage, cfg: &MatcherConfig) -> Vec<(u32, u32)> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let margin = cfg.patch_radius + 2;
    if w <= 2 * margin || h <= 2 * margin {
        return Vec::new();
    }
    let at = |x: usize, y: usize| img.as_raw()[y * w + x] as f64;

    // Central-difference gradients.
    let mut gx = vec![0.0f64; w * h];
    let mut gy = vec![0.0f64; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            gx[y * w + x] = 0.5 * (at(x + 1, y) - at(x - 1, y));
            gy[y * w + x] = 0.5 * (at(x, y + 1) - at(x, y - 1));
        }
    }

    let mut score = vec![0.0f64; w * h];
    let mut max_score = 0.0f64;
    for y in margin..h - margin {
        for x in margin..w - margin {
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let i = (y as i32 + dy) as usize * w + (x as i32 + dx) as usize;
                    sxx += gx[i] * gx[i];
                    sxy += gx[i] * gy[i];
                    syy += gy[i] * gy[i];
                }
            }
            let half_trace = 0.5 * (sxx + syy);
            let det = sxx * syy - sxy * sxy;
            let lambda_min = half_trace - (half_trace * half_trace - det).max(0.0).sqrt();
            score[y * w + x] = lambda_min;
            max_score = max_score.max(lambda_min);
        }
    }
    if max_score <= 0.0 {
        return Vec::new();
    }

    let threshold = 0.01 * max_score;
    let mut corners = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let s = score[y * w + x];
            if s < threshold {
                continue;
            }
            let mut local_max = true;
            'nms: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = score[(y as i32 + dy) as usize * w + (x as i32 + dx) as usize];
                    if n > s || (n == s && (dy < 0 || (dy == 0 && dx < 0))) {
                        local_max = false;
                        break 'nms;
                    }
                }
            }
            if local_max {
                corners.push((x as u32, y as u32, s));
            }
        }
    }
    corners.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("finite scores"));
    corners.truncate(cfg.max_features);
    corners.into_iter().map(|(x, y, _)| (x, y)).collect()
}

/// Zero-mean unit-norm patch vector, or None for flat patches.
fn patch_vector(img: &GrayImage, x: u32, y: u32, radius: usize) -> Option<Vec<f64>> {
    let r = radius as i64;
    let side = 2 * radius + 1;
    let mut values = Vec::with_capacity(side * side);
    for dy in -r..=r {
        for dx in -r..=r {
            values.push(img.get_pixel((x as i64 + dx) as u32, (y as i64 + dy) as u32).0[0] as f64);
        }
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    for v in &mut values {
        *v -= mean;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    for v in &mut values {
        *v /= norm;
    }
    Some(values)
}

fn zncc(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Detect corners in both frames and keep mutual-best ZNCC matches that pass
/// the score threshold and the ratio test. Fewer than `min_matches`
/// survivors flags the set insufficient instead of erroring.
pub fn detect_and_match(
    a: &FrameRecord,
    b: &FrameRecord,
    cfg: &MatcherConfig,
) -> Result<MatchSet, Error> {
    if a.image.dimensions() != b.image.dimensions() {
        return Err(Error::DimensionMismatch {
            expected: a.image.dimensions(),
            got: b.image.dimensions(),
            context: format!("matching frames {} and {}", a.id, b.id),
        });
    }
    let (width, height) = a.image.dimensions();
    let k = a.exposure_ms / b.exposure_ms;

    let corners_a = detect_corners(&a.image, cfg);
    let corners_b = detect_corners(&b.image, cfg);
    let patches_a: Vec<Option<Vec<f64>>> = corners_a
        .iter()
        .map(|&(x, y)| patch_vector(&a.image, x, y, cfg.patch_radius))
        .collect();
    let patches_b: Vec<Option<Vec<f64>>> = corners_b
        .iter()
        .map(|&(x, y)| patch_vector(&b.image, x, y, cfg.patch_radius))
        .collect();

    // Best and second-best correlation partner for every corner in `a`.
    let best_for = |pa: &[Option<Vec<f64>>], pb: &[Option<Vec<f64>>], i: usize| {
        let Some(ref va) = pa[i] else { return None };
        let (mut best, mut best_j, mut second) = (-2.0f64, usize::MAX, -2.0f64);
        for (j, vb) in pb.iter().enumerate() {
            let Some(vb) = vb else { continue };
            let s = zncc(va, vb);
            if s > best {
                second = best;
                best = s;
                best_j = j;
            } else if s > second {
                second = s;
            }
        }
        (best_j != usize::MAX).then_some((best_j, best, second))
    };

    let forward: Vec<Option<(usize, f64, f64)>> = (0..corners_a.len())
        .map(|i| best_for(&patches_a, &patches_b, i))
        .collect();
    let backward: Vec<Option<(usize, f64, f64)>> = (0..corners_b.len())
        .map(|j| best_for(&patches_b, &patches_a, j))
        .collect();

    let mut matches = Vec::new();
    for (i, fwd) in forward.iter().enumerate() {
        let Some((j, score, second)) = *fwd else {
            continue;
        };
        if score < cfg.min_score {
            continue;
        }
        // Mutual best check.
        if backward[j].map(|(bi, _, _)| bi) != Some(i) {
            continue;
        }
        // Ratio test on correlation distance.
        let d_best = 1.0 - score;
        let d_second = 1.0 - second;
        if second > -2.0 + f64::EPSILON && d_best >= cfg.ratio * d_second {
            continue;
        }
        let (x1, y1) = (corners_a[i].0 as f64, corners_a[i].1 as f64);
        let (x2, y2) = (corners_b[j].0 as f64, corners_b[j].1 as f64);
        matches.push(make_match(a, b, x1, y1, x2, y2));
    }

    let insufficient = matches.len() < cfg.min_matches;
    Ok(MatchSet {
        pair: (a.id, b.id),
        width,
        height,
        exposure_ratio: k,
        matches,
        insufficient,
    })
}

/// Match file ingestion result.
#[derive(Debug)]
pub struct LoadedMatches {
    pub set: MatchSet,
    /// Rows skipped because a coordinate fell outside the image bounds.
    pub skipped: usize,
}

/// Read "x1 y1 x2 y2" lines and populate intensities and radii from the two
/// frames. Out-of-bounds rows are skipped and counted, not fatal.
pub fn load_matches(path: &Path, a: &FrameRecord, b: &FrameRecord) -> Result<LoadedMatches, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (width, height) = a.image.dimensions();
    let in_bounds = |x: f64, y: f64| {
        x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64
    };

    let mut matches = Vec::new();
    let mut skipped = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let (x1, y1, x2, y2) = (fields[0], fields[1], fields[2], fields[3]);
        if !in_bounds(x1, y1) || !in_bounds(x2, y2) {
            skipped += 1;
            continue;
        }
        matches.push(make_match(a, b, x1, y1, x2, y2));
    }

    let insufficient = matches.is_empty();
    Ok(LoadedMatches {
        set: MatchSet {
            pair: (a.id, b.id),
            width,
            height,
            exposure_ratio: a.exposure_ms / b.exposure_ms,
            matches,
            insufficient,
        },
        skipped,
    })
}

/// Keep, per image block, only the matches whose displacement orientation
/// falls in the block's most populated angular bin.
///
/// Blocks are formed over the first-frame positions on a `grid` partition of
/// the image. Orientations are binned uniformly over [-pi, pi). Blocks with
/// fewer than two orientable matches pass their matches through, and
/// (near-)zero displacements are always kept. Modal-bin ties break toward
/// the bin with the smaller mean displacement magnitude.
pub fn block_orientation_filter(ms: &MatchSet, grid: (usize, usize), bins: usize) -> MatchSet {
    let (gx, gy) = grid;
    assert!(gx >= 1 && gy >= 1, "grid must be at least 1x1");
    assert!(bins >= 2, "need at least two orientation bins");

    let block_of = |m: &Match| -> usize {
        let bx = ((m.x1 / ms.width as f64) * gx as f64).floor() as isize;
        let by = ((m.y1 / ms.height as f64) * gy as f64).floor() as isize;
        let bx = bx.clamp(0, gx as isize - 1) as usize;
        let by = by.clamp(0, gy as isize - 1) as usize;
        by * gx + bx
    };
    let bin_of = |m: &Match| -> usize {
        let (dx, dy) = m.displacement();
        let theta = dy.atan2(dx);
        let idx = ((theta + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * bins as f64)
            .floor() as usize;
        // atan2 returns pi inclusive; wrap it onto [-pi, pi).
        if idx >= bins {
            0
        } else {
            idx
        }
    };
    let moving = |m: &Match| -> bool {
        let (dx, dy) = m.displacement();
        (dx * dx + dy * dy).sqrt() >= ZERO_DISPLACEMENT_EPS
    };

    // Histogram per block: count and displacement-magnitude sum per bin.
    let nblocks = gx * gy;
    let mut counts = vec![vec![0usize; bins]; nblocks];
    let mut magnitudes = vec![vec![0.0f64; bins]; nblocks];
    let mut movers_per_block = vec![0usize; nblocks];
    for m in &ms.matches {
        if !moving(m) {
            continue;
        }
        let blk = block_of(m);
        let bin = bin_of(m);
        let (dx, dy) = m.displacement();
        counts[blk][bin] += 1;
        magnitudes[blk][bin] += (dx * dx + dy * dy).sqrt();
        movers_per_block[blk] += 1;
    }

    let modal_bin: Vec<Option<usize>> = (0..nblocks)
        .map(|blk| {
            if movers_per_block[blk] < 2 {
                return None; // pass-through block
            }
            let mut best = 0usize;
            for bin in 1..bins {
                let (cb, cbest) = (counts[blk][bin], counts[blk][best]);
                if cb > cbest {
                    best = bin;
                } else if cb == cbest && cb > 0 {
                    let mean_b = magnitudes[blk][bin] / cb as f64;
                    let mean_best = magnitudes[blk][best] / cbest as f64;
                    if mean_b < mean_best {
                        best = bin;
                    }
                }
            }
            Some(best)
        })
        .collect();

    let kept: Vec<Match> = ms
        .matches
        .iter()
        .copied()
        .filter(|m| {
            if !moving(m) {
                return true;
            }
            match modal_bin[block_of(m)] {
                None => true,
                Some(best) => bin_of(m) == best,
            }
        })
        .collect();

    MatchSet {
        matches: kept,
        ..ms.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plain_match(x1: f64, y1: f64, x2: f64, y2: f64) -> Match {
        Match {
            x1,
            y1,
            x2,
            y2,
            m1: 0.5,
            m2: 0.5,
            r1: 0.0,
            r2: 0.0,
        }
    }

    fn set_of(matches: Vec<Match>) -> MatchSet {
        MatchSet {
            pair: (0, 1),
            width: 100,
            height: 100,
            exposure_ratio: 1.0,
            matches,
            insufficient: false,
        }
    }

    #[test]
    fn radius_is_normalized_by_half_diagonal() {
        // Hand-computed: dist((10,10),(50,50)) / (50 sqrt(2)) = 0.8.
        assert!((normalized_radius(10.0, 10.0, 100, 100) - 0.8).abs() < 1e-12);
        // Corner of a square image sits at exactly R = 1.
        assert!((normalized_radius(0.0, 0.0, 100, 100) - 1.0).abs() < 1e-12);
        // Centre is R = 0.
        assert!(normalized_radius(50.0, 50.0, 100, 100) < 1e-12);
    }

    #[test]
    fn radius_is_rotation_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x: f64 = rng.gen_range(0.0..192.0);
            let y: f64 = rng.gen_range(0.0..144.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (cx, cy) = (96.0, 72.0);
            let (dx, dy) = (x - cx, y - cy);
            let xr = cx + dx * phi.cos() - dy * phi.sin();
            let yr = cy + dx * phi.sin() + dy * phi.cos();
            let r0 = normalized_radius(x, y, 192, 144);
            let r1 = normalized_radius(xr, yr, 192, 144);
            assert!((r0 - r1).abs() < 1e-12);
        }
    }

    #[test]
    fn modal_bin_survives_minority_removed() {
        // 8 vectors pointing right, 2 pointing left, one block.
        let mut matches = Vec::new();
        for i in 0..8 {
            matches.push(plain_match(10.0 + i as f64, 10.0, 15.0 + i as f64, 10.1));
        }
        for i in 0..2 {
            matches.push(plain_match(30.0 + i as f64, 30.0, 25.0 + i as f64, 29.9));
        }
        let out = block_orientation_filter(&set_of(matches), (1, 1), 36);
        assert_eq!(out.len(), 8);
        assert!(out.matches.iter().all(|m| m.displacement().0 > 0.0));
    }

    #[test]
    fn identical_vectors_all_pass() {
        let matches: Vec<Match> = (0..10)
            .map(|i| plain_match(i as f64 * 7.0, 50.0, i as f64 * 7.0 + 3.0, 52.0))
            .collect();
        let out = block_orientation_filter(&set_of(matches.clone()), (4, 4), 36);
        assert_eq!(out.len(), matches.len());
    }

    #[test]
    fn single_match_block_passes_through() {
        let out = block_orientation_filter(
            &set_of(vec![plain_match(10.0, 10.0, 20.0, 25.0)]),
            (1, 1),
            36,
        );
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn zero_displacement_always_kept() {
        let mut matches = vec![plain_match(12.0, 12.0, 12.0, 12.0)];
        for i in 0..5 {
            matches.push(plain_match(20.0 + i as f64, 20.0, 26.0 + i as f64, 20.0));
        }
        let out = block_orientation_filter(&set_of(matches), (1, 1), 36);
        assert_eq!(out.len(), 6);
    }

    proptest! {
        #[test]
        fn filter_output_is_subset_and_idempotent(
            coords in proptest::collection::vec((0.0..100.0f64, 0.0..100.0f64, 0.0..100.0f64, 0.0..100.0f64), 0..60),
            gx in 1usize..5,
            gy in 1usize..5,
            bins in 2usize..40,
        ) {
            let matches: Vec<Match> = coords
                .into_iter()
                .map(|(x1, y1, x2, y2)| plain_match(x1, y1, x2, y2))
                .collect();
            let input = set_of(matches);
            let once = block_orientation_filter(&input, (gx, gy), bins);

            prop_assert!(once.len() <= input.len());
            let mut iter = input.matches.iter();
            for kept in &once.matches {
                prop_assert!(iter.any(|m| m == kept), "output must be an ordered subset");
            }
            let twice = block_orientation_filter(&once, (gx, gy), bins);
            prop_assert_eq!(once.matches, twice.matches);
        }
    }
}
