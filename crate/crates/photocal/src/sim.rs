//! Forward image-formation simulator with exact ground truth.
//!
//! A seeded smooth radiance field is observed through the formation chain
//! `pixel = round(255 * f(e * V(R) * L))` under an integer-pixel translating
//! window, so every rendered dataset comes with exact correspondences, the
//! generating response and vignette, and the exposure schedule. This is the
//! verification oracle for all estimators: render, run the pipeline, compare
//! against what generated the data.

use crate::dataset::{
    self, load_sequence, write_response_curve, write_sequence, write_vignette_coefficients,
    FrameRecord, ResponseCurve,
};
use crate::exposure::ValidationReport;
use crate::matching::normalized_radius;
use crate::pipeline::{self, CalibrationConfig, CalibrationRun, MatchSource};
use crate::response::{evaluate_crf, InverseResponse};
use crate::vignette::{evaluate_vignette_model, VignetteModel};
use crate::Error;
use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Knots in the response inversion table.
const LUT_SIZE: usize = 1024;

/// Direction of the camera translation (unit vector, 4:3 diagonal).
const MOTION_DIR: (f64, f64) = (0.8, 0.6);

/// Exposure schedule generator.
#[derive(Debug, Clone, Copy)]
pub enum ExposurePattern {
    Constant { ms: f64 },
    /// Even frames get `low_ms`, odd frames `high_ms`.
    Alternating { low_ms: f64, high_ms: f64 },
    /// Log-space random walk with steps uniform in [-max_log_step, +].
    RandomWalk { start_ms: f64, max_log_step: f64 },
}

/// Everything needed to render a synthetic dataset deterministically.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub exposure_pattern: ExposurePattern,
    /// Window translation in pixels per frame along [`MOTION_DIR`].
    pub motion_speed: f64,
    /// Gaussian noise std-dev in intensity levels, added before
    /// quantization.
    pub noise_sigma: f64,
    /// Fraction of emitted ground-truth matches corrupted with uniform
    /// random second endpoints.
    pub outlier_fraction: f64,
    pub seed: u64,
    /// Frame offsets for which ground-truth match files are emitted.
    pub match_offsets: Vec<usize>,
    /// Pixel stride of the ground-truth match grid.
    pub match_stride: u32,
    pub g_star: InverseResponse,
    pub v_star: VignetteModel,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            frames: 400,
            width: 192,
            height: 144,
            exposure_pattern: ExposurePattern::Alternating {
                low_ms: 5.0,
                high_ms: 10.0,
            },
            motion_speed: 2.4,
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            seed: 7,
            match_offsets: vec![1, 30],
            match_stride: 8,
            g_star: InverseResponse::constrained(0.6, 0.4),
            v_star: VignetteModel::new(-0.7, 0.3, -0.1),
        }
    }
}

/// Scene radiance on a grid larger than the frame, so the sampling window
/// can translate.
#[derive(Debug, Clone)]
pub struct RadianceMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl RadianceMap {
    fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Seeded sum of random-frequency sinusoids rescaled into
    /// [0.05, 0.95]: rich gradients, no saturation, reproducible.
    fn generate(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Self {
        let components = 24;
        let waves: Vec<(f64, f64, f64, f64)> = (0..components)
            .map(|_| {
                let freq = rng.gen_range(0.004..0.09);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = rng.gen_range(0.4..1.0);
                (freq * angle.cos(), freq * angle.sin(), phase, amp)
            })
            .collect();
        let mut values = vec![0.0f64; width * height];
        for y in 0..height {
            for x in 0..width {
                let mut v = 0.0;
                for &(fx, fy, phase, amp) in &waves {
                    v += amp
                        * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
                }
                values[y * width + x] = v;
            }
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (max - min).max(f64::MIN_POSITIVE);
        for v in &mut values {
            *v = 0.05 + 0.9 * (*v - min) / span;
        }
        Self {
            width,
            height,
            values,
        }
    }
}

/// The generating parameters of a synthetic sequence.
#[derive(Debug, Clone)]
pub struct SimGroundTruth {
    pub g_star: InverseResponse,
    pub v_star: VignetteModel,
    pub exposures_ms: Vec<f64>,
    /// Per-frame integer origin of the sampling window in the radiance map.
    pub origins: Vec<(i64, i64)>,
    pub radiance: RadianceMap,
}

impl SimGroundTruth {
    /// Derive the full ground truth (schedule, motion, radiance) from a
    /// config.
    pub fn from_config(cfg: &SimConfig) -> Result<Self, Error> {
        if !cfg.g_star.is_strictly_increasing() {
            return Err(Error::NotInvertible);
        }
        let mut exposure_rng = rng_stream(cfg.seed, 2);
        let exposures_ms: Vec<f64> = match cfg.exposure_pattern {
            ExposurePattern::Constant { ms } => vec![ms; cfg.frames],
            ExposurePattern::Alternating { low_ms, high_ms } => (0..cfg.frames)
                .map(|t| if t % 2 == 0 { low_ms } else { high_ms })
                .collect(),
            ExposurePattern::RandomWalk { start_ms, max_log_step } => {
                let mut e = start_ms;
                (0..cfg.frames)
                    .map(|_| {
                        let out = e;
                        e *= exposure_rng.gen_range(-max_log_step..max_log_step).exp();
                        out
                    })
                    .collect()
            }
        };

        let origins: Vec<(i64, i64)> = (0..cfg.frames)
            .map(|t| {
                let d = cfg.motion_speed * t as f64;
                (
                    (MOTION_DIR.0 * d).round() as i64,
                    (MOTION_DIR.1 * d).round() as i64,
                )
            })
            .collect();
        let max_ox = origins.iter().map(|o| o.0).max().unwrap_or(0).max(0) as usize;
        let max_oy = origins.iter().map(|o| o.1).max().unwrap_or(0).max(0) as usize;

        let mut radiance_rng = rng_stream(cfg.seed, 1);
        let radiance = RadianceMap::generate(
            cfg.width as usize + max_ox,
            cfg.height as usize + max_oy,
            &mut radiance_rng,
        );

        Ok(Self {
            g_star: cfg.g_star,
            v_star: cfg.v_star,
            exposures_ms,
            origins,
            radiance,
        })
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Monotone lookup table realising the forward response f = g^-1.
#[derive(Debug, Clone)]
pub struct ResponseLut {
    /// g evaluated on the uniform intensity grid.
    values: Vec<f64>,
}

impl ResponseLut {
    pub fn build(g: &InverseResponse) -> Result<Self, Error> {
        let values: Vec<f64> = (0..LUT_SIZE)
            .map(|i| g.eval(i as f64 / (LUT_SIZE - 1) as f64))
            .collect();
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::NotInvertible);
        }
        Ok(Self { values })
    }

    /// Intensity M with g(M) = x, by linear interpolation between knots;
    /// x is clamped to the representable range.
    pub fn invert(&self, x: f64) -> f64 {
        let n = self.values.len();
        let first = self.values[0];
        let last = self.values[n - 1];
        if x <= first {
            return 0.0;
        }
        if x >= last {
            return 1.0;
        }
        // First knot strictly above x; its predecessor starts the segment.
        let hi = self.values.partition_point(|&v| v < x).max(1);
        let lo = hi - 1;
        let (ylo, yhi) = (self.values[lo], self.values[hi]);
        let t = (x - ylo) / (yhi - ylo);
        (lo as f64 + t) / (n - 1) as f64
    }
}

/// Forward response as a one-shot call; builds the table internally.
pub fn forward_response(g: &InverseResponse, irradiance: f64) -> Result<f64, Error> {
    Ok(ResponseLut::build(g)?.invert(irradiance))
}

fn match_file_name(a: u32, b: u32) -> String {
    format!("{a:06}_{b:06}.txt")
}

/// Path of the emitted ground-truth match file for a frame pair.
pub fn gt_match_path(dir: &Path, a: u32, b: u32) -> std::path::PathBuf {
    dir.join("gt_matches").join(match_file_name(a, b))
}

/// Render the dataset directory: frames plus ground-truth parameters and
/// exact correspondences.
pub fn render_sequence(gt: &SimGroundTruth, cfg: &SimConfig, out: &Path) -> Result<(), Error> {
    let lut = ResponseLut::build(&gt.g_star)?;
    let (w, h) = (cfg.width, cfg.height);
    let e_max = gt
        .exposures_ms
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);

    // Normalized radius per pixel is shared across frames.
    let mut radius = vec![0.0f64; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            radius[(y * w + x) as usize] = normalized_radius(x as f64, y as f64, w, h);
        }
    }

    let mut noise_rng = rng_stream(cfg.seed, 3);
    let mut frames = Vec::with_capacity(gt.exposures_ms.len());
    for (t, (&e_ms, &(ox, oy))) in gt.exposures_ms.iter().zip(&gt.origins).enumerate() {
        if ox < 0
            || oy < 0
            || ox as usize + w as usize > gt.radiance.width
            || oy as usize + h as usize > gt.radiance.height
        {
            return Err(Error::MotionOutOfBounds { frame: t });
        }
        let e_norm = e_ms / e_max;
        let mut image = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let radiance = gt
                    .radiance
                    .at(ox as usize + x as usize, oy as usize + y as usize);
                let v = gt.v_star.eval(radius[(y * w + x) as usize]);
                let m = lut.invert(e_norm * v * radiance);
                let mut level = 255.0 * m;
                if cfg.noise_sigma > 0.0 {
                    level += cfg.noise_sigma * gaussian(&mut noise_rng);
                }
                image.put_pixel(x, y, Luma([level.round().clamp(0.0, 255.0) as u8]));
            }
        }
        frames.push(FrameRecord {
            id: t as u32,
            timestamp: t as f64 / 30.0,
            exposure_ms: e_ms,
            image,
        });
    }
    write_sequence(&frames, out)?;

    // Ground truth in both TumMono-compatible and exact coefficient form.
    write_response_curve(&out.join("pcalib.txt"), &gt.g_star)?;
    let vignette_png = out.join("vignette.png");
    dataset::render_vignette_image(&gt.v_star, w, h)
        .save(&vignette_png)
        .map_err(|source| Error::Image {
            path: vignette_png,
            source,
        })?;
    let params = out.join("gt_params");
    fs::create_dir_all(&params).map_err(|e| Error::io(&params, e))?;
    write_response_curve(&params.join("response.txt"), &gt.g_star)?;
    write_vignette_coefficients(&params.join("vignette.txt"), &gt.v_star)?;
    let mut exposures = String::new();
    for e in &gt.exposures_ms {
        writeln!(exposures, "{e}").expect("writing to string");
    }
    let exposures_path = params.join("exposures.txt");
    fs::write(&exposures_path, exposures).map_err(|e| Error::io(&exposures_path, e))?;

    write_gt_matches(gt, cfg, out)
}

fn write_gt_matches(gt: &SimGroundTruth, cfg: &SimConfig, out: &Path) -> Result<(), Error> {
    let dir = out.join("gt_matches");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (w, h) = (cfg.width as i64, cfg.height as i64);
    let stride = cfg.match_stride.max(1) as i64;
    let mut offsets = cfg.match_offsets.clone();
    offsets.sort_unstable();
    offsets.dedup();

    let mut outlier_rng = rng_stream(cfg.seed, 4);
    let n = gt.origins.len();
    for &offset in &offsets {
        if offset == 0 {
            continue;
        }
        for i in 0..n.saturating_sub(offset) {
            let j = i + offset;
            let (dx, dy) = (
                gt.origins[i].0 - gt.origins[j].0,
                gt.origins[i].1 - gt.origins[j].1,
            );
            let mut text = String::new();
            let mut y1 = stride / 2;
            while y1 < h {
                let mut x1 = stride / 2;
                while x1 < w {
                    let (x2, y2) = (x1 + dx, y1 + dy);
                    if x2 >= 0 && y2 >= 0 && x2 < w && y2 < h {
                        if cfg.outlier_fraction > 0.0
                            && outlier_rng.gen_range(0.0..1.0) < cfg.outlier_fraction
                        {
                            let rx: f64 = outlier_rng.gen_range(0.0..(w - 1) as f64);
                            let ry: f64 = outlier_rng.gen_range(0.0..(h - 1) as f64);
                            writeln!(text, "{x1} {y1} {rx} {ry}").expect("writing to string");
                        } else {
                            writeln!(text, "{x1} {y1} {x2} {y2}").expect("writing to string");
                        }
                    }
                    x1 += stride;
                }
                y1 += stride;
            }
            let path = dir.join(match_file_name(i as u32, j as u32));
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// Options for the end-to-end harness.
#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Feed the pipeline the emitted exact matches instead of running the
    /// internal detector.
    pub use_gt_matches: bool,
    pub calib: CalibrationConfig,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            use_gt_matches: true,
            calib: CalibrationConfig::default(),
        }
    }
}

/// Error metrics of a full render-calibrate-compare cycle. Metrics are
/// absent when the corresponding stage was not estimable.
#[derive(Debug)]
pub struct EndToEndReport {
    pub crf_rmse: Option<f64>,
    pub vignette_rmse: Option<f64>,
    pub exposure_max_rel_err: Option<f64>,
    /// Final whole-model validation reports, one per usable pair.
    pub validation: Vec<ValidationReport>,
    pub run: CalibrationRun,
}

/// Render a dataset into a scratch directory, run the calibration pipeline
/// on it, and score the estimates against the generating parameters.
pub fn end_to_end_check(cfg: &SimConfig, opts: &CheckOptions) -> Result<EndToEndReport, Error> {
    let dir = tempfile::tempdir().map_err(|e| Error::io("<tempdir>", e))?;
    let gt = SimGroundTruth::from_config(cfg)?;
    render_sequence(&gt, cfg, dir.path())?;
    let seq = load_sequence(dir.path())?;
    let source = if opts.use_gt_matches {
        MatchSource::Files(dir.path().join("gt_matches"))
    } else {
        MatchSource::Internal
    };
    let run = pipeline::calibrate(&seq, &source, &opts.calib)?;

    let crf_rmse = run
        .crf
        .estimate
        .as_ref()
        .map(|g| evaluate_crf(g, &ResponseCurve::from_response(&gt.g_star)));
    let vignette_rmse = run
        .vignette
        .estimate
        .as_ref()
        .map(|v| evaluate_vignette_model(v, &gt.v_star));
    let exposure_max_rel_err = run
        .final_reports
        .iter()
        .map(|r| r.rel_error)
        .fold(None, |acc: Option<f64>, e| {
            Some(acc.map_or(e, |a| a.max(e)))
        });

    Ok(EndToEndReport {
        crf_rmse,
        vignette_rmse,
        exposure_max_rel_err,
        validation: run.final_reports.clone(),
        run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn lut_inverts_identity() {
        let lut = ResponseLut::build(&InverseResponse::identity()).unwrap();
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            assert!((lut.invert(x) - x).abs() < 2e-3);
        }
    }

    #[test]
    fn lut_inverts_pure_quadratic_as_square_root() {
        let g = InverseResponse::constrained(0.0, 1.0);
        let lut = ResponseLut::build(&g).unwrap();
        for i in 0..1024 {
            let x = i as f64 / 1023.0;
            assert!(
                (lut.invert(x) - x.sqrt()).abs() < 2e-3,
                "x = {x}: {} vs {}",
                lut.invert(x),
                x.sqrt()
            );
        }
    }

    #[test]
    fn lut_round_trip_bound_holds_on_grid() {
        let g = InverseResponse::constrained(0.5, 0.5);
        let lut = ResponseLut::build(&g).unwrap();
        for i in 0..1024 {
            let x = i as f64 / 1023.0;
            assert!((g.eval(lut.invert(x)) - x).abs() < 2e-3);
        }
        // Hand-solved point: g(0.5) = 0.375.
        assert!((lut.invert(0.375) - 0.5).abs() < 2e-3);
    }

    #[test]
    fn decreasing_response_is_rejected() {
        // Slope goes negative past M = 5/6.
        let g = InverseResponse::constrained(2.5, -1.5);
        assert!(matches!(
            ResponseLut::build(&g),
            Err(Error::NotInvertible)
        ));
    }

    fn tiny_config() -> SimConfig {
        SimConfig {
            frames: 8,
            width: 48,
            height: 36,
            match_offsets: vec![1, 3],
            match_stride: 6,
            ..SimConfig::default()
        }
    }

    #[test]
    fn static_constant_scene_renders_identical_frames() {
        let cfg = SimConfig {
            exposure_pattern: ExposurePattern::Constant { ms: 5.0 },
            motion_speed: 0.0,
            ..tiny_config()
        };
        let gt = SimGroundTruth::from_config(&cfg).unwrap();
        let dir = tempdir().unwrap();
        render_sequence(&gt, &cfg, dir.path()).unwrap();
        let seq = load_sequence(dir.path()).unwrap();
        let first = seq.frames[0].image.as_raw().clone();
        for f in &seq.frames {
            assert_eq!(f.image.as_raw(), &first);
        }
    }

    #[test]
    fn alternating_exposures_hit_the_gate() {
        let cfg = tiny_config();
        let gt = SimGroundTruth::from_config(&cfg).unwrap();
        for pair in gt.exposures_ms.windows(2) {
            let k = pair[0] / pair[1];
            assert!(k < 0.92 || k > 1.08);
            assert!((k - 0.5).abs() < 1e-12 || (k - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rendered_pixels_match_direct_evaluation() {
        use rand::{Rng, SeedableRng};
        let cfg = SimConfig {
            g_star: InverseResponse::identity(),
            v_star: VignetteModel::flat(),
            ..tiny_config()
        };
        let gt = SimGroundTruth::from_config(&cfg).unwrap();
        let dir = tempdir().unwrap();
        render_sequence(&gt, &cfg, dir.path()).unwrap();
        let seq = load_sequence(dir.path()).unwrap();
        let e_max = gt.exposures_ms.iter().cloned().fold(f64::MIN, f64::max);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let t = rng.gen_range(0..cfg.frames);
            let x = rng.gen_range(0..cfg.width);
            let y = rng.gen_range(0..cfg.height);
            let (ox, oy) = gt.origins[t];
            let radiance = gt
                .radiance
                .at(ox as usize + x as usize, oy as usize + y as usize);
            let expected =
                (255.0 * (gt.exposures_ms[t] / e_max * radiance).clamp(0.0, 1.0)).round() as u8;
            let got = seq.frames[t].image.get_pixel(x, y).0[0];
            assert!(
                (got as i32 - expected as i32).abs() <= 1,
                "frame {t} pixel ({x},{y}): {got} vs {expected}"
            );
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = SimConfig {
            noise_sigma: 1.0,
            outlier_fraction: 0.1,
            ..tiny_config()
        };
        let da = tempdir().unwrap();
        let db = tempdir().unwrap();
        let gta = SimGroundTruth::from_config(&cfg).unwrap();
        let gtb = SimGroundTruth::from_config(&cfg).unwrap();
        render_sequence(&gta, &cfg, da.path()).unwrap();
        render_sequence(&gtb, &cfg, db.path()).unwrap();
        for entry in walk_files(da.path()) {
            let rel = entry.strip_prefix(da.path()).unwrap();
            let a = std::fs::read(&entry).unwrap();
            let b = std::fs::read(db.path().join(rel)).unwrap();
            assert_eq!(a, b, "file {} differs", rel.display());
        }
    }

    fn walk_files(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    out.push(path);
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn raising_exposure_never_darkens_a_pixel() {
        let base = tiny_config();
        let gt = SimGroundTruth::from_config(&base).unwrap();
        let dir_a = tempdir().unwrap();
        render_sequence(&gt, &base, dir_a.path()).unwrap();
        let seq_a = load_sequence(dir_a.path()).unwrap();

        // Same schedule with one frame's exposure bumped.
        let mut gt_b = gt.clone();
        gt_b.exposures_ms[3] *= 1.5;
        let dir_b = tempdir().unwrap();
        render_sequence(&gt_b, &base, dir_b.path()).unwrap();
        let seq_b = load_sequence(dir_b.path()).unwrap();

        let a = seq_a.frames[3].image.as_raw();
        let b = seq_b.frames[3].image.as_raw();
        for (pa, pb) in a.iter().zip(b) {
            assert!(pb >= pa, "exposure increase darkened a pixel");
        }
    }

    #[test]
    fn gt_matches_index_the_same_texel() {
        let cfg = tiny_config();
        let gt = SimGroundTruth::from_config(&cfg).unwrap();
        let dir = tempdir().unwrap();
        render_sequence(&gt, &cfg, dir.path()).unwrap();
        for offset in [1usize, 3] {
            for i in 0..cfg.frames - offset {
                let j = i + offset;
                let path = gt_match_path(dir.path(), i as u32, j as u32);
                let text = std::fs::read_to_string(&path).unwrap();
                for line in text.lines() {
                    let f: Vec<f64> = line
                        .split_whitespace()
                        .map(|t| t.parse().unwrap())
                        .collect();
                    let (oi, oj) = (gt.origins[i], gt.origins[j]);
                    assert_eq!(
                        (f[0] as i64 + oi.0, f[1] as i64 + oi.1),
                        (f[2] as i64 + oj.0, f[3] as i64 + oj.1)
                    );
                }
            }
        }
    }
}
