//! Batch frontend: simulate, calibrate, evaluate, correct.
//!
//! Exit codes: 0 success, 1 on I/O or configuration errors, 2 when the
//! sequence does not support an estimate (no exposure-gated pairs, no
//! radial motion, failed validation).

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::{ImageBuffer, Luma};
use photocal::dataset::{
    correct_frame, load_response_curve, load_sequence, load_vignette_coefficients,
    load_vignette_image, write_estimates,
};
use photocal::exposure::ValidationReport;
use photocal::pipeline::{calibrate, CalibrationConfig, CalibrationRun, MatchSource};
use photocal::response::{evaluate_crf, CrfPairGate, InverseResponse};
use photocal::sim::{render_sequence, ExposurePattern, SimConfig, SimGroundTruth};
use photocal::solver::SolverKind;
use photocal::vignette::{
    evaluate_vignette_image, evaluate_vignette_model, VignetteModel, VignettePairing,
};
use photocal::{Error, MatcherConfig, ResponseCurve};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser, Debug)]
#[command(name = "photocal", version, about = "Sequential photometric calibration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with known ground truth.
    Simulate(SimulateArgs),
    /// Estimate inverse response and vignette from a sequence.
    Calibrate(CalibrateArgs),
    /// Score estimates against ground truth.
    Evaluate(EvaluateArgs),
    /// Write photometrically corrected frames.
    Correct(CorrectArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SolverChoice {
    L2,
    L1,
    Huber,
}

impl SolverChoice {
    fn to_kind(self) -> SolverKind {
        match self {
            SolverChoice::L2 => SolverKind::l2(),
            SolverChoice::L1 => SolverKind::l1(),
            SolverChoice::Huber => SolverKind::huber(),
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum MatchSourceChoice {
    /// Built-in corner detector and ZNCC matcher.
    Internal,
    /// Per-pair text files (see --matches-dir).
    Files,
}

#[derive(Args, Debug)]
struct EstimatorFlags {
    /// Frames per response-estimation window.
    #[arg(long, default_value_t = 200)]
    crf_window: usize,
    /// Lower exposure-ratio gate; pairs below qualify.
    #[arg(long, default_value_t = 0.92)]
    ratio_low: f64,
    /// Upper exposure-ratio gate; pairs above qualify.
    #[arg(long, default_value_t = 1.08)]
    ratio_high: f64,
    /// Max radial displacement for response samples.
    #[arg(long, default_value_t = 0.02)]
    max_radial_disp: f64,
    /// Minimum surviving samples for a pair to contribute.
    #[arg(long, default_value_t = 5)]
    min_samples: usize,
    /// Frame offset between the members of a vignette pair.
    #[arg(long, default_value_t = 30)]
    vignette_offset: usize,
    /// Frames per vignette-estimation window.
    #[arg(long, default_value_t = 400)]
    vignette_window: usize,
    /// Minimum radial displacement for vignette samples.
    #[arg(long, default_value_t = 0.2)]
    min_radial_disp: f64,
    /// Least-squares flavour for the vignette solve.
    #[arg(long, value_enum, default_value_t = SolverChoice::Huber)]
    vignette_solver: SolverChoice,
    /// Relative tolerance for exposure-ratio validation.
    #[arg(long, default_value_t = 0.02)]
    exposure_tol: f64,
    /// Correspondence provider.
    #[arg(long, value_enum, default_value_t = MatchSourceChoice::Internal)]
    match_source: MatchSourceChoice,
    /// Match-file directory for --match-source files
    /// (default <seq>/gt_matches).
    #[arg(long)]
    matches_dir: Option<PathBuf>,
    /// Cap on detected corners per frame.
    #[arg(long, default_value_t = 400)]
    max_features: usize,
    /// Correlation patch half-width.
    #[arg(long, default_value_t = 7)]
    patch_radius: usize,
    /// Fewer surviving matches flag the pair as unusable.
    #[arg(long, default_value_t = 10)]
    min_matches: usize,
    /// Orientation-filter grid, e.g. 4x4.
    #[arg(long, default_value = "4x4")]
    grid: String,
    /// Orientation-histogram bin count.
    #[arg(long, default_value_t = 36)]
    bins: usize,
    /// Force the block orientation filter on or off (default: on for the
    /// internal matcher, off for pre-filtered match files).
    #[arg(long)]
    orientation_filter: Option<bool>,
}

impl EstimatorFlags {
    fn parse_grid(&self) -> Result<(usize, usize), String> {
        let (gx, gy) = self
            .grid
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("bad --grid {:?}, expected GXxGY", self.grid))?;
        let gx = gx.parse().map_err(|e| format!("bad --grid: {e}"))?;
        let gy = gy.parse().map_err(|e| format!("bad --grid: {e}"))?;
        Ok((gx, gy))
    }

    fn to_config(&self) -> Result<CalibrationConfig, String> {
        Ok(CalibrationConfig {
            crf_gate: CrfPairGate {
                ratio_low: self.ratio_low,
                ratio_high: self.ratio_high,
                window: self.crf_window,
                max_radial_disp: self.max_radial_disp,
                min_samples_per_pair: self.min_samples,
            },
            pairing: VignettePairing {
                offset: self.vignette_offset,
                window: self.vignette_window,
                min_radial_disp: self.min_radial_disp,
            },
            solver: self.vignette_solver.to_kind(),
            exposure_tol: self.exposure_tol,
            filter_grid: self.parse_grid()?,
            filter_bins: self.bins,
            apply_orientation_filter: self
                .orientation_filter
                .unwrap_or(self.match_source == MatchSourceChoice::Internal),
            matcher: MatcherConfig {
                max_features: self.max_features,
                patch_radius: self.patch_radius,
                min_matches: self.min_matches,
                ..MatcherConfig::default()
            },
        })
    }

    fn match_source(&self, seq_dir: &Path) -> MatchSource {
        match self.match_source {
            MatchSourceChoice::Internal => MatchSource::Internal,
            MatchSourceChoice::Files => MatchSource::Files(
                self.matches_dir
                    .clone()
                    .unwrap_or_else(|| seq_dir.join("gt_matches")),
            ),
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    frames: usize,
    /// Frame size as WxH.
    #[arg(long, default_value = "192x144")]
    size: String,
    /// Exposure schedule: constant, alternating or walk.
    #[arg(long, default_value = "alternating")]
    pattern: String,
    /// Low / constant / walk-start exposure in milliseconds.
    #[arg(long, default_value_t = 5.0)]
    exp_low: f64,
    /// High exposure for the alternating pattern.
    #[arg(long, default_value_t = 10.0)]
    exp_high: f64,
    /// Max log-step per frame for the walk pattern.
    #[arg(long, default_value_t = 0.3)]
    walk_step: f64,
    /// Window translation in pixels per frame.
    #[arg(long, default_value_t = 2.4)]
    motion_speed: f64,
    /// Gaussian intensity noise before quantization.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Fraction of ground-truth matches corrupted.
    #[arg(long, default_value_t = 0.0)]
    outlier_fraction: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Comma-separated offsets for ground-truth match emission.
    #[arg(long, default_value = "1,30")]
    match_offsets: String,
    /// Pixel stride of the ground-truth match grid.
    #[arg(long, default_value_t = 8)]
    match_stride: u32,
    /// Generating inverse-response coefficients c1,c2.
    #[arg(long, default_value = "0.6,0.4")]
    crf: String,
    /// Generating vignette coefficients v1,v2,v3.
    #[arg(long, default_value = "-0.7,0.3,-0.1", allow_hyphen_values = true)]
    vignette: String,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Sequence directory (images/ + times.txt).
    sequence: PathBuf,
    /// Output directory for estimates and the run report
    /// (default <seq>/calib).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: EstimatorFlags,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Sequence directory with ground truth (pcalib.txt, vignette.png or
    /// gt_params/).
    sequence: PathBuf,
    /// Directory holding pcalib_est.txt and vignette_est.txt
    /// (default <seq>/calib).
    #[arg(long)]
    estimates: Option<PathBuf>,
    #[command(flatten)]
    flags: EstimatorFlags,
}

#[derive(Args, Debug)]
struct CorrectArgs {
    /// Sequence directory.
    sequence: PathBuf,
    /// Directory holding pcalib_est.txt and vignette_est.txt
    /// (default <seq>/calib).
    #[arg(long)]
    estimates: Option<PathBuf>,
    /// Output directory for 16-bit corrected frames.
    #[arg(long)]
    out: PathBuf,
    /// Additionally divide by the exposure time in seconds.
    #[arg(long, default_value_t = false)]
    divide_exposure: bool,
}

fn parse_floats(s: &str, n: usize, what: &str) -> Result<Vec<f64>, String> {
    let values: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("bad {what} {s:?}: {e}"))?;
    if values.len() != n {
        return Err(format!("{what} needs {n} comma-separated values"));
    }
    Ok(values)
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("bad --size {s:?}, expected WxH"))?;
    Ok((
        w.parse().map_err(|e| format!("bad --size: {e}"))?,
        h.parse().map_err(|e| format!("bad --size: {e}"))?,
    ))
}

fn run_simulate(args: &SimulateArgs) -> Result<(), Error> {
    let invalid = |msg: String| Error::InvalidData {
        path: PathBuf::from("<args>"),
        msg,
    };
    let (width, height) = parse_size(&args.size).map_err(invalid)?;
    let crf = parse_floats(&args.crf, 2, "--crf").map_err(invalid)?;
    let vig = parse_floats(&args.vignette, 3, "--vignette").map_err(invalid)?;
    let offsets: Vec<usize> = args
        .match_offsets
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| invalid(format!("bad --match-offsets: {e}")))?;
    let exposure_pattern = match args.pattern.as_str() {
        "constant" => ExposurePattern::Constant { ms: args.exp_low },
        "alternating" => ExposurePattern::Alternating {
            low_ms: args.exp_low,
            high_ms: args.exp_high,
        },
        "walk" => ExposurePattern::RandomWalk {
            start_ms: args.exp_low,
            max_log_step: args.walk_step,
        },
        other => return Err(invalid(format!("unknown --pattern {other:?}"))),
    };

    let cfg = SimConfig {
        frames: args.frames,
        width,
        height,
        exposure_pattern,
        motion_speed: args.motion_speed,
        noise_sigma: args.noise_sigma,
        outlier_fraction: args.outlier_fraction,
        seed: args.seed,
        match_offsets: offsets,
        match_stride: args.match_stride,
        g_star: InverseResponse::constrained(crf[0], crf[1]),
        v_star: VignetteModel::new(vig[0], vig[1], vig[2]),
    };
    eprintln!("simulate config: {cfg:?}");
    let gt = SimGroundTruth::from_config(&cfg)?;
    render_sequence(&gt, &cfg, &args.out)?;
    println!("wrote {} frames to {}", cfg.frames, args.out.display());
    Ok(())
}

fn report_text(run: &CalibrationRun) -> String {
    let mut text = String::new();
    let stage = |name: &str, est: Option<String>, failure: &Option<String>, s: &photocal::pipeline::StageStats| {
        let mut t = String::new();
        writeln!(t, "{name}_estimate\t{}", est.unwrap_or_else(|| "none".into())).unwrap();
        if let Some(f) = failure {
            writeln!(t, "{name}_failure\t{f}").unwrap();
        }
        writeln!(t, "{name}_rounds_attempted\t{}", s.rounds_attempted).unwrap();
        writeln!(t, "{name}_rounds_accepted\t{}", s.rounds_accepted).unwrap();
        writeln!(t, "{name}_pairs_used\t{}/{}", s.pairs_used, s.pairs_considered).unwrap();
        writeln!(t, "{name}_rows\t{}", s.rows).unwrap();
        t
    };
    text += &stage(
        "crf",
        run.crf
            .estimate
            .map(|g| format!("c1={} c2={}", g.c1, g.c2)),
        &run.crf.failure,
        &run.crf.stats,
    );
    text += &stage(
        "vignette",
        run.vignette
            .estimate
            .map(|v| format!("v1={} v2={} v3={}", v.v1, v.v2, v.v3)),
        &run.vignette.failure,
        &run.vignette.stats,
    );
    writeln!(text, "validation_reports\t{}", run.final_reports.len()).unwrap();
    let accepted = run.final_reports.iter().filter(|r| r.accepted).count();
    writeln!(text, "validation_accepted\t{accepted}").unwrap();
    writeln!(text, "stage\tframe_a\tframe_b\tk_meta\tk_hat\trel_error\tverdict").unwrap();
    for r in &run.final_reports {
        writeln!(text, "{}", r.tsv()).unwrap();
    }
    text
}

fn run_calibrate(args: &CalibrateArgs) -> Result<(), Error> {
    let started = Instant::now();
    let cfg = args.flags.to_config().map_err(|msg| Error::InvalidData {
        path: PathBuf::from("<args>"),
        msg,
    })?;
    eprintln!("calibrate config: {cfg:?}");
    let seq = load_sequence(&args.sequence)?;
    let source = args.flags.match_source(&args.sequence);
    let run = calibrate(&seq, &source, &cfg)?;

    for r in &run.crf.stats.round_reports {
        eprintln!("round\t{}", r.tsv());
    }
    for r in &run.vignette.stats.round_reports {
        eprintln!("round\t{}", r.tsv());
    }
    for r in &run.final_reports {
        eprintln!("final\t{}", r.tsv());
    }

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.sequence.join("calib"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let report_path = out.join("calibration_report.txt");
    std::fs::write(&report_path, report_text(&run)).map_err(|e| Error::io(&report_path, e))?;
    eprintln!("elapsed: {:.3}s", started.elapsed().as_secs_f64());

    match (run.crf.estimate, run.vignette.estimate) {
        (Some(g), Some(v)) => {
            write_estimates(&g, &v, (seq.width, seq.height), &out)?;
            println!("estimates written to {}", out.display());
            Ok(())
        }
        (None, _) => Err(Error::NotEstimable {
            what: "response",
            reason: run.crf.failure.unwrap_or_default(),
        }),
        (_, None) => Err(Error::NotEstimable {
            what: "vignette",
            reason: run.vignette.failure.unwrap_or_default(),
        }),
    }
}

/// Sample-space RMSE between two curves on the shared 256-point grid.
fn curve_rmse(a: &ResponseCurve, b: &ResponseCurve) -> f64 {
    let sum: f64 = a
        .samples
        .iter()
        .zip(&b.samples)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (sum / 256.0).sqrt()
}

fn run_evaluate(args: &EvaluateArgs) -> Result<(), Error> {
    let cfg = args.flags.to_config().map_err(|msg| Error::InvalidData {
        path: PathBuf::from("<args>"),
        msg,
    })?;
    eprintln!("evaluate config: {cfg:?}");
    let est_dir = args
        .estimates
        .clone()
        .unwrap_or_else(|| args.sequence.join("calib"));

    let est_curve = load_response_curve(&est_dir.join("pcalib_est.txt"))?;
    let est_vignette = load_vignette_coefficients(&est_dir.join("vignette_est.txt"))?;
    let gt_curve = load_response_curve(&args.sequence.join("pcalib.txt"))?;
    if !est_curve.is_non_decreasing() {
        eprintln!("warning: estimated response curve is not non-decreasing");
    }

    // Exact quadratic curves are evaluated through their coefficients so the
    // numbers agree with the in-memory pipeline to machine precision.
    let est_g = InverseResponse::fit_from_curve(&est_curve, 1e-9);
    let crf_rmse = match est_g {
        Some(g) => evaluate_crf(&g, &gt_curve),
        None => curve_rmse(&est_curve, &gt_curve),
    };

    let gt_coeff_path = args.sequence.join("gt_params").join("vignette.txt");
    let vignette_rmse = if gt_coeff_path.exists() {
        let gt_v = load_vignette_coefficients(&gt_coeff_path)?;
        evaluate_vignette_model(&est_vignette, &gt_v)
    } else {
        let seq_probe = load_sequence(&args.sequence)?;
        let gt_img = load_vignette_image(
            &args.sequence.join("vignette.png"),
            Some((seq_probe.width, seq_probe.height)),
        )?;
        evaluate_vignette_image(&est_vignette, &gt_img)
    };

    println!("crf_rmse\t{crf_rmse}");
    println!("vignette_rmse\t{vignette_rmse}");

    // Exposure validation with the loaded estimates, when the estimated
    // curve is polynomial (always true for this tool's own output).
    let mut reports: Vec<ValidationReport> = Vec::new();
    if let Some(g) = est_g {
        let seq = load_sequence(&args.sequence)?;
        let source = args.flags.match_source(&args.sequence);
        reports = photocal::pipeline::revalidate(&seq, &source, &cfg, &g, Some(&est_vignette))?;
    } else {
        eprintln!("estimated curve is not quadratic; skipping exposure validation");
    }
    let max_rel = reports.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    println!("exposure_rel_err_max\t{max_rel}");
    println!("stage\tframe_a\tframe_b\tk_meta\tk_hat\trel_error\tverdict");
    for r in &reports {
        println!("{}", r.tsv());
    }
    Ok(())
}

fn run_correct(args: &CorrectArgs) -> Result<(), Error> {
    let est_dir = args
        .estimates
        .clone()
        .unwrap_or_else(|| args.sequence.join("calib"));
    let est_curve = load_response_curve(&est_dir.join("pcalib_est.txt"))?;
    let g = InverseResponse::fit_from_curve(&est_curve, 1e-9).ok_or_else(|| Error::InvalidData {
        path: est_dir.join("pcalib_est.txt"),
        msg: "estimated curve is not a constrained quadratic".into(),
    })?;
    let v = load_vignette_coefficients(&est_dir.join("vignette_est.txt"))?;
    let seq = load_sequence(&args.sequence)?;
    eprintln!(
        "correct config: estimates={} divide_exposure={} frames={}",
        est_dir.display(),
        args.divide_exposure,
        seq.len()
    );

    // Pass 1: global scale so every corrected frame shares one mapping.
    let mut max_value = 0.0f64;
    for frame in &seq.frames {
        let values = correct_frame(frame, &g, &v, args.divide_exposure);
        max_value = values.iter().cloned().fold(max_value, f64::max);
    }
    if max_value <= 0.0 {
        return Err(Error::InvalidData {
            path: args.sequence.clone(),
            msg: "corrected sequence is identically zero".into(),
        });
    }
    let scale = 65535.0 / max_value;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for frame in &seq.frames {
        let values = correct_frame(frame, &g, &v, args.divide_exposure);
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(seq.width, seq.height, |x, y| {
                let v = values[(y * seq.width + x) as usize] * scale;
                Luma([v.round().clamp(0.0, 65535.0) as u16])
            });
        let path = args.out.join(format!("{:06}.png", frame.id));
        img.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
    }
    let scale_path = args.out.join("scale.txt");
    std::fs::write(&scale_path, format!("{scale:.16e}\n"))
        .map_err(|e| Error::io(&scale_path, e))?;
    println!(
        "wrote {} corrected frames to {} (scale {scale})",
        seq.len(),
        args.out.display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate(args) => run_simulate(&args),
        Command::Calibrate(args) => run_calibrate(&args),
        Command::Evaluate(args) => run_evaluate(&args),
        Command::Correct(args) => run_correct(&args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; usage problems are config errors.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err @ Error::NotEstimable { .. }) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
