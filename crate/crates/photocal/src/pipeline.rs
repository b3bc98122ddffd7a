//! Windowed calibration scan over a sequence.
//!
//! Frames are processed in arrival order. The response stage scans
//! exposure-gated consecutive pairs in windows of `crf_gate.window` frames,
//! solving one constrained system per window; the vignette stage then scans
//! offset pairs in windows of `pairing.window` frames with the accepted
//! response in hand. Each window ("round") is screened by re-estimating the
//! pair exposure ratios from the calibrated intensities, and the accepted
//! rounds are averaged in coefficient space.

use crate::dataset::Sequence;
use crate::exposure::{
    aggregate_responses, aggregate_vignettes, estimate_exposure_ratio, validate,
    ValidationReport, ValidationStage, DEFAULT_EXPOSURE_TOL,
};
use crate::matching::{self, MatchSet, MatcherConfig};
use crate::response::{build_crf_rows, estimate_crf, select_crf_pairs, CrfPairGate, InverseResponse};
use crate::vignette::{
    build_vignette_rows, estimate_vignette, select_vignette_pairs, VignetteModel, VignettePairing,
};
use crate::solver::SolverKind;
use crate::Error;
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Everything the calibration scan needs to know.
#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub crf_gate: CrfPairGate,
    pub pairing: VignettePairing,
    pub solver: SolverKind,
    pub exposure_tol: f64,
    pub filter_grid: (usize, usize),
    pub filter_bins: usize,
    /// Run the block orientation filter on provider output. Externally
    /// supplied match files are expected to arrive outlier-filtered, so the
    /// file source disables this by default at the CLI level.
    pub apply_orientation_filter: bool,
    pub matcher: MatcherConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            crf_gate: CrfPairGate::default(),
            pairing: VignettePairing::default(),
            solver: SolverKind::huber(),
            exposure_tol: DEFAULT_EXPOSURE_TOL,
            filter_grid: (4, 4),
            filter_bins: 36,
            apply_orientation_filter: true,
            matcher: MatcherConfig::default(),
        }
    }
}

/// Where correspondences come from.
#[derive(Debug, Clone)]
pub enum MatchSource {
    /// Built-in corner detector and patch matcher.
    Internal,
    /// Per-pair text files `<a>_<b>.txt` in a directory (the simulator's
    /// gt_matches layout, or any external pipeline's output).
    Files(PathBuf),
}

impl MatchSource {
    fn pair_matches(
        &self,
        seq: &Sequence,
        ia: usize,
        ib: usize,
        cfg: &CalibrationConfig,
    ) -> Result<MatchSet, Error> {
        let (a, b) = (&seq.frames[ia], &seq.frames[ib]);
        match self {
            MatchSource::Internal => matching::detect_and_match(a, b, &cfg.matcher),
            MatchSource::Files(dir) => {
                let path = dir.join(format!("{:06}_{:06}.txt", a.id, b.id));
                if !path.exists() {
                    return Ok(MatchSet {
                        pair: (a.id, b.id),
                        width: seq.width,
                        height: seq.height,
                        exposure_ratio: a.exposure_ms / b.exposure_ms,
                        matches: Vec::new(),
                        insufficient: true,
                    });
                }
                let loaded = matching::load_matches(&path, a, b)?;
                Ok(loaded.set)
            }
        }
    }
}

/// Counters for one estimation stage.
#[derive(Debug, Clone, Default)]
pub struct StageStats {
    pub rounds_attempted: usize,
    pub rounds_accepted: usize,
    pub pairs_considered: usize,
    /// Pairs whose provider returned an insufficient (empty-flagged) set.
    pub pairs_empty_flagged: usize,
    pub pairs_used: usize,
    pub rows: usize,
    /// Per-pair screening reports from every attempted round.
    pub round_reports: Vec<ValidationReport>,
}

/// Result of one estimation stage.
#[derive(Debug, Clone)]
pub struct StageOutcome<T> {
    pub estimate: Option<T>,
    /// Why there is no estimate, when there is none.
    pub failure: Option<String>,
    pub stats: StageStats,
}

impl<T> StageOutcome<T> {
    fn not_estimable(reason: impl Into<String>, stats: StageStats) -> Self {
        Self {
            estimate: None,
            failure: Some(reason.into()),
            stats,
        }
    }
}

/// Full calibration output.
#[derive(Debug, Clone)]
pub struct CalibrationRun {
    pub crf: StageOutcome<InverseResponse>,
    pub vignette: StageOutcome<VignetteModel>,
    /// Whole-model validation over every usable pair, computed with the
    /// final aggregated estimates.
    pub final_reports: Vec<ValidationReport>,
}

/// The round verdict is the median-error report: accepted means at least
/// half of the round's pairs validated.
fn round_summary(reports: &[ValidationReport]) -> Option<ValidationReport> {
    if reports.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| {
        reports[a]
            .rel_error
            .partial_cmp(&reports[b].rel_error)
            .expect("finite errors")
    });
    Some(reports[order[(reports.len() - 1) / 2]])
}

fn maybe_filter(ms: MatchSet, cfg: &CalibrationConfig) -> MatchSet {
    if cfg.apply_orientation_filter && !ms.is_empty() {
        matching::block_orientation_filter(&ms, cfg.filter_grid, cfg.filter_bins)
    } else {
        ms
    }
}

/// Group frame-id pairs into rounds of `window` frames by the first frame's
/// position in the sequence.
fn rounds_of(
    seq: &Sequence,
    pairs: &[(u32, u32)],
    window: usize,
) -> BTreeMap<usize, Vec<(usize, usize)>> {
    let mut rounds: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for &(a, b) in pairs {
        let (ia, ib) = match (seq.index_of(a), seq.index_of(b)) {
            (Some(ia), Some(ib)) => (ia, ib),
            _ => continue,
        };
        rounds.entry(ia / window).or_default().push((ia, ib));
    }
    rounds
}

fn crf_stage(
    seq: &Sequence,
    source: &MatchSource,
    cfg: &CalibrationConfig,
) -> Result<StageOutcome<InverseResponse>, Error> {
    let gate = &cfg.crf_gate;
    let pairs = select_crf_pairs(seq, gate);
    let mut stats = StageStats::default();
    if pairs.is_empty() {
        return Ok(StageOutcome::not_estimable(
            "no exposure-gated pairs found",
            stats,
        ));
    }

    let mut estimates = Vec::new();
    let mut summaries = Vec::new();
    for (_, round_pairs) in rounds_of(seq, &pairs, gate.window) {
        stats.rounds_attempted += 1;
        let mut rows = Vec::new();
        let mut used_sets: Vec<MatchSet> = Vec::new();
        for (ia, ib) in round_pairs {
            stats.pairs_considered += 1;
            let ms = source.pair_matches(seq, ia, ib, cfg)?;
            if ms.insufficient {
                stats.pairs_empty_flagged += 1;
                continue;
            }
            let ms = maybe_filter(ms, cfg);
            let pair_rows = build_crf_rows(&ms, gate);
            if pair_rows.len() < gate.min_samples_per_pair {
                continue;
            }
            stats.pairs_used += 1;
            rows.extend(pair_rows);
            used_sets.push(ms);
        }
        if rows.is_empty() {
            continue;
        }
        stats.rows += rows.len();
        let est = estimate_crf(&rows)?;
        if est.rank_deficient {
            continue;
        }

        // Screen the round: recompute each pair's exposure ratio with the
        // vignette ignored, over the small-radial matches the system used.
        let mut reports = Vec::new();
        for ms in &used_sets {
            let subset = ms.filtered(|m| m.radial_displacement() <= gate.max_radial_disp);
            let Ok(k_hat) = estimate_exposure_ratio(&subset, &est.response, None) else {
                continue;
            };
            reports.push(validate(
                ms.pair,
                k_hat,
                ms.exposure_ratio,
                cfg.exposure_tol,
                ValidationStage::CrfOnly,
            ));
        }
        stats.round_reports.extend(reports.iter().copied());
        let Some(summary) = round_summary(&reports) else {
            continue;
        };
        if summary.accepted {
            stats.rounds_accepted += 1;
        }
        estimates.push(est.response);
        summaries.push(summary);
    }

    if estimates.is_empty() {
        return Ok(StageOutcome::not_estimable(
            "no window produced a usable system",
            stats,
        ));
    }
    match aggregate_responses(&estimates, &summaries) {
        Ok(response) => Ok(StageOutcome {
            estimate: Some(response),
            failure: None,
            stats,
        }),
        Err(Error::ValidationFailed) => Ok(StageOutcome::not_estimable(
            "no response round passed exposure validation",
            stats,
        )),
        Err(other) => Err(other),
    }
}

fn vignette_stage(
    seq: &Sequence,
    source: &MatchSource,
    cfg: &CalibrationConfig,
    g: &InverseResponse,
) -> Result<StageOutcome<VignetteModel>, Error> {
    let pairing = &cfg.pairing;
    let pairs = select_vignette_pairs(seq, pairing);
    let mut stats = StageStats::default();
    if pairs.is_empty() {
        return Ok(StageOutcome::not_estimable(
            format!(
                "sequence of {} frames yields no pairs at offset {}",
                seq.len(),
                pairing.offset
            ),
            stats,
        ));
    }

    let mut estimates = Vec::new();
    let mut summaries = Vec::new();
    for (_, round_pairs) in rounds_of(seq, &pairs, pairing.window) {
        stats.rounds_attempted += 1;
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        let mut used_sets: Vec<MatchSet> = Vec::new();
        for (ia, ib) in round_pairs {
            stats.pairs_considered += 1;
            let ms = source.pair_matches(seq, ia, ib, cfg)?;
            if ms.insufficient {
                stats.pairs_empty_flagged += 1;
                continue;
            }
            let ms = maybe_filter(ms, cfg);
            let (pair_rows, pair_rhs) = build_vignette_rows(&ms, g, pairing);
            if pair_rows.is_empty() {
                continue;
            }
            stats.pairs_used += 1;
            rows.extend(pair_rows);
            rhs.extend(pair_rhs);
            used_sets.push(ms);
        }
        if rows.len() < 3 {
            continue;
        }
        stats.rows += rows.len();
        let est = match estimate_vignette(&rows, &rhs, &cfg.solver) {
            Ok(est) => est,
            Err(Error::NotEstimable { .. }) => continue,
            Err(other) => return Err(other),
        };
        if est.rank_deficient {
            continue;
        }

        // Screen the round with the full model on the large-radial matches.
        let mut reports = Vec::new();
        for ms in &used_sets {
            let subset = ms.filtered(|m| m.radial_displacement() >= pairing.min_radial_disp);
            let Ok(k_hat) = estimate_exposure_ratio(&subset, g, Some(&est.model)) else {
                continue;
            };
            reports.push(validate(
                ms.pair,
                k_hat,
                ms.exposure_ratio,
                cfg.exposure_tol,
                ValidationStage::CrfAndVignette,
            ));
        }
        stats.round_reports.extend(reports.iter().copied());
        let Some(summary) = round_summary(&reports) else {
            continue;
        };
        if summary.accepted {
            stats.rounds_accepted += 1;
        }
        estimates.push(est.model);
        summaries.push(summary);
    }

    if estimates.is_empty() {
        return Ok(StageOutcome::not_estimable(
            "no window accumulated three usable rows",
            stats,
        ));
    }
    match aggregate_vignettes(&estimates, &summaries) {
        Ok(model) => Ok(StageOutcome {
            estimate: Some(model),
            failure: None,
            stats,
        }),
        Err(Error::ValidationFailed) => Ok(StageOutcome::not_estimable(
            "no vignette round passed exposure validation",
            stats,
        )),
        Err(other) => Err(other),
    }
}

/// Validate every usable pair against the metadata using a given set of
/// estimates (vignette included when available). Used for the final pass of
/// a calibration run and for re-scoring estimates loaded from disk.
pub fn revalidate(
    seq: &Sequence,
    source: &MatchSource,
    cfg: &CalibrationConfig,
    g: &InverseResponse,
    v: Option<&VignetteModel>,
) -> Result<Vec<ValidationReport>, Error> {
    let mut reports = Vec::new();
    let stage = if v.is_some() {
        ValidationStage::CrfAndVignette
    } else {
        ValidationStage::CrfOnly
    };

    let mut probe = |pairs: &[(u32, u32)]| -> Result<(), Error> {
        for &(a, b) in pairs {
            let (Some(ia), Some(ib)) = (seq.index_of(a), seq.index_of(b)) else {
                continue;
            };
            let ms = source.pair_matches(seq, ia, ib, cfg)?;
            if ms.insufficient {
                continue;
            }
            let ms = maybe_filter(ms, cfg);
            let Ok(k_hat) = estimate_exposure_ratio(&ms, g, v) else {
                continue;
            };
            reports.push(validate(
                ms.pair,
                k_hat,
                ms.exposure_ratio,
                cfg.exposure_tol,
                stage,
            ));
        }
        Ok(())
    };

    probe(&select_crf_pairs(seq, &cfg.crf_gate))?;
    if v.is_some() {
        probe(&select_vignette_pairs(seq, &cfg.pairing))?;
    }
    Ok(reports)
}

/// Run the full sequential calibration over a loaded sequence.
pub fn calibrate(
    seq: &Sequence,
    source: &MatchSource,
    cfg: &CalibrationConfig,
) -> Result<CalibrationRun, Error> {
    let crf = crf_stage(seq, source, cfg)?;

    let vignette = match &crf.estimate {
        Some(g) => vignette_stage(seq, source, cfg, g)?,
        None => StageOutcome::not_estimable(
            "response stage failed, vignette stage skipped",
            StageStats::default(),
        ),
    };

    let final_reports = match &crf.estimate {
        Some(g) => revalidate(seq, source, cfg, g, vignette.estimate.as_ref())?,
        None => Vec::new(),
    };

    Ok(CalibrationRun {
        crf,
        vignette,
        final_reports,
    })
}
