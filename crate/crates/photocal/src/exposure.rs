//! Exposure-ratio re-estimation and estimate validation.
//!
//! Calibrated intensities let the exposure ratio of a pair be recomputed
//! without metadata: each correspondence contributes one ratio term and the
//! mean suppresses white noise. Comparing the recomputed ratio against the
//! metadata value gates acceptance of response and vignette rounds, stage by
//! stage: the response is screened with the vignette ignored (small radial
//! motion makes it cancel), then the vignette is screened with the accepted
//! response in place.

use crate::matching::MatchSet;
use crate::response::InverseResponse;
use crate::vignette::{VignetteModel, MIN_RESPONSE_VALUE};
use crate::Error;

/// Vignette values below this are too close to zero to divide by.
const MIN_VIGNETTE_VALUE: f64 = 1e-3;

/// Default relative-error tolerance for accepting an estimate.
pub const DEFAULT_EXPOSURE_TOL: f64 = 0.02;

/// Which part of the model a validation verdict applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationStage {
    CrfOnly,
    CrfAndVignette,
}

impl std::fmt::Display for ValidationStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ValidationStage::CrfOnly => write!(f, "crf_only"),
            ValidationStage::CrfAndVignette => write!(f, "crf_and_vignette"),
        }
    }
}

/// Verdict for one frame pair.
#[derive(Debug, Clone, Copy)]
pub struct ValidationReport {
    pub pair: (u32, u32),
    pub k_meta: f64,
    pub k_hat: f64,
    pub rel_error: f64,
    pub accepted: bool,
    pub stage: ValidationStage,
}

impl ValidationReport {
    /// Tab-separated diagnostic line (stage, pair, meta, estimate, error,
    /// verdict).
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.stage,
            self.pair.0,
            self.pair.1,
            self.k_meta,
            self.k_hat,
            self.rel_error,
            if self.accepted { "accept" } else { "reject" }
        )
    }
}

/// Mean per-match ratio `g(M1) V(R2) / (g(M2) V(R1))`; `V` is taken as 1
/// when no vignette is supplied. Matches with a vanishing response value or
/// vignette are skipped; if nothing survives this is an error.
pub fn estimate_exposure_ratio(
    ms: &MatchSet,
    g: &InverseResponse,
    v: Option<&VignetteModel>,
) -> Result<f64, Error> {
    let mut sum = 0.0;
    let mut used = 0usize;
    for m in &ms.matches {
        let g2 = g.eval(m.m2);
        if g2 < MIN_RESPONSE_VALUE {
            continue;
        }
        let (v1, v2) = match v {
            Some(model) => (model.eval(m.r1), model.eval(m.r2)),
            None => (1.0, 1.0),
        };
        if v1 < MIN_VIGNETTE_VALUE || v2 < MIN_VIGNETTE_VALUE {
            continue;
        }
        sum += (g.eval(m.m1) * v2) / (g2 * v1);
        used += 1;
    }
    if used == 0 {
        return Err(Error::NoUsableMatches);
    }
    Ok(sum / used as f64)
}

/// Compare a recomputed ratio against metadata at a relative tolerance.
pub fn validate(
    pair: (u32, u32),
    k_hat: f64,
    k_meta: f64,
    tol: f64,
    stage: ValidationStage,
) -> ValidationReport {
    assert!(k_meta > 0.0, "metadata ratio must be positive");
    let rel_error = (k_hat - k_meta).abs() / k_meta;
    ValidationReport {
        pair,
        k_meta,
        k_hat,
        rel_error,
        accepted: rel_error <= tol,
        stage,
    }
}

fn accepted_indices(reports: &[ValidationReport]) -> Vec<usize> {
    reports
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.accepted.then_some(i))
        .collect()
}

/// Coefficient-wise mean of the response estimates whose round passed
/// validation, re-projected onto the constraint set (c0 = 0, c1 + c2
/// renormalized to 1).
pub fn aggregate_responses(
    estimates: &[InverseResponse],
    reports: &[ValidationReport],
) -> Result<InverseResponse, Error> {
    assert_eq!(estimates.len(), reports.len());
    let accepted = accepted_indices(reports);
    if accepted.is_empty() {
        return Err(Error::ValidationFailed);
    }
    let n = accepted.len() as f64;
    let c1 = accepted.iter().map(|&i| estimates[i].c1).sum::<f64>() / n;
    let c2 = accepted.iter().map(|&i| estimates[i].c2).sum::<f64>() / n;
    let scale = c1 + c2;
    Ok(InverseResponse::constrained(c1 / scale, c2 / scale))
}

/// Coefficient-wise mean of the vignette estimates whose round passed
/// validation.
pub fn aggregate_vignettes(
    estimates: &[VignetteModel],
    reports: &[ValidationReport],
) -> Result<VignetteModel, Error> {
    assert_eq!(estimates.len(), reports.len());
    let accepted = accepted_indices(reports);
    if accepted.is_empty() {
        return Err(Error::ValidationFailed);
    }
    let n = accepted.len() as f64;
    let mean = |f: fn(&VignetteModel) -> f64| accepted.iter().map(|&i| f(&estimates[i])).sum::<f64>() / n;
    Ok(VignetteModel::new(
        mean(|v| v.v1),
        mean(|v| v.v2),
        mean(|v| v.v3),
    ))
}
