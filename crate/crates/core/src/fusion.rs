//! Dual-teacher pseudo-label fusion and EMA refinement.
//!
//! Individual uncertainty (IU) is the mean per-sample entropy of a teacher's
//! predictions; global uncertainty (GU) is the entropy of its mean
//! prediction. The fusion weight `alpha = IU_c / (IU_b + IU_c)` leans away
//! from the less confident teacher, and the GU gap decides whether the
//! vision-language teacher gets the larger share outright.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{entropy_unchecked, mean_rows, PredictionMatrix};

/// Default GU-gap threshold, in nats.
pub const DEFAULT_GU_THRESHOLD: f64 = 0.05;

/// Below this combined IU both teachers are treated as fully confident and
/// weighted equally.
pub const ALPHA_DEGENERATE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionBranch {
    /// `(1 - alpha/2) y_c + (alpha/2) y_b`
    ClipDominant,
    /// `alpha y_c + (1 - alpha) y_b`
    AlphaWeighted,
    /// `w y_c + (1 - w) y_b` with a fixed, user-chosen `w`.
    FixedWeight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub iu_b: f64,
    pub iu_c: f64,
    pub gu_b: f64,
    pub gu_c: f64,
    pub delta_gu: f64,
    pub alpha: f64,
    pub threshold: f64,
    pub branch: FusionBranch,
    /// Coefficient applied to the vision-language teacher's rows.
    pub clip_weight: f64,
}

pub fn individual_uncertainty(m: &PredictionMatrix) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::invalid("individual uncertainty of an empty matrix"));
    }
    Ok(m.rows().map(entropy_unchecked).sum::<f64>() / m.len() as f64)
}

pub fn global_uncertainty(m: &PredictionMatrix) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::invalid("global uncertainty of an empty matrix"));
    }
    Ok(entropy_unchecked(&mean_rows(m.data(), m.classes())))
}

/// IU/GU statistics and the adaptive branch choice, without mixing rows.
pub fn fusion_report(yb: &PredictionMatrix, yc: &PredictionMatrix, threshold: f64) -> Result<FusionReport> {
    yb.check_aligned(yc)?;
    if !threshold.is_finite() {
        return Err(Error::invalid("fusion threshold must be finite"));
    }
    let iu_b = individual_uncertainty(yb)?;
    let iu_c = individual_uncertainty(yc)?;
    let gu_b = global_uncertainty(yb)?;
    let gu_c = global_uncertainty(yc)?;
    let alpha = if iu_b + iu_c < ALPHA_DEGENERATE {
        0.5
    } else {
        iu_c / (iu_b + iu_c)
    };
    let delta_gu = gu_b - gu_c;
    let (branch, clip_weight) = if delta_gu < threshold {
        (FusionBranch::ClipDominant, 1.0 - alpha / 2.0)
    } else {
        (FusionBranch::AlphaWeighted, alpha)
    };
    Ok(FusionReport {
        iu_b,
        iu_c,
        gu_b,
        gu_c,
        delta_gu,
        alpha,
        threshold,
        branch,
        clip_weight,
    })
}

fn mix(yb: &PredictionMatrix, yc: &PredictionMatrix, clip_weight: f64) -> Result<PredictionMatrix> {
    let wb = 1.0 - clip_weight;
    let data = yc
        .data()
        .iter()
        .zip(yb.data())
        .map(|(c, b)| clip_weight * c + wb * b)
        .collect();
    PredictionMatrix::new(yc.ids().to_vec(), data, yc.classes())
}

/// Adaptive fusion of the black-box (`yb`) and vision-language (`yc`)
/// teachers.
pub fn fuse(yb: &PredictionMatrix, yc: &PredictionMatrix, threshold: f64) -> Result<(PredictionMatrix, FusionReport)> {
    let report = fusion_report(yb, yc, threshold)?;
    Ok((mix(yb, yc, report.clip_weight)?, report))
}

/// Fusion with a constant weight on `yc`, the baseline the adaptive rule is
/// compared against. The report still carries IU/GU for reference.
pub fn fuse_fixed(
    yb: &PredictionMatrix,
    yc: &PredictionMatrix,
    clip_weight: f64,
) -> Result<(PredictionMatrix, FusionReport)> {
    if !(0.0..=1.0).contains(&clip_weight) {
        return Err(Error::invalid(format!("fixed clip weight {clip_weight} is outside [0, 1]")));
    }
    let mut report = fusion_report(yb, yc, DEFAULT_GU_THRESHOLD)?;
    report.branch = FusionBranch::FixedWeight;
    report.clip_weight = clip_weight;
    Ok((mix(yb, yc, clip_weight)?, report))
}

/// Current soft pseudo-labels and the fusion that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelStore {
    labels: PredictionMatrix,
    beta: f64,
    report: FusionReport,
    epoch_of_last_fusion: usize,
}

impl PseudoLabelStore {
    pub fn new(labels: PredictionMatrix, beta: f64, report: FusionReport, epoch: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::invalid(format!("EMA beta {beta} is outside [0, 1]")));
        }
        labels.validate()?;
        Ok(Self {
            labels,
            beta,
            report,
            epoch_of_last_fusion: epoch,
        })
    }

    pub fn labels(&self) -> &PredictionMatrix {
        &self.labels
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn report(&self) -> &FusionReport {
        &self.report
    }

    pub fn epoch_of_last_fusion(&self) -> usize {
        self.epoch_of_last_fusion
    }

    /// Replaces the labels with a fresh fusion, discarding EMA history.
    pub fn reset(&mut self, labels: PredictionMatrix, report: FusionReport, epoch: usize) -> Result<()> {
        labels.validate()?;
        self.labels.check_aligned(&labels)?;
        self.labels = labels;
        self.report = report;
        self.epoch_of_last_fusion = epoch;
        Ok(())
    }

    /// `y <- beta y + (1 - beta) y_t`, row by row.
    pub fn ema_refine(&mut self, yt: &PredictionMatrix) -> Result<()> {
        self.labels.check_aligned(yt)?;
        let b = self.beta;
        let data = self
            .labels
            .data()
            .iter()
            .zip(yt.data())
            .map(|(y, t)| b * y + (1.0 - b) * t)
            .collect();
        self.labels = PredictionMatrix::new(self.labels.ids().to_vec(), data, self.labels.classes())?;
        Ok(())
    }
}
