//! Intra-expert annotation concordance: per-cell agreement across two
//! labeling rounds, chance-corrected agreement, and per-patient SDF%
//! difference statistics.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Label, Manifest};
use crate::error::{CoreError, Result};

/// How the label space is treated when comparing two rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AgreementMode {
    /// Compare over {fragmented, unfragmented, null}: raw annotations.
    #[default]
    ThreeWay,
    /// Drop cells that are null in either round, compare the binary labels.
    TwoWay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSdf {
    pub patient_id: String,
    pub sdf_round_a: f64,
    pub sdf_round_b: f64,
    pub abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceReport {
    pub round_a: String,
    pub round_b: String,
    pub n_cells_compared: usize,
    pub percent_agreement: f64,
    pub cohen_kappa: f64,
    pub per_patient: Vec<PatientSdf>,
    pub mean_abs_diff: f64,
    pub std_abs_diff: f64,
}

impl fmt::Display for ConcordanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "Concordance between rounds `{}` and `{}`",
            self.round_a, self.round_b
        )?;
        writeln!(f, "  cells compared:    {}", self.n_cells_compared)?;
        writeln!(
            f,
            "  per-cell agreement: {:.1}%",
            self.percent_agreement * 100.0
        )?;
        writeln!(f, "  Cohen's kappa:     {:.3}", self.cohen_kappa)?;
        writeln!(
            f,
            "  SDF% abs diff:     mean {:.1}%, std {:.1}% over {} patients",
            self.mean_abs_diff,
            self.std_abs_diff,
            self.per_patient.len()
        )?;
        writeln!(f, "  patient        SDF% (a)   SDF% (b)   |diff|")?;
        for p in &self.per_patient {
            writeln!(
                f,
                "  {:<12} {:>8.1}%  {:>8.1}%  {:>6.1}%",
                p.patient_id, p.sdf_round_a, p.sdf_round_b, p.abs_diff
            )?;
        }
        Ok(())
    }
}

/// Percent agreement and Cohen's kappa between two annotation rounds.
///
/// Cells carrying neither round (or, in two-way mode, a null in either
/// round) are excluded from `n`.
pub fn per_cell_agreement(
    manifest: &Manifest,
    round_a: &str,
    round_b: &str,
    mode: AgreementMode,
) -> Result<(f64, f64, usize)> {
    let mut pairs: Vec<(Label, Label)> = Vec::new();
    for record in &manifest.records {
        let (Some(&a), Some(&b)) = (
            record.annotations.get(round_a),
            record.annotations.get(round_b),
        ) else {
            continue;
        };
        if mode == AgreementMode::TwoWay && (a == Label::Null || b == Label::Null) {
            continue;
        }
        pairs.push((a, b));
    }
    if pairs.is_empty() {
        return Err(CoreError::NoAnnotationOverlap {
            round_a: round_a.to_string(),
            round_b: round_b.to_string(),
        });
    }

    let n = pairs.len() as f64;
    let agree = pairs.iter().filter(|(a, b)| a == b).count() as f64;
    let observed = agree / n;

    // Chance agreement from the marginal label distributions.
    let classes = [Label::Unfragmented, Label::Fragmented, Label::Null];
    let mut expected = 0.0;
    for class in classes {
        let pa = pairs.iter().filter(|(a, _)| *a == class).count() as f64 / n;
        let pb = pairs.iter().filter(|(_, b)| *b == class).count() as f64 / n;
        expected += pa * pb;
    }
    let kappa = if (1.0 - expected).abs() < 1e-12 {
        // Degenerate marginals: perfect chance agreement.
        if (observed - 1.0).abs() < 1e-12 {
            1.0
        } else {
            0.0
        }
    } else {
        (observed - expected) / (1.0 - expected)
    };
    Ok((observed, kappa, pairs.len()))
}

/// Per-patient SDF%: 100 * fragmented / (fragmented + unfragmented) in the
/// given round. Patients with zero non-null cells are omitted.
pub fn patient_sdf(manifest: &Manifest, round: &str) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for record in &manifest.records {
        let entry = counts.entry(record.patient_id.clone()).or_default();
        match record.label(round) {
            Label::Fragmented => entry.0 += 1,
            Label::Unfragmented => entry.1 += 1,
            Label::Null => {}
        }
    }
    counts
        .into_iter()
        .filter(|(_, (frag, unfrag))| frag + unfrag > 0)
        .map(|(patient, (frag, unfrag))| {
            (patient, 100.0 * frag as f64 / (frag + unfrag) as f64)
        })
        .collect()
}

/// Full concordance report: agreement, kappa and per-patient SDF%
/// difference statistics (sample standard deviation, n-1 denominator).
pub fn sdf_difference_stats(
    manifest: &Manifest,
    round_a: &str,
    round_b: &str,
    mode: AgreementMode,
) -> Result<ConcordanceReport> {
    let (percent_agreement, cohen_kappa, n_cells_compared) =
        per_cell_agreement(manifest, round_a, round_b, mode)?;

    let sdf_a = patient_sdf(manifest, round_a);
    let sdf_b = patient_sdf(manifest, round_b);
    let mut per_patient: Vec<PatientSdf> = sdf_a
        .iter()
        .filter_map(|(patient, &a)| {
            sdf_b.get(patient).map(|&b| PatientSdf {
                patient_id: patient.clone(),
                sdf_round_a: a,
                sdf_round_b: b,
                abs_diff: (a - b).abs(),
            })
        })
        .collect();
    if per_patient.is_empty() {
        return Err(CoreError::NoCommonPatients);
    }
    per_patient.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));

    let diffs: Vec<f64> = per_patient.iter().map(|p| p.abs_diff).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let std = if diffs.len() < 2 {
        0.0
    } else {
        let ss: f64 = diffs.iter().map(|d| (d - mean).powi(2)).sum();
        (ss / (diffs.len() - 1) as f64).sqrt()
    };

    Ok(ConcordanceReport {
        round_a: round_a.to_string(),
        round_b: round_b.to_string(),
        n_cells_compared,
        percent_agreement,
        cohen_kappa,
        per_patient,
        mean_abs_diff: mean,
        std_abs_diff: std,
    })
}
