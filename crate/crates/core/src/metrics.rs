//! Confusion matrices, per-class precision/recall/F1, macro-F1, and the
//! four evaluation levels: left breasts, right breasts, study-level
//! (diagnosis), and pooled side-level (density).
//!
//! Zero-division convention: a precision, recall, or F1 of 0/0 scores 0,
//! and zero-support classes stay in the macro mean, so macro-F1 always
//! averages exactly K per-class scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::labels::Laterality;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction and truth lengths differ ({preds} vs {truth})")]
    LengthMismatch { preds: usize, truth: usize },
    #[error("class {value} out of range for {classes} classes")]
    ClassRange { value: usize, classes: usize },
}

/// K x K counts; rows are truth, columns are prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Tally a confusion matrix from parallel prediction/truth slices.
pub fn confusion(
    preds: &[usize],
    truth: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != truth.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), truth: truth.len() });
    }
    let mut matrix = ConfusionMatrix::new(classes);
    for (&p, &t) in preds.iter().zip(truth) {
        for value in [p, t] {
            if value >= classes {
                return Err(MetricsError::ClassRange { value, classes });
            }
        }
        matrix.add(t, p);
    }
    Ok(matrix)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// The evaluation levels of the reporting protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalLevel {
    Left,
    Right,
    Study,
    Side,
}

impl std::fmt::Display for EvalLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Left => "left",
            Self::Right => "right",
            Self::Study => "study",
            Self::Side => "side",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub level: EvalLevel,
    pub per_class: Vec<ClassScores>,
    pub macro_f1: f64,
}

/// Per-class precision/recall/F1 and their unweighted mean over all K
/// classes, zero-support classes included.
pub fn f1_scores(matrix: &ConfusionMatrix, level: EvalLevel) -> EvalReport {
    let k = matrix.classes;
    let mut per_class = Vec::with_capacity(k);
    for class in 0..k {
        let tp = matrix.get(class, class) as f64;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for other in 0..k {
            if other != class {
                fp += matrix.get(other, class) as f64;
                fn_ += matrix.get(class, other) as f64;
            }
        }
        let support = (0..k).map(|p| matrix.get(class, p)).sum();
        let precision = safe_div(tp, tp + fp);
        let recall = safe_div(tp, tp + fn_);
        let f1 = safe_div(2.0 * precision * recall, precision + recall);
        per_class.push(ClassScores { precision, recall, f1, support });
    }
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64;
    EvalReport { level, per_class, macro_f1 }
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// One evaluated breast side: class-index predictions and truths for both
/// targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SidePrediction {
    pub study_id: String,
    pub laterality: Laterality,
    pub diag_pred: usize,
    pub diag_truth: usize,
    pub dens_pred: usize,
    pub dens_truth: usize,
}

/// One evaluated image, reduced to sides by [`reduce_to_sides`] for the
/// single-view pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePrediction {
    pub study_id: String,
    pub laterality: Laterality,
    pub diag_pred: usize,
    pub diag_truth: usize,
    pub dens_pred: usize,
    pub dens_truth: usize,
}

/// Reduce per-image predictions to one prediction per breast by ordinal
/// max, mirroring the view-to-breast ground-truth rule. Output is ordered
/// by (study_id, L before R).
pub fn reduce_to_sides(images: &[ImagePrediction]) -> Vec<SidePrediction> {
    let mut grouped: BTreeMap<(String, Laterality), SidePrediction> = BTreeMap::new();
    for img in images {
        let key = (img.study_id.clone(), img.laterality);
        grouped
            .entry(key)
            .and_modify(|side| {
                side.diag_pred = side.diag_pred.max(img.diag_pred);
                side.diag_truth = side.diag_truth.max(img.diag_truth);
                side.dens_pred = side.dens_pred.max(img.dens_pred);
                side.dens_truth = side.dens_truth.max(img.dens_truth);
            })
            .or_insert_with(|| SidePrediction {
                study_id: img.study_id.clone(),
                laterality: img.laterality,
                diag_pred: img.diag_pred,
                diag_truth: img.diag_truth,
                dens_pred: img.dens_pred,
                dens_truth: img.dens_truth,
            });
    }
    grouped.into_values().collect()
}

/// The full leveled report set: diagnosis at left/right/study, density at
/// left/right/side.
#[derive(Debug, Clone)]
pub struct LevelReports {
    pub diag_left: EvalReport,
    pub diag_right: EvalReport,
    pub diag_study: EvalReport,
    pub dens_left: EvalReport,
    pub dens_right: EvalReport,
    pub dens_side: EvalReport,
    /// Expected studies that had no predicted side at all.
    pub studies_skipped: usize,
}

/// Score side predictions at every level. `expected_studies` lists the
/// studies that should have predictions; those with none are excluded and
/// counted. Study-level pairs the ordinal-max-aggregated prediction with
/// the ordinal-max-aggregated truth; side-level density pools both
/// lateralities.
pub fn evaluate_levels(
    sides: &[SidePrediction],
    expected_studies: &[String],
    diag_classes: usize,
    dens_classes: usize,
) -> Result<LevelReports, MetricsError> {
    let lat_pairs = |lat: Laterality| -> (Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut dp = Vec::new();
        let mut dt = Vec::new();
        let mut np = Vec::new();
        let mut nt = Vec::new();
        for s in sides.iter().filter(|s| s.laterality == lat) {
            dp.push(s.diag_pred);
            dt.push(s.diag_truth);
            np.push(s.dens_pred);
            nt.push(s.dens_truth);
        }
        (dp, dt, np, nt)
    };
    let (ldp, ldt, lnp, lnt) = lat_pairs(Laterality::Left);
    let (rdp, rdt, rnp, rnt) = lat_pairs(Laterality::Right);

    // Study-level: ordinal max over a study's predicted sides, on both the
    // prediction and the truth.
    let mut per_study: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for s in sides {
        per_study
            .entry(s.study_id.as_str())
            .and_modify(|(p, t)| {
                *p = (*p).max(s.diag_pred);
                *t = (*t).max(s.diag_truth);
            })
            .or_insert((s.diag_pred, s.diag_truth));
    }
    let study_preds: Vec<usize> = per_study.values().map(|(p, _)| *p).collect();
    let study_truth: Vec<usize> = per_study.values().map(|(_, t)| *t).collect();
    let studies_skipped = expected_studies
        .iter()
        .filter(|id| !per_study.contains_key(id.as_str()))
        .count();

    // Side-level density pools both lateralities.
    let mut sdp: Vec<usize> = Vec::with_capacity(sides.len());
    let mut sdt: Vec<usize> = Vec::with_capacity(sides.len());
    for s in sides {
        sdp.push(s.dens_pred);
        sdt.push(s.dens_truth);
    }

    Ok(LevelReports {
        diag_left: f1_scores(&confusion(&ldp, &ldt, diag_classes)?, EvalLevel::Left),
        diag_right: f1_scores(&confusion(&rdp, &rdt, diag_classes)?, EvalLevel::Right),
        diag_study: f1_scores(&confusion(&study_preds, &study_truth, diag_classes)?, EvalLevel::Study),
        dens_left: f1_scores(&confusion(&lnp, &lnt, dens_classes)?, EvalLevel::Left),
        dens_right: f1_scores(&confusion(&rnp, &rnt, dens_classes)?, EvalLevel::Right),
        dens_side: f1_scores(&confusion(&sdp, &sdt, dens_classes)?, EvalLevel::Side),
        studies_skipped,
    })
}

impl LevelReports {
    /// Text table mirroring the published layout: per-class F1 rows and a
    /// Macro-F1 row, with Left/Right/Study columns for diagnosis and
    /// Left/Right/Side for density.
    pub fn render_table(&self, diag_names: &[String], dens_names: &[String]) -> String {
        let mut out = String::new();
        let f1_row = |out: &mut String, name: &str, cols: [&EvalReport; 3], class: usize| {
            let _ = writeln!(
                out,
                "{name:<10} {:>8.2} {:>8.2} {:>8.2}",
                cols[0].per_class[class].f1,
                cols[1].per_class[class].f1,
                cols[2].per_class[class].f1
            );
        };
        let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8}", "Diagnosis", "Left", "Right", "Study");
        let diag = [&self.diag_left, &self.diag_right, &self.diag_study];
        for (class, name) in diag_names.iter().enumerate() {
            f1_row(&mut out, name, diag, class);
        }
        let _ = writeln!(
            out,
            "{:<10} {:>8.4} {:>8.4} {:>8.4}",
            "Macro-F1", self.diag_left.macro_f1, self.diag_right.macro_f1, self.diag_study.macro_f1
        );
        let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8}", "Density", "Left", "Right", "Side");
        let dens = [&self.dens_left, &self.dens_right, &self.dens_side];
        for (class, name) in dens_names.iter().enumerate() {
            f1_row(&mut out, name, dens, class);
        }
        let _ = writeln!(
            out,
            "{:<10} {:>8.4} {:>8.4} {:>8.4}",
            "Macro-F1", self.dens_left.macro_f1, self.dens_right.macro_f1, self.dens_side.macro_f1
        );
        if self.studies_skipped > 0 {
            let _ = writeln!(out, "studies skipped (no predicted sides): {}", self.studies_skipped);
        }
        out
    }

    /// Machine-readable `key value` lines, one per score.
    pub fn render_key_values(&self, prefix: &str) -> String {
        let mut out = String::new();
        let mut dump = |task: &str, report: &EvalReport| {
            for (class, scores) in report.per_class.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{prefix}.{task}.{}.class{}.f1 {:.6}",
                    report.level, class, scores.f1
                );
            }
            let _ = writeln!(
                out,
                "{prefix}.{task}.{}.macro_f1 {:.6}",
                report.level, report.macro_f1
            );
        };
        dump("diagnosis", &self.diag_left);
        dump("diagnosis", &self.diag_right);
        dump("diagnosis", &self.diag_study);
        dump("density", &self.dens_left);
        dump("density", &self.dens_right);
        dump("density", &self.dens_side);
        let _ = writeln!(out, "{prefix}.studies_skipped {}", self.studies_skipped);
        out
    }
}
