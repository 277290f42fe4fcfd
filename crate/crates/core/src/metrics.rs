//! Confusion matrices, per-class precision/recall/F1, CCR and exact-match
//! caption accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{AccessoryType, CaptionLevel};
use crate::vocab::normalize;

/// Square confusion matrix, rows = true class, columns = predicted class.
/// Predictions outside the class set are kept per row in `unassigned`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
    pub unassigned: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
            unassigned: vec![0; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<usize>>) -> Result<Self> {
        let n = counts.len();
        if n == 0 || counts.iter().any(|r| r.len() != n) {
            return Err(Error::Config("confusion matrix must be square and non-empty".into()));
        }
        Ok(Self {
            counts,
            unassigned: vec![0; n],
        })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, predicted: Option<usize>) {
        match predicted {
            Some(p) => self.counts[truth][p] += 1,
            None => self.unassigned[truth] += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum::<usize>() + self.unassigned.iter().sum::<usize>()
    }

    pub fn correct(&self) -> usize {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Correct classification rate: trace over total.
    pub fn ccr(&self) -> f64 {
        ratio(self.correct(), self.total())
    }

    pub fn support(&self, class: usize) -> usize {
        self.counts[class].iter().sum::<usize>() + self.unassigned[class]
    }

    /// Precision, recall and F1 for one class; `0/0` counts as 0.
    pub fn class_scores(&self, class: usize) -> (f64, f64, f64) {
        let tp = self.counts[class][class];
        let predicted: usize = self.counts.iter().map(|r| r[class]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, self.support(class));
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        (precision, recall, f1)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Set when the class is absent from the evaluated samples, so its
    /// recall is undefined and reported as 0.
    pub absent: bool,
}

/// Formats a metric with at most four decimals and no trailing zeros.
pub fn format_metric(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

impl ClassScores {
    /// `"Necklaces 0.9459 1 0.9722"`.
    pub fn row(&self) -> String {
        format!(
            "{} {} {} {}",
            self.label,
            format_metric(self.precision),
            format_metric(self.recall),
            format_metric(self.f1)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub accessory_type: AccessoryType,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionAccuracy {
    pub level: CaptionLevel,
    pub accuracy: f64,
    pub per_type: Vec<TypeAccuracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Top-1 accuracy for classification, exact-match rate for captioning.
    pub ccr: f64,
    pub per_class: Vec<ClassScores>,
    pub confusion: ConfusionMatrix,
    pub caption: Option<CaptionAccuracy>,
}

fn class_scores(confusion: &ConfusionMatrix) -> Vec<ClassScores> {
    AccessoryType::ALL
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (precision, recall, f1) = confusion.class_scores(i);
            ClassScores {
                label: t.plural_label().to_string(),
                precision,
                recall,
                f1,
                support: confusion.support(i),
                absent: confusion.support(i) == 0,
            }
        })
        .collect()
}

/// Report for 4-way classification predictions.
pub fn classification_report(truth: &[AccessoryType], predicted: &[AccessoryType]) -> Result<EvalReport> {
    if truth.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if truth.len() != predicted.len() {
        return Err(Error::ShapeMismatch {
            op: "classification_report",
            left: vec![truth.len()],
            right: vec![predicted.len()],
        });
    }
    let mut confusion = ConfusionMatrix::new(AccessoryType::ALL.len());
    for (t, p) in truth.iter().zip(predicted) {
        confusion.add(t.index(), Some(p.index()));
    }
    Ok(EvalReport {
        samples: truth.len(),
        ccr: confusion.ccr(),
        per_class: class_scores(&confusion),
        confusion,
        caption: None,
    })
}

/// Accessory type named by a caption: its last word.
pub fn caption_type(caption: &str) -> Option<AccessoryType> {
    normalize(caption).rsplit(' ').next().and_then(AccessoryType::from_word)
}

/// Exact-match report: a generated caption is correct when it equals the
/// reference after normalization. Per-type rows group by the true type;
/// the class metrics read the predicted type off the generated caption.
pub fn caption_report(
    level: CaptionLevel,
    truth_types: &[AccessoryType],
    references: &[&str],
    generated: &[String],
) -> Result<EvalReport> {
    if references.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if references.len() != generated.len() || references.len() != truth_types.len() {
        return Err(Error::ShapeMismatch {
            op: "caption_report",
            left: vec![references.len()],
            right: vec![generated.len()],
        });
    }
    let mut confusion = ConfusionMatrix::new(AccessoryType::ALL.len());
    let mut hits = [0usize; 4];
    let mut counts = [0usize; 4];
    for ((t, r), g) in truth_types.iter().zip(references).zip(generated) {
        confusion.add(t.index(), caption_type(g).map(AccessoryType::index));
        counts[t.index()] += 1;
        if normalize(r) == normalize(g) {
            hits[t.index()] += 1;
        }
    }
    let total_hits: usize = hits.iter().sum();
    let accuracy = ratio(total_hits, references.len());
    let per_type = AccessoryType::ALL
        .iter()
        .map(|&t| TypeAccuracy {
            accessory_type: t,
            accuracy: ratio(hits[t.index()], counts[t.index()]),
            count: counts[t.index()],
        })
        .collect();
    Ok(EvalReport {
        samples: references.len(),
        ccr: accuracy,
        per_class: class_scores(&confusion),
        confusion,
        caption: Some(CaptionAccuracy {
            level,
            accuracy,
            per_type,
        }),
    })
}

impl EvalReport {
    /// Plain-text rendering: one `label precision recall f1` row per class,
    /// then CCR and, for captioning, per-type exact-match rows.
    pub fn to_text(&self) -> String {
        let mut out = String::from("Class Precision Recall F1-Score\n");
        for c in &self.per_class {
            out.push_str(&c.row());
            if c.absent {
                out.push_str(" (absent)");
            }
            out.push('\n');
        }
        out.push_str(&format!("CCR {}\n", format_metric(self.ccr)));
        if let Some(cap) = &self.caption {
            out.push_str(&format!("Exact match ({}) {}\n", cap.level, format_metric(cap.accuracy)));
            for t in &cap.per_type {
                out.push_str(&format!(
                    "{} {} ({} samples)\n",
                    t.accessory_type.plural_label().to_lowercase(),
                    format_metric(t.accuracy),
                    t.count
                ));
            }
        }
        out
    }

    pub fn warnings(&self) -> Vec<String> {
        self.per_class
            .iter()
            .filter(|c| c.absent)
            .map(|c| format!("class {} is absent from the evaluation set; its recall is reported as 0", c.label))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use AccessoryType::*;

    #[test]
    fn hand_oracle_two_classes() {
        let m = ConfusionMatrix::from_counts(vec![vec![3, 1], vec![0, 4]]).unwrap();
        let (p, r, f) = m.class_scores(0);
        assert_eq!(p, 1.0);
        assert_eq!(r, 0.75);
        assert!((f - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(m.ccr(), 7.0 / 8.0);
    }

    #[test]
    fn zero_over_zero_is_zero() {
        let m = ConfusionMatrix::from_counts(vec![vec![0, 2], vec![0, 0]]).unwrap();
        assert_eq!(m.class_scores(0), (0.0, 0.0, 0.0));
        assert_eq!(m.class_scores(1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn table_row_format() {
        let c = ClassScores {
            label: "Necklaces".into(),
            precision: 0.94594,
            recall: 1.0,
            f1: 0.97222,
            support: 35,
            absent: false,
        };
        assert_eq!(c.row(), "Necklaces 0.9459 1 0.9722");
        assert_eq!(format_metric(0.5), "0.5");
        assert_eq!(format_metric(0.0), "0");
    }

    #[test]
    fn classification_bounds_and_absent_class() {
        let truth = [Ring, Ring, Necklace, Earring];
        let r = classification_report(&truth, &truth).unwrap();
        assert_eq!(r.ccr, 1.0);
        assert!(r.per_class[3].absent);
        assert_eq!(r.warnings().len(), 1);
        for c in &r.per_class[..3] {
            assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));
        }
        assert!(classification_report(&[], &[]).is_err());
    }

    #[test]
    fn caption_bounds() {
        let types = [Ring, Earring, Earring];
        let refs = ["skye yellow gold and oval stones ring", "orion ruby earring", "orion emerald earring"];
        let echo: Vec<String> = refs.iter().map(|s| s.to_string()).collect();
        let r = caption_report(CaptionLevel::Complete, &types, &refs, &echo).unwrap();
        assert_eq!(r.ccr, 1.0);
        let wrong = vec!["banana".to_string(); 3];
        let r = caption_report(CaptionLevel::Complete, &types, &refs, &wrong).unwrap();
        assert_eq!(r.ccr, 0.0);
        assert_eq!(r.confusion.unassigned, vec![0, 1, 2, 0]);

        let mixed = vec![refs[0].to_string(), refs[1].to_string(), refs[1].to_string()];
        let r = caption_report(CaptionLevel::Complete, &types, &refs, &mixed).unwrap();
        let cap = r.caption.as_ref().unwrap();
        assert_eq!(cap.per_type[Earring.index()].accuracy, 0.5);
        assert_eq!(r.per_class[Earring.index()].recall, 1.0);
        assert!(r.to_text().contains("earrings 0.5 (2 samples)"));
    }
}
