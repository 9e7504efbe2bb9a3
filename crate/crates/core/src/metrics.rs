//! Accuracy, macro-F1, per-class scores and confusion matrices.
//!
//! [`Label::Unparsed`] never equals a truth and is not a class of its own:
//! it counts against the true class's recall and adds no false positive.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::category::{CategoryId, CategorySet};
use crate::parser::{Label, ParseStatus};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no predictions to score")]
    Empty,
    #[error("{preds} predictions but {truths} truths")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("position {index}: prediction for `{pred}` aligned with truth for `{truth}`")]
    IdMismatch { index: usize, pred: String, truth: String },
}

/// Which classes macro-F1 averages over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassUniverse {
    /// Classes present in the truths or the (parsed) predictions.
    #[default]
    Observed,
    /// Every category of the attribute.
    Canonical,
}

/// Checks that both lists name the same agents in the same order and
/// returns the bare label columns.
pub fn align(
    preds: &[(String, Label)],
    truths: &[(String, CategoryId)],
) -> Result<(Vec<Label>, Vec<CategoryId>), MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    for (index, ((p, _), (t, _))) in preds.iter().zip(truths).enumerate() {
        if p != t {
            return Err(MetricsError::IdMismatch {
                index,
                pred: p.clone(),
                truth: t.clone(),
            });
        }
    }
    Ok((
        preds.iter().map(|(_, l)| l.clone()).collect(),
        truths.iter().map(|(_, c)| c.clone()).collect(),
    ))
}

fn check(preds: &[Label], truths: &[CategoryId]) -> Result<(), MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

fn hit(pred: &Label, truth: &CategoryId) -> bool {
    pred.category() == Some(truth)
}

pub fn accuracy(preds: &[Label], truths: &[CategoryId]) -> Result<f64, MetricsError> {
    check(preds, truths)?;
    let correct = preds.iter().zip(truths).filter(|(p, t)| hit(p, t)).count();
    Ok(correct as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: CategoryId,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of truths of this class.
    pub support: u64,
    /// Number of predictions of this class.
    pub predicted: u64,
}

fn class_metrics(class: &CategoryId, preds: &[Label], truths: &[CategoryId]) -> ClassMetrics {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, t) in preds.iter().zip(truths) {
        let predicted = p.category() == Some(class);
        let actual = t == class;
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    ClassMetrics {
        class: class.clone(),
        precision,
        recall,
        f1,
        support: tp + fn_,
        predicted: tp + fp,
    }
}

fn observed_classes(preds: &[Label], truths: &[CategoryId]) -> BTreeSet<CategoryId> {
    truths
        .iter()
        .cloned()
        .chain(preds.iter().filter_map(|p| p.category().cloned()))
        .collect()
}

/// Unweighted mean of per-class F1 over the observed classes.
pub fn macro_f1(preds: &[Label], truths: &[CategoryId]) -> Result<f64, MetricsError> {
    check(preds, truths)?;
    let classes = observed_classes(preds, truths);
    Ok(mean_f1(classes.iter(), preds, truths))
}

/// Macro-F1 over an explicit class list.
pub fn macro_f1_over<'a>(
    classes: impl IntoIterator<Item = &'a CategoryId>,
    preds: &[Label],
    truths: &[CategoryId],
) -> Result<f64, MetricsError> {
    check(preds, truths)?;
    Ok(mean_f1(classes.into_iter(), preds, truths))
}

fn mean_f1<'a>(classes: impl Iterator<Item = &'a CategoryId>, preds: &[Label], truths: &[CategoryId]) -> f64 {
    let scores: Vec<f64> = classes.map(|c| class_metrics(c, preds, truths).f1).collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Rows are true classes, columns predicted classes plus a final
/// `Unparsed` column. Truths outside `classes` are not representable and
/// are rejected by [`AttributeMetrics::compute`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<CategoryId>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn build(classes: &[CategoryId], preds: &[Label], truths: &[CategoryId]) -> Self {
        let index: BTreeMap<&CategoryId, usize> = classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
        let k = classes.len();
        let mut counts = vec![vec![0u64; k + 1]; k];
        for (p, t) in preds.iter().zip(truths) {
            let Some(&row) = index.get(t) else { continue };
            let col = p.category().and_then(|c| index.get(c).copied()).unwrap_or(k);
            counts[row][col] += 1;
        }
        ConfusionMatrix {
            classes: classes.to_vec(),
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub clean: u64,
    pub repaired: u64,
    pub unparsed: u64,
}

impl StatusCounts {
    pub fn add(&mut self, status: ParseStatus) {
        match status {
            ParseStatus::Clean => self.clean += 1,
            ParseStatus::Repaired => self.repaired += 1,
            ParseStatus::Unparsed => self.unparsed += 1,
        }
    }
}

/// All scores for one attribute of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    pub n: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub class_universe: ClassUniverse,
    /// Share of predictions that ended up `Unparsed`, including failed chains.
    pub parse_failure_rate: f64,
    pub parse_status: StatusCounts,
    /// Chains that failed at the backend (scored as `Unparsed`).
    pub chain_failures: u64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

impl AttributeMetrics {
    pub fn compute(
        set: &CategorySet,
        preds: &[Label],
        truths: &[CategoryId],
        statuses: &[ParseStatus],
        chain_failures: u64,
        universe: ClassUniverse,
    ) -> Result<Self, MetricsError> {
        check(preds, truths)?;
        if statuses.len() != preds.len() {
            return Err(MetricsError::LengthMismatch {
                preds: preds.len(),
                truths: statuses.len(),
            });
        }
        let classes: Vec<CategoryId> = set.ids().cloned().collect();
        let accuracy = accuracy(preds, truths)?;
        let macro_f1 = match universe {
            ClassUniverse::Observed => macro_f1(preds, truths)?,
            ClassUniverse::Canonical => macro_f1_over(&classes, preds, truths)?,
        };
        let mut parse_status = StatusCounts::default();
        for s in statuses {
            parse_status.add(*s);
        }
        let unparsed = preds.iter().filter(|p| p.is_unparsed()).count();
        Ok(AttributeMetrics {
            n: preds.len() as u64,
            accuracy,
            macro_f1,
            class_universe: universe,
            parse_failure_rate: unparsed as f64 / preds.len() as f64,
            parse_status,
            chain_failures,
            per_class: classes.iter().map(|c| class_metrics(c, preds, truths)).collect(),
            confusion: ConfusionMatrix::build(&classes, preds, truths),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::category::CategorySet;

    fn c(s: &str) -> CategoryId {
        CategoryId::new(s)
    }

    fn l(s: &str) -> Label {
        Label::Category(c(s))
    }

    #[test]
    fn accuracy_counts_exact_matches() {
        let acc = accuracy(&[l("M"), l("M"), l("L")], &[c("M"), c("L"), c("L")]).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(accuracy(&[l("M")], &[c("M")]).unwrap(), 1.0);
        assert_eq!(accuracy(&[Label::Unparsed, Label::Unparsed], &[c("M"), c("L")]).unwrap(), 0.0);
    }

    #[test]
    fn macro_f1_two_classes() {
        let f1 = macro_f1(&[l("A"), l("A"), l("B")], &[c("A"), c("B"), c("B")]).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(macro_f1(&[l("A"), l("A")], &[c("A"), c("A")]).unwrap(), 1.0);
    }

    #[test]
    fn unparsed_is_not_a_class() {
        // A is truth-only and never predicted; Unparsed adds no class
        let f1 = macro_f1(&[Label::Unparsed, l("B")], &[c("A"), c("B")]).unwrap();
        assert!((f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mismatches_are_errors() {
        assert_eq!(accuracy(&[], &[]), Err(MetricsError::Empty));
        assert!(matches!(accuracy(&[l("A")], &[]), Err(MetricsError::LengthMismatch { .. })));
        let err = align(&[("a".into(), l("A"))], &[("b".into(), c("A"))]).unwrap_err();
        assert!(matches!(err, MetricsError::IdMismatch { index: 0, .. }));
    }

    #[test]
    fn confusion_invariants() {
        let set = CategorySet::income();
        let preds = vec![l("Low"), l("Middle"), Label::Unparsed, l("Low")];
        let truths = vec![c("Low"), c("Low"), c("High"), c("VeryLow")];
        let statuses = vec![ParseStatus::Clean, ParseStatus::Clean, ParseStatus::Unparsed, ParseStatus::Repaired];
        let m = AttributeMetrics::compute(&set, &preds, &truths, &statuses, 0, ClassUniverse::Observed).unwrap();
        assert_eq!(m.confusion.total(), 4);
        assert_eq!(m.confusion.trace() as f64 / 4.0, m.accuracy);
        let low = set.index_of(&c("Low")).unwrap();
        assert_eq!(m.confusion.row_sum(low), 2);
        assert_eq!(m.confusion.counts[set.index_of(&c("High")).unwrap()][6], 1);
        assert_eq!(m.parse_failure_rate, 0.25);
        assert_eq!(m.parse_status.repaired, 1);
        let canonical = AttributeMetrics::compute(&set, &preds, &truths, &statuses, 0, ClassUniverse::Canonical).unwrap();
        assert!(canonical.macro_f1 < m.macro_f1);
    }
}
