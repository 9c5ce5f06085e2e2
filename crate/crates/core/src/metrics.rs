//! Classification and survival metrics.

use serde::{Deserialize, Serialize};

use crate::error::{AsmilError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ClassCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; 0 when both vanish.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest counts for every class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
}

fn check_labels(preds: &[usize], labels: &[usize], k: usize) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(AsmilError::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(AsmilError::domain("no predictions to score"));
    }
    if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= k) {
        return Err(AsmilError::domain(format!(
            "class {bad} out of range for K={k}"
        )));
    }
    Ok(())
}

impl ConfusionCounts {
    pub fn from_predictions(preds: &[usize], labels: &[usize], k: usize) -> Result<Self> {
        check_labels(preds, labels, k)?;
        let mut per_class = vec![ClassCounts::default(); k];
        for (&p, &y) in preds.iter().zip(labels) {
            for (c, counts) in per_class.iter_mut().enumerate() {
                match (p == c, y == c) {
                    (true, true) => counts.tp += 1,
                    (true, false) => counts.fp += 1,
                    (false, true) => counts.fn_ += 1,
                    (false, false) => counts.tn += 1,
                }
            }
        }
        Ok(Self { per_class })
    }
}

pub fn macro_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    let counts = ConfusionCounts::from_predictions(preds, labels, k)?;
    Ok(counts.per_class.iter().map(ClassCounts::f1).sum::<f64>() / k as f64)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    let k = preds.iter().chain(labels).max().map_or(1, |m| m + 1);
    check_labels(preds, labels, k)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Per-class AUCs and their macro average. Classes lacking positives or
/// negatives are listed in `skipped` and left out of the mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub macro_auc: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Pairwise ROC area: fraction of positive/negative pairs ranked correctly,
/// ties counted one half. `None` if either side is empty.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(positive)
        .filter_map(|(&s, &p)| p.then_some(s))
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(positive)
        .filter_map(|(&s, &p)| (!p).then_some(s))
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut credit = 0.0;
    for &sp in &pos {
        for &sn in &neg {
            if sp > sn {
                credit += 1.0;
            } else if sp == sn {
                credit += 0.5;
            }
        }
    }
    Some(credit / (pos.len() * neg.len()) as f64)
}

/// One-vs-rest macro AUC. `scores[i]` holds the K class scores of sample `i`.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<AucReport> {
    if scores.len() != labels.len() {
        return Err(AsmilError::shape(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(AsmilError::domain("no scores to rank"));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != k) {
        return Err(AsmilError::shape(format!(
            "score row of length {}, K={k}",
            row.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(AsmilError::domain(format!(
            "class {bad} out of range for K={k}"
        )));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    for c in 0..k {
        let column: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let auc = pairwise_auc(&column, &positive);
        if auc.is_none() {
            skipped.push(c);
        }
        per_class.push(auc);
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc =
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(AucReport {
        macro_auc,
        per_class,
        skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    pub event: bool,
    pub risk: f64,
}

/// Credit given to a comparable pair whose risks tie.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskTies {
    #[default]
    Strict,
    Half,
}

/// Concordance over pairs with `tᵢ < tⱼ` and an observed event at `i`.
pub fn c_index(records: &[SurvivalRecord], ties: RiskTies) -> Result<f64> {
    if let Some(r) = records.iter().find(|r| !(r.time > 0.0)) {
        return Err(AsmilError::domain(format!(
            "survival time must be positive, got {}",
            r.time
        )));
    }
    let mut comparable = 0usize;
    let mut concordant = 0.0;
    for a in records.iter().filter(|r| r.event) {
        for b in records {
            if a.time < b.time {
                comparable += 1;
                if a.risk > b.risk {
                    concordant += 1.0;
                } else if a.risk == b.risk && ties == RiskTies::Half {
                    concordant += 0.5;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(AsmilError::Undefined(
            "no comparable pairs for the C-index".into(),
        ));
    }
    Ok(concordant / comparable as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn records(times: &[f64], events: &[bool], risks: &[f64]) -> Vec<SurvivalRecord> {
        times
            .iter()
            .zip(events)
            .zip(risks)
            .map(|((&time, &event), &risk)| SurvivalRecord { time, event, risk })
            .collect()
    }

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
        let v = macro_f1(&[1, 1, 0, 0], &[1, 0, 0, 0], 2).unwrap();
        assert!((v - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let v = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(macro_f1(&[], &[], 2), Err(AsmilError::Domain(_))));
        assert!(macro_f1(&[2], &[0], 2).is_err());
    }

    #[test]
    fn counts_cover_the_dataset() {
        let c = ConfusionCounts::from_predictions(&[0, 2, 1, 1, 0], &[0, 1, 1, 2, 2], 3).unwrap();
        for k in &c.per_class {
            assert_eq!(k.tp + k.fp + k.fn_ + k.tn, 5);
        }
    }

    #[test]
    fn auc_examples() {
        let perfect = vec![vec![0.1, 0.9], vec![0.8, 0.2], vec![0.3, 0.7]];
        let r = macro_auc(&perfect, &[1, 0, 1], 2).unwrap();
        assert_eq!(r.macro_auc, Some(1.0));
        let flat = vec![vec![0.5, 0.5]; 4];
        let r = macro_auc(&flat, &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.5)]);
        let s = [0.9, 0.8, 0.4, 0.3];
        assert_eq!(pairwise_auc(&s, &[true, false, true, false]), Some(0.75));
        let rows: Vec<Vec<f64>> = s.iter().map(|&p| vec![1.0 - p, p]).collect();
        assert_eq!(
            macro_auc(&rows, &[1, 0, 1, 0], 2).unwrap().macro_auc,
            Some(0.75)
        );
    }

    #[test]
    fn absent_class_is_skipped() {
        let rows = vec![vec![0.6, 0.1, 0.3], vec![0.2, 0.5, 0.3]];
        let r = macro_auc(&rows, &[0, 1], 3).unwrap();
        assert_eq!(r.skipped, vec![2]);
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.macro_auc, Some(1.0));
    }

    #[test]
    fn c_index_examples() {
        let t = [1.0, 2.0, 3.0];
        let all = [true, true, true];
        assert_eq!(
            c_index(&records(&t, &all, &[3.0, 2.0, 1.0]), RiskTies::Strict).unwrap(),
            1.0
        );
        assert_eq!(
            c_index(&records(&t, &all, &[1.0, 2.0, 3.0]), RiskTies::Strict).unwrap(),
            0.0
        );
        let censored = records(&t, &[true, false, true], &[3.0, 1.0, 2.0]);
        assert_eq!(c_index(&censored, RiskTies::Strict).unwrap(), 1.0);
        let tied = records(&t, &all, &[1.0, 1.0, 1.0]);
        assert_eq!(c_index(&tied, RiskTies::Strict).unwrap(), 0.0);
        assert_eq!(c_index(&tied, RiskTies::Half).unwrap(), 0.5);
        let none = records(&t, &[false, false, false], &[1.0, 2.0, 3.0]);
        assert!(matches!(
            c_index(&none, RiskTies::Strict),
            Err(AsmilError::Undefined(_))
        ));
        let bad = records(&[0.0, 1.0], &[true, true], &[1.0, 2.0]);
        assert!(matches!(
            c_index(&bad, RiskTies::Strict),
            Err(AsmilError::Domain(_))
        ));
    }

    #[test]
    fn c_index_of_random_risk_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let recs: Vec<SurvivalRecord> = (0..2000)
            .map(|_| SurvivalRecord {
                time: rng.random_range(0.1..10.0),
                event: rng.random_bool(0.7),
                risk: rng.random::<f64>(),
            })
            .collect();
        let c = c_index(&recs, RiskTies::Strict).unwrap();
        assert!((c - 0.5).abs() < 0.02, "{c}");
    }

    proptest! {
        #[test]
        fn auc_ignores_monotone_transforms(
            raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let pos: Vec<bool> = raw.iter().map(|r| r.1).collect();
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(pairwise_auc(&scores, &pos), pairwise_auc(&warped, &pos));
        }

        #[test]
        fn metrics_follow_class_relabeling(
            raw in prop::collection::vec((0usize..3, 0usize..3, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..30)
        ) {
            let perm = [2usize, 0, 1];
            let preds: Vec<usize> = raw.iter().map(|r| r.0).collect();
            let labels: Vec<usize> = raw.iter().map(|r| r.1).collect();
            let scores: Vec<Vec<f64>> = raw.iter().map(|r| vec![r.2, r.3, r.4]).collect();
            let p2: Vec<usize> = preds.iter().map(|&c| perm[c]).collect();
            let l2: Vec<usize> = labels.iter().map(|&c| perm[c]).collect();
            let s2: Vec<Vec<f64>> = scores
                .iter()
                .map(|row| {
                    let mut out = vec![0.0; 3];
                    for c in 0..3 {
                        out[perm[c]] = row[c];
                    }
                    out
                })
                .collect();
            let f_a = macro_f1(&preds, &labels, 3).unwrap();
            let f_b = macro_f1(&p2, &l2, 3).unwrap();
            prop_assert!((f_a - f_b).abs() < 1e-12);
            let a = macro_auc(&scores, &labels, 3).unwrap().macro_auc;
            let b = macro_auc(&s2, &l2, 3).unwrap().macro_auc;
            match (a, b) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }
}
