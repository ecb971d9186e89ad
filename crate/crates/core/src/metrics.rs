//! Multi-class evaluation metrics: confusion matrix, per-class and macro
//! precision/recall/F1/accuracy, and one-vs-rest ROC curves.

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Result};

/// Square count matrix; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix(pub Vec<Vec<u64>>);

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.0[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.0.iter().map(|row| row[c]).sum()
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, row) in self.0.iter().enumerate() {
            out.push_str(class_names.get(i).map(String::as_str).unwrap_or("?"));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(data_err!(
            "label length mismatch: {} true vs {} predicted",
            truth.len(),
            pred.len()
        ));
    }
    let mut cm = vec![vec![0u64; k]; k];
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        if t >= k || p >= k {
            return Err(data_err!(
                "label out of range at sample {i}: true {t}, predicted {p}, classes {k}"
            ));
        }
        cm[t][p] += 1;
    }
    Ok(ConfusionMatrix(cm))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    pub fn values(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: ClassMetrics,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class metrics with one-vs-rest accuracy `(TP + TN) / N`.
///
/// Each per-class value is a single integer division, so it is the correctly
/// rounded value of the underlying rational. F1 uses the equivalent form
/// `2·TP / (rowsum + colsum)`.
pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassificationReport> {
    let k = cm.num_classes();
    if cm.0.iter().any(|row| row.len() != k) {
        return Err(data_err!("confusion matrix must be square ({k} rows)"));
    }
    let n = cm.total();
    if n == 0 {
        return Err(data_err!("confusion matrix is all zeros"));
    }
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.0[c][c];
            let row = cm.row_sum(c);
            let col = cm.col_sum(c);
            let tn = n - row - col + tp;
            ClassMetrics {
                accuracy: ratio(tp + tn, n),
                precision: ratio(tp, col),
                recall: ratio(tp, row),
                f1: ratio(2 * tp, row + col),
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let macro_avg = ClassMetrics {
        accuracy: mean(|m| m.accuracy),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    Ok(ClassificationReport {
        per_class,
        macro_avg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` pairs from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            out.push_str(&format!("{f},{t}\n"));
        }
        out
    }
}

/// ROC curve for a binary one-vs-rest problem. Thresholds sweep the distinct
/// scores in descending order; equal scores form a single step.
pub fn roc_curve(scores: &[f64], truths: &[bool]) -> Result<RocCurve> {
    if scores.len() != truths.len() {
        return Err(data_err!(
            "{} scores but {} labels",
            scores.len(),
            truths.len()
        ));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(data_err!("score {i} is not finite"));
    }
    let pos = truths.iter().filter(|&&t| t).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(data_err!(
            "ROC needs both classes present ({pos} positive, {neg} negative)"
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truths[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (f0, t0) = *points.last().expect("nonempty");
        let (f1, t1) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        auc += (f1 - f0) * (t0 + t1) / 2.0;
        points.push((f1, t1));
    }
    Ok(RocCurve {
        points,
        auc: auc.clamp(0.0, 1.0),
    })
}

/// One-vs-rest ROC for every class from row-major probability rows.
pub fn roc_per_class(probs: &[Vec<f64>], truth: &[usize], k: usize) -> Result<Vec<RocCurve>> {
    (0..k)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let labels: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            roc_curve(&scores, &labels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(cm.0, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let cm = confusion_matrix(&[0, 0], &[1, 2], 3).unwrap();
        assert_eq!(cm.0, vec![vec![0, 1, 1], vec![0, 0, 0], vec![0, 0, 0]]);
        assert!(matches!(
            confusion_matrix(&[3], &[0], 3),
            Err(crate::Error::Data(_))
        ));
    }

    #[test]
    fn two_class_report() {
        let r = classification_report(&ConfusionMatrix(vec![vec![2, 0], vec![1, 1]])).unwrap();
        let c0 = r.per_class[0];
        let c1 = r.per_class[1];
        assert!((c0.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c0.recall, 1.0);
        assert!((c0.f1 - 0.8).abs() < 1e-15);
        assert_eq!(c1.precision, 1.0);
        assert_eq!(c1.recall, 0.5);
        assert!((c1.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c0.accuracy, 0.75);
    }

    #[test]
    fn perfect_and_degenerate() {
        let r = classification_report(&ConfusionMatrix(vec![
            vec![2, 0, 0],
            vec![0, 2, 0],
            vec![0, 0, 2],
        ]))
        .unwrap();
        for m in r.per_class.iter().chain([&r.macro_avg]) {
            assert_eq!(m.values(), [1.0; 4]);
        }
        // Nothing predicted as class 1.
        let r = classification_report(&ConfusionMatrix(vec![vec![3, 0], vec![2, 0]])).unwrap();
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].f1, 0.0);
        assert!(classification_report(&ConfusionMatrix(vec![vec![0, 0], vec![0, 0]])).is_err());
    }

    #[test]
    fn roc_extremes() {
        let s = [0.9, 0.8, 0.2, 0.1];
        let r = roc_curve(&s, &[true, true, false, false]).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.points.last(), Some(&(1.0, 1.0)));
        let r = roc_curve(&s, &[false, false, true, true]).unwrap();
        assert_eq!(r.auc, 0.0);
        assert!(roc_curve(&s, &[true; 4]).is_err());
    }

    #[test]
    fn roc_ties_form_one_step() {
        let r = roc_curve(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]).unwrap();
        assert_eq!(r.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(r.auc, 0.5);
    }

    fn pairwise_auc(scores: &[f64], truths: &[bool]) -> f64 {
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for (i, &ti) in truths.iter().enumerate() {
            for (j, &tj) in truths.iter().enumerate() {
                if ti && !tj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        acc += 1.0;
                    } else if scores[i] == scores[j] {
                        acc += 0.5;
                    }
                }
            }
        }
        acc / pairs
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(
            data in proptest::collection::vec((0u8..12, any::<bool>()), 30)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 11.0).collect();
            let truths: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(truths.iter().any(|&t| t) && truths.iter().any(|&t| !t));
            let r = roc_curve(&scores, &truths).unwrap();
            prop_assert!((r.auc - pairwise_auc(&scores, &truths)).abs() < 1e-9);
            for w in r.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).exp()).collect();
            let r2 = roc_curve(&squashed, &truths).unwrap();
            prop_assert!((r.auc - r2.auc).abs() < 1e-12);
        }

        #[test]
        fn report_values_in_unit_interval(
            cells in proptest::collection::vec(0u64..20, 9)
        ) {
            let cm = ConfusionMatrix(cells.chunks(3).map(|c| c.to_vec()).collect());
            prop_assume!(cm.total() > 0);
            let r = classification_report(&cm).unwrap();
            for m in &r.per_class {
                for v in m.values() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            let mean_f1 = r.per_class.iter().map(|m| m.f1).sum::<f64>() / 3.0;
            prop_assert!((mean_f1 - r.macro_avg.f1).abs() < 1e-12);
        }
    }
}
