//! Regression and classification KPIs: MSE/RMSE, confusion matrix,
//! per-class precision/recall/f1 and total accuracy.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("label {0} is not in the class list")]
    UnknownLabel(i64),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("confusion csv line {line}: {msg}")]
    MalformedCsv { line: usize, msg: String },
}

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<(), MetricsError> {
    if y.len() != yhat.len() {
        return Err(MetricsError::LengthMismatch(y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    check_pair(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    mse(y, yhat).map(f64::sqrt)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<i64>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    /// CSV with a header row of predicted classes and one row per true class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for c in &self.classes {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            write!(s, "{c}").unwrap();
            for n in row {
                write!(s, ",{n}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Inverse of [`ConfusionMatrix::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let bad = |line: usize, msg: &str| MetricsError::MalformedCsv { line, msg: msg.to_string() };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(MetricsError::EmptyMatrix)?;
        let mut cols = header.split(',');
        if cols.next() != Some("true\\pred") {
            return Err(bad(1, "header must start with `true\\pred`"));
        }
        let classes = cols
            .map(|c| c.trim().parse::<i64>().map_err(|_| bad(1, &format!("bad class `{c}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut counts = Vec::with_capacity(classes.len());
        for (i, line) in lines {
            let mut cells = line.split(',');
            let label = cells.next().unwrap_or_default().trim();
            let expected = classes.get(counts.len()).ok_or_else(|| bad(i + 1, "more rows than classes"))?;
            if label.parse::<i64>().ok() != Some(*expected) {
                return Err(bad(i + 1, &format!("row label `{label}` should be {expected}")));
            }
            let row = cells
                .map(|c| c.trim().parse::<u64>().map_err(|_| bad(i + 1, &format!("bad count `{c}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            if row.len() != classes.len() {
                return Err(bad(i + 1, "row length differs from header"));
            }
            counts.push(row);
        }
        if counts.len() != classes.len() {
            return Err(bad(text.lines().count(), "fewer rows than classes"));
        }
        Ok(ConfusionMatrix { classes, counts })
    }
}

pub fn confusion(
    true_labels: &[i64],
    pred_labels: &[i64],
    classes: &[i64],
) -> Result<ConfusionMatrix, MetricsError> {
    if true_labels.len() != pred_labels.len() {
        return Err(MetricsError::LengthMismatch(true_labels.len(), pred_labels.len()));
    }
    let index: BTreeMap<i64, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let lookup = |l: &i64| index.get(l).copied().ok_or(MetricsError::UnknownLabel(*l));
    let mut counts = vec![vec![0u64; classes.len()]; classes.len()];
    for (t, p) in true_labels.iter().zip(pred_labels) {
        counts[lookup(t)?][lookup(p)?] += 1;
    }
    Ok(ConfusionMatrix { classes: classes.to_vec(), counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: i64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a zero denominator forced a value to 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub total: u64,
}

pub fn report(cm: &ConfusionMatrix) -> Result<ClassificationReport, MetricsError> {
    let total = cm.total();
    if cm.classes.is_empty() || total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let classes = cm
        .classes
        .iter()
        .enumerate()
        .map(|(i, &class)| {
            let tp = cm.counts[i][i] as f64;
            let predicted = cm.col_sum(i);
            let support = cm.row_sum(i);
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                class,
                precision,
                recall,
                f1,
                support,
                degenerate: predicted == 0 || support == 0,
            }
        })
        .collect();
    Ok(ClassificationReport { classes, accuracy: cm.trace() as f64 / total as f64, total })
}

impl ClassificationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Two-decimal table: Class, Precision, Recall, f1-Sc., Support, then Acc.
impl fmt::Display for ClassificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<7}{:>10}{:>8}{:>8}{:>9}", "Class", "Precision", "Recall", "f1-Sc.", "Support")?;
        for c in &self.classes {
            writeln!(
                f,
                "{:<7}{:>10.2}{:>8.2}{:>8.2}{:>9}",
                c.class, c.precision, c.recall, c.f1, c.support
            )?;
        }
        writeln!(f, "{:<7}{:>10}{:>8}{:>8}{:>9.2}", "", "", "", "Acc", self.accuracy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confusion_csv_round_trips() {
        let cm = ConfusionMatrix { classes: vec![1, 2, 5], counts: vec![vec![3, 0, 1], vec![0, 2, 0], vec![4, 0, 9]] };
        assert_eq!(ConfusionMatrix::from_csv(&cm.to_csv()).unwrap(), cm);
        assert!(matches!(
            ConfusionMatrix::from_csv("true\\pred,1,2\n1,3,0\n"),
            Err(MetricsError::MalformedCsv { .. })
        ));
        assert!(ConfusionMatrix::from_csv("true\\pred,1\n2,3\n").is_err());
    }

    #[test]
    fn mse_basics() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.5355).abs() < 1e-4);
        assert_eq!(mse(&[], &[]).unwrap_err(), MetricsError::EmptyInput);
        assert_eq!(mse(&[1.0], &[]).unwrap_err(), MetricsError::LengthMismatch(1, 0));
    }

    #[test]
    fn mse_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<f64> = (0..257).map(|_| rng.random_range(-50.0..50.0)).collect();
        let yhat: Vec<f64> = (0..257).map(|_| rng.random_range(-50.0..50.0)).collect();
        let mut acc = 0.0;
        for i in 0..y.len() {
            let d = y[i] - yhat[i];
            acc += d * d;
        }
        let oracle = acc / y.len() as f64;
        assert!((mse(&y, &yhat).unwrap() - oracle).abs() < 1e-12 * oracle.max(1.0));
        let r = rmse(&y, &yhat).unwrap();
        assert!((r * r - oracle).abs() < 1e-12 * oracle);
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let labels = [1, 2, 2, 3, 3, 3];
        let cm = confusion(&labels, &labels, &[1, 2, 3]).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 3]]);
        let r = report(&cm).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.classes.iter().all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));
    }

    #[test]
    fn constant_prediction_fills_one_column() {
        let cm = confusion(&[1, 2, 3, 3], &[2, 2, 2, 2], &[1, 2, 3]).unwrap();
        for (i, row) in cm.counts.iter().enumerate() {
            assert_eq!(row[0] + row[2], 0);
            assert_eq!(row[1], cm.row_sum(i));
        }
        let r = report(&cm).unwrap();
        assert!(r.classes[0].degenerate);
        assert_eq!(r.classes[0].precision, 0.0);
        assert_eq!(r.classes[0].f1, 0.0);
    }

    #[test]
    fn unknown_label() {
        assert_eq!(confusion(&[1], &[4], &[1, 2]).unwrap_err(), MetricsError::UnknownLabel(4));
    }

    #[test]
    fn empty_matrix() {
        let cm = confusion(&[], &[], &[1, 2]).unwrap();
        assert_eq!(report(&cm).unwrap_err(), MetricsError::EmptyMatrix);
    }

    #[test]
    fn confusion_matches_hashmap_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let classes = [0, 1, 2, 5, 7];
        let t: Vec<i64> = (0..200).map(|_| classes[rng.random_range(0..5)]).collect();
        let p: Vec<i64> = (0..200).map(|_| classes[rng.random_range(0..5)]).collect();
        let mut oracle = std::collections::HashMap::new();
        for (a, b) in t.iter().zip(&p) {
            *oracle.entry((*a, *b)).or_insert(0u64) += 1;
        }
        let cm = confusion(&t, &p, &classes).unwrap();
        for (i, a) in classes.iter().enumerate() {
            for (j, b) in classes.iter().enumerate() {
                assert_eq!(cm.counts[i][j], oracle.get(&(*a, *b)).copied().unwrap_or(0));
            }
        }
        assert_eq!(cm.total(), 200);
    }

    #[test]
    fn f1_for_reported_rows() {
        // P = 1.00, R = 0.93 (27 of 29 recalled, nothing else predicted as this class)
        let f1 = |p: f64, r: f64| 2.0 * p * r / (p + r);
        assert_eq!(format!("{:.2}", f1(1.0, 27.0 / 29.0)), "0.96");
        // P = 0.88 (14 of 16), R = 1.00
        assert_eq!(format!("{:.2}", f1(14.0 / 16.0, 1.0)), "0.93");
    }

    #[test]
    fn table_rendering() {
        let cm = confusion(&[1, 1, 2], &[1, 2, 2], &[1, 2]).unwrap();
        let text = report(&cm).unwrap().to_string();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("Class"));
        assert!(lines[1].contains("1.00") && lines[1].contains("0.50") && lines[1].contains("0.67"));
        assert!(lines[3].trim_start().starts_with("Acc") && lines[3].ends_with("0.67"));
    }

    fn arb_matrix() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (2usize..6).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(0u64..20, n), n))
    }

    proptest! {
        #[test]
        fn report_invariants(counts in arb_matrix()) {
            let n = counts.len();
            let cm = ConfusionMatrix { classes: (0..n as i64).collect(), counts };
            prop_assume!(cm.total() > 0);
            let r = report(&cm).unwrap();
            let mut weighted = 0.0;
            for c in &r.classes {
                for v in [c.precision, c.recall, c.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                if c.precision > 0.0 && c.recall > 0.0 {
                    prop_assert!(c.f1 <= c.precision.max(c.recall) + 1e-15);
                    prop_assert!(c.f1 >= c.precision.min(c.recall) - 1e-15);
                }
                weighted += c.support as f64 * c.recall;
            }
            let supports: u64 = r.classes.iter().map(|c| c.support).sum();
            prop_assert_eq!(supports, cm.total());
            prop_assert!((r.accuracy - weighted / supports as f64).abs() < 1e-12);
        }

        #[test]
        fn class_permutation_permutes_rows(counts in arb_matrix(), rot in 1usize..5) {
            let n = counts.len();
            let cm = ConfusionMatrix { classes: (0..n as i64).collect(), counts };
            prop_assume!(cm.total() > 0);
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let permuted = ConfusionMatrix {
                classes: perm.iter().map(|&i| cm.classes[i]).collect(),
                counts: perm.iter().map(|&i| perm.iter().map(|&j| cm.counts[i][j]).collect()).collect(),
            };
            let a = report(&cm).unwrap();
            let b = report(&permuted).unwrap();
            prop_assert_eq!(a.accuracy, b.accuracy);
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(&b.classes[k], &a.classes[i]);
            }
        }
    }
}
