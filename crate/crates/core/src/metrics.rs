//! ON/OFF classification metrics.
//!
//! Per-appliance accuracy, recall, precision and F1 over binary state
//! sequences, plus unweighted macro averages across appliances. Any
//! 0/0 denominator is defined as 0.

use crate::error::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Elementwise confusion tally of two equal-length binary sequences.
pub fn confusion(pred: &[bool], truth: &[bool]) -> Result<ConfusionCounts, CoreError> {
    if pred.is_empty() {
        return Err(CoreError::InvalidInput("empty sequences".into()));
    }
    if pred.len() != truth.len() {
        return Err(CoreError::InvalidInput(format!(
            "length mismatch: pred {} vs truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// (precision, recall, f1). 0/0 denominators yield 0.
pub fn precision_recall_f1(c: &ConfusionCounts) -> (f64, f64, f64) {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

pub fn accuracy(c: &ConfusionCounts) -> Result<f64, CoreError> {
    if c.total() == 0 {
        return Err(CoreError::InvalidInput("all-zero confusion counts".into()));
    }
    Ok(ratio(c.tp + c.tn, c.total()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub appliance: String,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl MetricsRow {
    pub fn from_counts(appliance: impl Into<String>, c: &ConfusionCounts) -> Result<Self, CoreError> {
        let (precision, recall, f1) = precision_recall_f1(c);
        Ok(Self {
            appliance: appliance.into(),
            accuracy: accuracy(c)?,
            recall,
            precision,
            f1,
        })
    }
}

/// Per-appliance metrics plus their unweighted macro averages.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub average: MetricsRow,
}

impl MetricsReport {
    pub fn new(rows: Vec<MetricsRow>) -> Result<Self, CoreError> {
        let average = macro_average(&rows)?;
        Ok(Self { rows, average })
    }

    /// CSV layout mirroring the evaluation tables: one row per
    /// appliance, trailing `average` row, 4 decimal places.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("appliance,accuracy,recall,precision,f1\n");
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4}\n",
                r.appliance, r.accuracy, r.recall, r.precision, r.f1
            ));
        }
        out
    }
}

/// Unweighted arithmetic mean of each metric column.
pub fn macro_average(rows: &[MetricsRow]) -> Result<MetricsRow, CoreError> {
    if rows.is_empty() {
        return Err(CoreError::InvalidInput("no appliance rows to average".into()));
    }
    let n = rows.len() as f64;
    Ok(MetricsRow {
        appliance: "average".into(),
        accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / n,
        recall: rows.iter().map(|r| r.recall).sum::<f64>() / n,
        precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
        f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_hand_count() {
        let c = confusion(&[true, true, false, false], &[true, false, false, true]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
    }

    #[test]
    fn confusion_identity() {
        let s = [true, false, true];
        let c = confusion(&s, &s).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, tn: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn confusion_all_miss() {
        let c = confusion(&[false, false], &[true, true]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, tn: 0, fp: 0, fn_: 2 });
    }

    #[test]
    fn confusion_length_mismatch() {
        assert!(confusion(&[true], &[true, false]).is_err());
    }

    #[test]
    fn prf_hand_case() {
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 0 };
        let (p, r, f1) = precision_recall_f1(&c);
        assert_eq!((p, r, f1), (0.75, 0.75, 0.75));
    }

    #[test]
    fn prf_perfect() {
        let c = ConfusionCounts { tp: 7, fp: 0, fn_: 0, tn: 0 };
        assert_eq!(precision_recall_f1(&c), (1.0, 1.0, 1.0));
    }

    #[test]
    fn prf_degenerate_zero() {
        let c = ConfusionCounts::default();
        assert_eq!(precision_recall_f1(&c), (0.0, 0.0, 0.0));
    }

    #[test]
    fn accuracy_hand_case() {
        let c = ConfusionCounts { tp: 1, tn: 1, fp: 1, fn_: 1 };
        assert_eq!(accuracy(&c).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_perfect_and_zero() {
        assert_eq!(accuracy(&ConfusionCounts { tp: 2, tn: 3, fp: 0, fn_: 0 }).unwrap(), 1.0);
        assert_eq!(accuracy(&ConfusionCounts { tp: 0, tn: 0, fp: 1, fn_: 1 }).unwrap(), 0.0);
        assert!(accuracy(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn macro_average_mean_and_identity() {
        let row = |a: f64| MetricsRow { appliance: "x".into(), accuracy: a, recall: a, precision: a, f1: a };
        let avg = macro_average(&[row(1.0), row(0.8)]).unwrap();
        assert!((avg.accuracy - 0.9).abs() < 1e-12);
        let one = macro_average(&[row(0.7)]).unwrap();
        assert_eq!(one.accuracy, 0.7);
        assert!(macro_average(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![MetricsRow {
            appliance: "fan_1".into(),
            accuracy: 0.5,
            recall: 0.25,
            precision: 0.125,
            f1: 1.0 / 6.0,
        }];
        let report = MetricsReport::new(rows).unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "appliance,accuracy,recall,precision,f1");
        assert_eq!(lines.next().unwrap(), "fan_1,0.5000,0.2500,0.1250,0.1667");
        assert_eq!(lines.next().unwrap(), "average,0.5000,0.2500,0.1250,0.1667");
    }

    proptest! {
        #[test]
        fn confusion_matches_brute_force(seq in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..100)) {
            let pred: Vec<bool> = seq.iter().map(|(p, _)| *p).collect();
            let truth: Vec<bool> = seq.iter().map(|(_, t)| *t).collect();
            let c = confusion(&pred, &truth).unwrap();
            // independent tally
            let tp = seq.iter().filter(|(p, t)| *p && *t).count() as u64;
            let tn = seq.iter().filter(|(p, t)| !*p && !*t).count() as u64;
            let fp = seq.iter().filter(|(p, t)| *p && !*t).count() as u64;
            let fn_ = seq.iter().filter(|(p, t)| !*p && *t).count() as u64;
            prop_assert_eq!(c, ConfusionCounts { tp, tn, fp, fn_ });
            prop_assert_eq!(c.total() as usize, seq.len());
        }

        #[test]
        fn metrics_in_unit_interval(tp in 0u64..50, tn in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
            let c = ConfusionCounts { tp, tn, fp, fn_ };
            let (p, r, f1) = precision_recall_f1(&c);
            for v in [p, r, f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if c.total() > 0 {
                let a = accuracy(&c).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
            }
            // F1 is the harmonic mean whenever precision and recall are positive
            if p > 0.0 && r > 0.0 {
                prop_assert!((f1 - 2.0 / (1.0 / p + 1.0 / r)).abs() < 1e-12);
            }
        }

        #[test]
        fn metrics_permutation_invariant(seq in proptest::collection::vec((any::<bool>(), any::<bool>()), 2..60), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = seq.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let split = |s: &[(bool, bool)]| -> (Vec<bool>, Vec<bool>) {
                (s.iter().map(|(p, _)| *p).collect(), s.iter().map(|(_, t)| *t).collect())
            };
            let (p1, t1) = split(&seq);
            let (p2, t2) = split(&shuffled);
            prop_assert_eq!(confusion(&p1, &t1).unwrap(), confusion(&p2, &t2).unwrap());
        }
    }
}
