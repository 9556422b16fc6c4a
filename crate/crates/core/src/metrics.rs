//! Set-based multi-label evaluation: micro precision/recall/F1 and macro,
//! support-weighted and example-based F1.
//!
//! Every zero denominator yields 0, except that a sample whose predicted and
//! gold sets are both empty scores 1 in the example-based average.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl LabelCounts {
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn f1(&self) -> f64 {
        f1(
            ratio(self.tp, self.tp + self.fp),
            ratio(self.tp, self.tp + self.fn_),
        )
    }
}

/// Which labels enter the macro average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MacroAverage {
    /// Labels present in some gold or predicted set.
    #[default]
    Observed,
    /// All `V` labels; never-seen labels contribute an F1 of 0.
    All(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub micro_p: f64,
    pub micro_r: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub example_f1: f64,
    pub per_label: BTreeMap<usize, LabelCounts>,
}

pub(crate) fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn as_sets(sets: &[Vec<usize>]) -> Vec<BTreeSet<usize>> {
    sets.iter().map(|s| s.iter().copied().collect()).collect()
}

/// Per-label true positives, false positives and false negatives.
pub fn confusion_counts(
    pred: &[Vec<usize>],
    gold: &[Vec<usize>],
) -> Result<BTreeMap<usize, LabelCounts>> {
    if pred.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} prediction sets but {} gold sets",
            pred.len(),
            gold.len()
        )));
    }
    let mut counts: BTreeMap<usize, LabelCounts> = BTreeMap::new();
    for (p, g) in as_sets(pred).iter().zip(as_sets(gold).iter()) {
        for &l in p.union(g) {
            let c = counts.entry(l).or_default();
            match (p.contains(&l), g.contains(&l)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                _ => c.fn_ += 1,
            }
        }
    }
    Ok(counts)
}

pub fn evaluate(
    pred: &[Vec<usize>],
    gold: &[Vec<usize>],
    average: MacroAverage,
) -> Result<MetricsReport> {
    if gold.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot evaluate an empty corpus".into(),
        ));
    }
    let per_label = confusion_counts(pred, gold)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for c in per_label.values() {
        tp += c.tp;
        fp += c.fp;
        fn_ += c.fn_;
    }
    let micro_p = ratio(tp, tp + fp);
    let micro_r = ratio(tp, tp + fn_);

    let f1_sum: f64 = per_label.values().map(LabelCounts::f1).sum();
    let macro_f1 = match average {
        MacroAverage::Observed => {
            if per_label.is_empty() {
                0.0
            } else {
                f1_sum / per_label.len() as f64
            }
        }
        MacroAverage::All(v) => {
            if v == 0 {
                0.0
            } else {
                f1_sum / v as f64
            }
        }
    };

    let support: usize = per_label.values().map(LabelCounts::support).sum();
    let weighted: f64 = per_label
        .values()
        .map(|c| c.support() as f64 * c.f1())
        .sum();
    let weighted_f1 = if support == 0 {
        0.0
    } else {
        weighted / support as f64
    };

    let mut eb = 0.0;
    for (p, g) in as_sets(pred).iter().zip(as_sets(gold).iter()) {
        eb += example_f1(p, g);
    }
    Ok(MetricsReport {
        micro_p,
        micro_r,
        micro_f1: f1(micro_p, micro_r),
        macro_f1,
        weighted_f1,
        example_f1: eb / gold.len() as f64,
        per_label,
    })
}

fn example_f1(p: &BTreeSet<usize>, g: &BTreeSet<usize>) -> f64 {
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let hit = p.intersection(g).count();
    f1(ratio(hit, p.len()), ratio(hit, g.len()))
}

impl MetricsReport {
    pub fn values(&self) -> [(&'static str, f64); 6] {
        [
            ("microP", self.micro_p),
            ("microR", self.micro_r),
            ("microF1", self.micro_f1),
            ("maF1", self.macro_f1),
            ("weF1", self.weighted_f1),
            ("ebF1", self.example_f1),
        ]
    }

    /// `metric=value` lines with six decimals.
    pub fn to_kv(&self) -> String {
        self.values()
            .iter()
            .map(|(k, v)| format!("{k}={v:.6}\n"))
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8} {:>8}\n", "metric", "value");
        for (k, v) in self.values() {
            let _ = writeln!(s, "{k:<8} {v:>8.4}");
        }
        s
    }

    /// Aligned per-label TP/FP/FN table; `name` maps ids to display names.
    pub fn label_table(&self, name: impl Fn(usize) -> String) -> String {
        let names: Vec<String> = self.per_label.keys().map(|&l| name(l)).collect();
        let w = names.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut s = format!(
            "{:<w$} {:>6} {:>6} {:>6} {:>8}\n",
            "label", "tp", "fp", "fn", "f1"
        );
        for (n, c) in names.iter().zip(self.per_label.values()) {
            let _ = writeln!(
                s,
                "{n:<w$} {:>6} {:>6} {:>6} {:>8.4}",
                c.tp,
                c.fp,
                c.fn_,
                c.f1()
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_counts() {
        let c = confusion_counts(&[vec![0]], &[vec![0]]).unwrap();
        assert_eq!(
            c[&0],
            LabelCounts {
                tp: 1,
                fp: 0,
                fn_: 0
            }
        );
        let c = confusion_counts(&[vec![0]], &[vec![1]]).unwrap();
        assert_eq!(c[&0].fp, 1);
        assert_eq!(c[&1].fn_, 1);
        assert!(confusion_counts(&[vec![0]], &[]).is_err());
    }

    #[test]
    fn two_sample_case() {
        let pred = vec![vec![0], vec![1, 2, 3]];
        let gold = vec![vec![0, 1], vec![1, 2]];
        let r = evaluate(&pred, &gold, MacroAverage::Observed).unwrap();
        assert_eq!(r.micro_p, 0.75);
        assert_eq!(r.micro_r, 0.75);
        assert_eq!(r.micro_f1, 0.75);
    }

    #[test]
    fn perfect_and_empty() {
        let gold = vec![vec![0, 1], vec![2], vec![]];
        let r = evaluate(&gold, &gold, MacroAverage::Observed).unwrap();
        for (k, v) in r.values() {
            assert_eq!(v, 1.0, "{k}");
        }
        let r = evaluate(
            &[vec![], vec![]],
            &[vec![1], vec![2]],
            MacroAverage::Observed,
        )
        .unwrap();
        assert_eq!((r.micro_p, r.micro_r, r.micro_f1), (0.0, 0.0, 0.0));
        assert!(evaluate(&[], &[], MacroAverage::Observed).is_err());
    }

    #[test]
    fn macro_over_all_labels_dilutes() {
        let gold = vec![vec![0], vec![1]];
        let obs = evaluate(&gold, &gold, MacroAverage::Observed).unwrap();
        let all = evaluate(&gold, &gold, MacroAverage::All(4)).unwrap();
        assert_eq!(obs.macro_f1, 1.0);
        assert_eq!(all.macro_f1, 0.5);
    }

    #[test]
    fn kv_format() {
        let r = evaluate(&[vec![0]], &[vec![0, 1]], MacroAverage::Observed).unwrap();
        let kv = r.to_kv();
        assert!(kv.contains("microP=1.000000\n"));
        assert!(kv.contains("microR=0.500000\n"));
        assert_eq!(kv.lines().count(), 6);
    }
}
