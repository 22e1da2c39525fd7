//! Accuracy, F1, forgetting and confusion matrices. All scores are percent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Position (within `subset`) of the largest logit; ties go to the lowest
/// position.
pub fn argmax_subset<T: Real>(row: &[T], subset: &[usize]) -> usize {
    let mut best = 0;
    for (p, &u) in subset.iter().enumerate().skip(1) {
        if row[u] > row[subset[best]] {
            best = p;
        }
    }
    best
}

fn check_rows<T: Real>(logits: &Tensor<T>, rows: usize, subset: &[usize]) -> Result<usize> {
    let [n, width] = logits.dims2("logits")?;
    if n == 0 {
        return Err(Error::Contract("cannot score an empty evaluation set".into()));
    }
    if n != rows {
        return Err(Error::Dimension(format!("{n} logit rows for {rows} labels")));
    }
    if subset.is_empty() {
        return Err(Error::Contract("empty class subset".into()));
    }
    if let Some(&u) = subset.iter().find(|&&u| u >= width) {
        return Err(Error::Dimension(format!("unit {u} outside {width} logits")));
    }
    Ok(width)
}

/// Percentage of rows whose argmax over `subset` equals the true unit.
/// `truth` holds global unit indices.
pub fn accuracy<T: Real>(logits: &Tensor<T>, truth: &[usize], subset: &[usize]) -> Result<f64> {
    let width = check_rows(logits, truth.len(), subset)?;
    let correct = logits
        .data()
        .chunks(width)
        .zip(truth)
        .filter(|(row, &t)| subset[argmax_subset(row, subset)] == t)
        .count();
    Ok(100.0 * correct as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F1Average {
    #[default]
    Micro,
    Macro,
}

/// Decision counts of one class (or pooled over classes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn f1(self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        let p = self.tp as f64 / (self.tp + self.fp) as f64;
        let r = self.tp as f64 / (self.tp + self.fn_) as f64;
        200.0 * p * r / (p + r)
    }
}

/// F1 of sigmoid decisions `sigmoid(logit) >= threshold` on `units` against
/// multi-hot `truth` `[N, units.len()]`.
pub fn f1_at_threshold<T: Real>(
    logits: &Tensor<T>,
    units: &[usize],
    truth: &Tensor<T>,
    threshold: f64,
    average: F1Average,
) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Parameter(format!("threshold {threshold} outside (0, 1)")));
    }
    let [n, k] = truth.dims2("f1 truth")?;
    if k != units.len() {
        return Err(Error::Dimension(format!("{k} truth columns for {} units", units.len())));
    }
    let width = check_rows(logits, n, units)?;
    let mut per_class = vec![Counts::default(); k];
    for (row, y) in logits.data().chunks(width).zip(truth.data().chunks(k)) {
        for (c, &u) in units.iter().enumerate() {
            let p = 1.0 / (1.0 + (-row[u].f64()).exp());
            let predicted = p >= threshold;
            let actual = y[c] > T::of(0.5);
            let counts = &mut per_class[c];
            match (predicted, actual) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(match average {
        F1Average::Micro => {
            let pooled = per_class.iter().fold(Counts::default(), |a, c| Counts {
                tp: a.tp + c.tp,
                fp: a.fp + c.fp,
                fn_: a.fn_ + c.fn_,
            });
            pooled.f1()
        }
        F1Average::Macro => per_class.iter().map(|c| c.f1()).sum::<f64>() / k as f64,
    })
}

/// Drop in percentage points from a task's first evaluation to now.
///
/// Scores are stored to 1e-9 p.p.; the difference is rounded to that grid so
/// reported values such as `94.0 → 88.9` come out as exactly `5.1`.
pub fn forgetting(first: f64, current: f64) -> f64 {
    let d = ((first - current) * 1e9).round() / 1e9;
    if d == 0.0 {
        0.0
    } else {
        d
    }
}

/// Rows are true classes, columns predictions, both in `classes` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    /// First index of the newest task's classes; everything before it is old.
    pub boundary: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        100.0 * self.diagonal() as f64 / self.total() as f64
    }

    /// Fraction of old-class examples predicted as some new class.
    pub fn old_into_new_fraction(&self) -> f64 {
        let old = &self.counts[..self.boundary];
        let total: u64 = old.iter().flatten().sum();
        let moved: u64 = old.iter().map(|r| r[self.boundary..].iter().sum::<u64>()).sum();
        if total == 0 {
            0.0
        } else {
            moved as f64 / total as f64
        }
    }
}

pub fn confusion_matrix<T: Real>(
    logits: &Tensor<T>,
    truth: &[usize],
    units: &[usize],
    classes: Vec<String>,
    boundary: usize,
) -> Result<ConfusionMatrix> {
    let width = check_rows(logits, truth.len(), units)?;
    let c = units.len();
    let mut counts = vec![vec![0u64; c]; c];
    for (row, &t) in logits.data().chunks(width).zip(truth) {
        let r = units
            .iter()
            .position(|&u| u == t)
            .ok_or_else(|| Error::Label(format!("true unit {t} is not among the scored classes")))?;
        counts[r][argmax_subset(row, units)] += 1;
    }
    Ok(ConfusionMatrix {
        classes,
        counts,
        boundary,
    })
}
