//! Confusion matrices, macro-averaged classification metrics, per-class
//! true-positive change tables, and the exact Wilcoxon signed-rank test.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    /// Row-major: counts[true * num_classes + predicted].
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn get(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.num_classes + pred_class]
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.get(class, class)
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|j| self.get(class, j)).sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, class)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for i in 0..self.num_classes {
            out.push_str(&class_names[i]);
            for j in 0..self.num_classes {
                out.push_str(&format!(",{}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(
    labels: &[usize],
    predictions: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::DimMismatch(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = vec![0u64; num_classes * num_classes];
    for (&t, &p) in labels.iter().zip(predictions) {
        if t >= num_classes {
            return Err(Error::IndexOutOfRange {
                what: "label",
                index: t,
                size: num_classes,
            });
        }
        if p >= num_classes {
            return Err(Error::IndexOutOfRange {
                what: "prediction",
                index: p,
                size: num_classes,
            });
        }
        counts[t * num_classes + p] += 1;
    }
    Ok(ConfusionMatrix { num_classes, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Macro-averaged precision/recall/F1 with 0 substituted on zero division.
pub fn metrics_from_cm(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut per_class = Vec::with_capacity(cm.num_classes);
    let mut correct = 0u64;
    for c in 0..cm.num_classes {
        let tp = cm.true_positives(c) as f64;
        correct += cm.true_positives(c);
        let pred = cm.col_sum(c) as f64;
        let actual = cm.row_sum(c) as f64;
        let precision = if pred > 0.0 { tp / pred } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics { precision, recall, f1 });
    }
    let k = cm.num_classes as f64;
    Ok(MetricsReport {
        accuracy: correct as f64 / total as f64,
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpChangeRow {
    pub class_name: String,
    pub tp_before: u64,
    pub tp_after: u64,
    pub delta: i64,
    /// delta / (n - tp_before) * 100; None when tp_before == n
    /// (no headroom left, division undefined).
    pub pct_of_headroom: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpChangeTable {
    pub per_class_n: u64,
    pub rows: Vec<TpChangeRow>,
    pub mean_tp_before: f64,
    pub mean_tp_after: f64,
    pub mean_delta: f64,
    /// Mean over rows where the percentage is defined.
    pub mean_pct_of_headroom: Option<f64>,
}

/// Per-class true-positive changes between two confusion matrices on the
/// same balanced test set with `per_class_n` samples per class.
pub fn tp_change_table(
    before: &ConfusionMatrix,
    after: &ConfusionMatrix,
    class_names: &[String],
    per_class_n: u64,
) -> Result<TpChangeTable> {
    if before.num_classes != after.num_classes {
        return Err(Error::DimMismatch(format!(
            "{} vs {} classes",
            before.num_classes, after.num_classes
        )));
    }
    if class_names.len() != before.num_classes {
        return Err(Error::DimMismatch(format!(
            "{} class names for {} classes",
            class_names.len(),
            before.num_classes
        )));
    }
    let mut rows = Vec::with_capacity(before.num_classes);
    for c in 0..before.num_classes {
        let tp1 = before.true_positives(c);
        let tp2 = after.true_positives(c);
        let delta = tp2 as i64 - tp1 as i64;
        let headroom = per_class_n as i64 - tp1 as i64;
        let pct = if headroom > 0 {
            Some(delta as f64 / headroom as f64 * 100.0)
        } else {
            None
        };
        rows.push(TpChangeRow {
            class_name: class_names[c].clone(),
            tp_before: tp1,
            tp_after: tp2,
            delta,
            pct_of_headroom: pct,
        });
    }
    let k = rows.len() as f64;
    let mean_tp_before = rows.iter().map(|r| r.tp_before as f64).sum::<f64>() / k;
    let mean_tp_after = rows.iter().map(|r| r.tp_after as f64).sum::<f64>() / k;
    let mean_delta = rows.iter().map(|r| r.delta as f64).sum::<f64>() / k;
    let defined: Vec<f64> = rows.iter().filter_map(|r| r.pct_of_headroom).collect();
    let mean_pct = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(TpChangeTable {
        per_class_n,
        rows,
        mean_tp_before,
        mean_tp_after,
        mean_delta,
        mean_pct_of_headroom: mean_pct,
    })
}

impl TpChangeTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,tp_before,tp_after,delta,pct_of_headroom\n");
        for r in &self.rows {
            let pct = r
                .pct_of_headroom
                .map(|p| format!("{p:.4}"))
                .unwrap_or_else(|| "N/A".into());
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.class_name, r.tp_before, r.tp_after, r.delta, pct
            ));
        }
        let mean_pct = self
            .mean_pct_of_headroom
            .map(|p| format!("{p:.4}"))
            .unwrap_or_else(|| "N/A".into());
        out.push_str(&format!(
            "mean,{:.4},{:.4},{:.4},{}\n",
            self.mean_tp_before, self.mean_tp_after, self.mean_delta, mean_pct
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Number of non-zero differences actually used.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// min(w_plus, w_minus)
    pub statistic: f64,
    /// Exact two-sided p from full sign enumeration.
    pub p_value: f64,
}

/// Exact Wilcoxon signed-rank test for paired samples.
///
/// Zero differences are dropped; ties get average ranks; the two-sided
/// p-value enumerates all 2^n sign assignments and counts those whose
/// min(W+, W-) is <= the observed statistic. Limited to n <= 25 after
/// zero removal, which keeps the enumeration cheap and exact.
pub fn wilcoxon_signed_rank_exact(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch(format!(
            "{} vs {} paired values",
            x.len(),
            y.len()
        )));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = diffs.len();
    if n > 25 {
        return Err(Error::TooLong(n));
    }

    // rank |d| ascending with average ranks for ties
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }

    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let total: f64 = ranks.iter().sum();
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    // exact two-sided tail over all sign assignments
    let mut count = 0u64;
    for mask in 0u64..(1u64 << n) {
        let mut wp = 0.0;
        for (bit, r) in ranks.iter().enumerate() {
            if mask >> bit & 1 == 1 {
                wp += r;
            }
        }
        let stat = wp.min(total - wp);
        if stat <= statistic + 1e-12 {
            count += 1;
        }
    }
    let p_value = count as f64 / (1u64 << n) as f64;

    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        statistic,
        p_value,
    })
}
