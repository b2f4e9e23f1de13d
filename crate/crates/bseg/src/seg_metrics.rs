//! Pixel-wise evaluation: confusion matrices, the derived scalar metrics,
//! uncertainty-vs-misclassification ranking, and comparison tables.

use crate::synthdata::Mask;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Square pixel-count matrix: rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.num_classes..(truth + 1) * self.num_classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.num_classes).map(|t| self.at(t, pred)).sum()
    }

    /// Elementwise accumulation; image order cannot matter.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::dim(format!(
                "cannot merge confusion matrices of {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::dim(format!(
                "{} counts for a {num_classes}x{num_classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix {
            num_classes,
            counts,
        })
    }
}

/// Count `(truth, prediction)` pairs over two aligned masks.
pub fn confusion(pred: &Mask, truth: &Mask, num_classes: usize) -> Result<ConfusionMatrix> {
    if pred.height != truth.height || pred.width != truth.width {
        return Err(Error::dim(format!(
            "prediction {}x{} does not match truth {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (i, (&p, &t)) in pred.labels.iter().zip(&truth.labels).enumerate() {
        let (p, t) = (p as usize, t as usize);
        if p >= num_classes || t >= num_classes {
            return Err(Error::Label(format!(
                "label out of range at pixel ({}, {}): truth {t}, pred {p}",
                i / pred.width,
                i % pred.width
            )));
        }
        cm.counts[t * num_classes + p] += 1;
    }
    Ok(cm)
}

/// Per-class scalar metrics; `None` marks a 0/0 cell (class absent from
/// the relevant denominator), excluded from means.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
}

/// Scalar metrics derived from one confusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub global_accuracy: f64,
    /// Mean of the defined per-class recalls.
    pub mean_class_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Class frequencies in the evaluated truth masks.
    pub frequencies: Vec<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then_some(sum / n as f64)
}

impl MetricReport {
    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn mean_f1(&self) -> Option<f64> {
        mean_defined(self.per_class.iter().map(|c| c.f1))
    }

    pub fn mean_precision(&self) -> Option<f64> {
        mean_defined(self.per_class.iter().map(|c| c.precision))
    }

    pub fn mean_recall(&self) -> Option<f64> {
        mean_defined(self.per_class.iter().map(|c| c.recall))
    }

    pub fn mean_iou(&self) -> Option<f64> {
        mean_defined(self.per_class.iter().map(|c| c.iou))
    }

    /// One CSV line per class plus a mean row:
    /// `row,GA,MCA,precision,recall,f1,iou,frequency`.
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{:.6}", v),
            None => "n/a".to_string(),
        };
        let mut out = String::from("row,GA,MCA,precision,recall,f1,iou,frequency\n");
        for (i, c) in self.per_class.iter().enumerate() {
            let name = class_names.get(i).copied().unwrap_or("class");
            out.push_str(&format!(
                "{name},,,{},{},{},{},{:.6}\n",
                fmt(c.precision),
                fmt(c.recall),
                fmt(c.f1),
                fmt(c.iou),
                self.frequencies[i]
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{},{},{},{},\n",
            self.global_accuracy,
            self.mean_class_accuracy,
            fmt(self.mean_precision()),
            fmt(self.mean_recall()),
            fmt(self.mean_f1()),
            fmt(self.mean_iou()),
        ));
        out
    }
}

/// Derive all scalar metrics from a confusion matrix.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Size("empty confusion matrix".into()));
    }
    let n = cm.num_classes();
    let mut per_class = Vec::with_capacity(n);
    let mut frequencies = Vec::with_capacity(n);
    let mut trace = 0u64;
    for c in 0..n {
        let tp = cm.at(c, c);
        trace += tp;
        let row = cm.row_sum(c);
        let col = cm.col_sum(c);
        let recall = (row > 0).then(|| tp as f64 / row as f64);
        let precision = (col > 0).then(|| tp as f64 / col as f64);
        // Set form 2TP / (2TP + FP + FN): defined whenever the class shows
        // up in the truth or the prediction, and equal to the harmonic mean
        // of precision and recall wherever both exist.
        let f1 = (row + col > 0).then(|| 2.0 * tp as f64 / (row + col) as f64);
        let union = row + col - tp;
        let iou = (union > 0).then(|| tp as f64 / union as f64);
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            iou,
        });
        frequencies.push(row as f64 / total as f64);
    }
    let mca = mean_defined(per_class.iter().map(|c| c.recall))
        .ok_or_else(|| Error::Size("no class present in the confusion matrix".into()))?;
    Ok(MetricReport {
        global_accuracy: trace as f64 / total as f64,
        mean_class_accuracy: mca,
        per_class,
        frequencies,
    })
}

/// AUROC of a score for a binary indicator, by the Mann–Whitney rank
/// statistic with midrank ties. Needs at least one positive and one
/// negative observation.
pub fn auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::dim(format!(
            "{} scores for {} indicators",
            scores.len(),
            positives.len()
        )));
    }
    let n_pos = positives.iter().filter(|&&e| e).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both outcomes, got {n_pos} positive / {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; ties share the midrank
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if positives[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// AUROC of a per-pixel uncertainty map for the misclassification mask.
pub fn uncertainty_error_auroc<S: Scalar>(uncertainty: &Tensor<S>, errors: &[bool]) -> Result<f64> {
    if uncertainty.numel() != errors.len() {
        return Err(Error::dim(format!(
            "uncertainty map has {} pixels, error mask {}",
            uncertainty.numel(),
            errors.len()
        )));
    }
    let scores: Vec<f64> = uncertainty.data().iter().map(|v| v.to_f64()).collect();
    auroc(&scores, errors)
}

/// Point-biserial correlation between a score and a binary indicator,
/// reported alongside AUROC for reference. `None` when degenerate.
pub fn point_biserial(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n = scores.len();
    let n_pos = positives.iter().filter(|&&e| e).count();
    if n_pos == 0 || n_pos == n {
        return None;
    }
    let mean_all: f64 = scores.iter().sum::<f64>() / n as f64;
    let var: f64 = scores.iter().map(|s| (s - mean_all).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return None;
    }
    let mean_pos: f64 = scores
        .iter()
        .zip(positives)
        .filter(|(_, &e)| e)
        .map(|(s, _)| s)
        .sum::<f64>()
        / n_pos as f64;
    let mean_neg: f64 = scores
        .iter()
        .zip(positives)
        .filter(|(_, &e)| !e)
        .map(|(s, _)| s)
        .sum::<f64>()
        / (n - n_pos) as f64;
    let p = n_pos as f64 / n as f64;
    Some((mean_pos - mean_neg) * (p * (1.0 - p)).sqrt() / var.sqrt())
}

/// A report tagged with the strategy or model that produced it.
#[derive(Debug, Clone)]
pub struct LabeledReport {
    pub label: String,
    pub report: MetricReport,
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}", 100.0 * v),
        None => "n/a".to_string(),
    }
}

fn fmt_diff(a: Option<f64>, b: Option<f64>) -> String {
    match (a, b) {
        (Some(a), Some(b)) => format!("{:+.2}", 100.0 * (b - a)),
        _ => "n/a".to_string(),
    }
}

/// Render an aligned comparison table: GA/MCA summary, then one section per
/// metric with per-class columns, a mean column, and signed difference rows
/// for each designated `(base, refined)` pair. Percentages to 2 decimals.
pub fn report_table(
    reports: &[LabeledReport],
    class_names: &[&str],
    diff_pairs: &[(usize, usize)],
) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Report("no reports to tabulate".into()));
    }
    let n = reports[0].report.num_classes();
    for lr in reports {
        if lr.report.num_classes() != n {
            return Err(Error::Report(format!(
                "report {:?} has {} classes, expected {n}",
                lr.label,
                lr.report.num_classes()
            )));
        }
    }
    if class_names.len() != n {
        return Err(Error::Report(format!(
            "{} class names for {n} classes",
            class_names.len()
        )));
    }
    for &(a, b) in diff_pairs {
        if a >= reports.len() || b >= reports.len() {
            return Err(Error::Report(format!(
                "difference pair ({a}, {b}) out of range"
            )));
        }
    }

    let label_w = reports
        .iter()
        .map(|r| r.label.len())
        .chain(["Difference".len()])
        .max()
        .unwrap()
        .max(12);
    let col_w = class_names.iter().map(|s| s.len()).max().unwrap().max(10) + 2;

    let mut out = String::new();
    out.push_str(&format!(
        "{:<label_w$}{:>col_w$}{:>col_w$}\n",
        "", "GA", "MCA"
    ));
    for lr in reports {
        out.push_str(&format!(
            "{:<label_w$}{:>col_w$}{:>col_w$}\n",
            lr.label,
            fmt_pct(Some(lr.report.global_accuracy)),
            fmt_pct(Some(lr.report.mean_class_accuracy)),
        ));
    }
    for &(a, b) in diff_pairs {
        out.push_str(&format!(
            "{:<label_w$}{:>col_w$}{:>col_w$}\n",
            "Difference",
            fmt_diff(
                Some(reports[a].report.global_accuracy),
                Some(reports[b].report.global_accuracy)
            ),
            fmt_diff(
                Some(reports[a].report.mean_class_accuracy),
                Some(reports[b].report.mean_class_accuracy)
            ),
        ));
    }

    type Getter = fn(&ClassMetrics) -> Option<f64>;
    type MeanGetter = fn(&MetricReport) -> Option<f64>;
    let sections: [(&str, Getter, MeanGetter); 4] = [
        ("F1 score (%)", |c| c.f1, MetricReport::mean_f1),
        (
            "Precision (%)",
            |c| c.precision,
            MetricReport::mean_precision,
        ),
        (
            "Class accuracy (%)",
            |c| c.recall,
            MetricReport::mean_recall,
        ),
        ("IoU (%)", |c| c.iou, MetricReport::mean_iou),
    ];
    for (title, get, get_mean) in sections {
        out.push('\n');
        out.push_str(title);
        out.push('\n');
        out.push_str(&format!("{:<label_w$}", ""));
        for name in class_names {
            out.push_str(&format!("{:>col_w$}", name));
        }
        out.push_str(&format!("{:>col_w$}\n", "Mean value"));
        for lr in reports {
            out.push_str(&format!("{:<label_w$}", lr.label));
            for c in &lr.report.per_class {
                out.push_str(&format!("{:>col_w$}", fmt_pct(get(c))));
            }
            out.push_str(&format!("{:>col_w$}\n", fmt_pct(get_mean(&lr.report))));
        }
        for &(a, b) in diff_pairs {
            out.push_str(&format!("{:<label_w$}", "Difference"));
            let (ra, rb) = (&reports[a].report, &reports[b].report);
            for (ca, cb) in ra.per_class.iter().zip(&rb.per_class) {
                out.push_str(&format!("{:>col_w$}", fmt_diff(get(ca), get(cb))));
            }
            out.push_str(&format!(
                "{:>col_w$}\n",
                fmt_diff(get_mean(ra), get_mean(rb))
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_of(w: usize, labels: Vec<u8>) -> Mask {
        let h = labels.len() / w;
        Mask::new(h, w, labels).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let truth = mask_of(2, vec![0, 1, 2, 1]);
        let cm = confusion(&truth, &truth, 3).unwrap();
        assert_eq!(cm.at(0, 0), 1);
        assert_eq!(cm.at(1, 1), 2);
        assert_eq!(cm.at(2, 2), 1);
        assert_eq!(cm.total(), 4);
        let report = metrics(&cm).unwrap();
        assert_eq!(report.global_accuracy, 1.0);
        assert_eq!(report.mean_class_accuracy, 1.0);
        for c in &report.per_class {
            assert_eq!(c.f1, Some(1.0));
            assert_eq!(c.iou, Some(1.0));
        }
    }

    #[test]
    fn four_pixel_hand_enumeration() {
        // truth [0,0,1,1], pred [0,1,1,1] -> [[1,1],[0,2]]
        let truth = mask_of(4, vec![0, 0, 1, 1]);
        let pred = mask_of(4, vec![0, 1, 1, 1]);
        let cm = confusion(&pred, &truth, 2).unwrap();
        assert_eq!(cm.counts(), &[1, 1, 0, 2]);
    }

    #[test]
    fn all_background_on_two_percent_cracks() {
        // 2000 pixels with exactly 2% crack: GA 0.98, crack recall 0.
        let mut labels = vec![0u8; 2000];
        for l in labels.iter_mut().take(40) {
            *l = 1;
        }
        let truth = mask_of(50, labels);
        let pred = mask_of(50, vec![0u8; 2000]);
        let cm = confusion(&pred, &truth, 2).unwrap();
        assert_eq!(cm.at(1, 0), 40);
        let report = metrics(&cm).unwrap();
        assert_eq!(report.global_accuracy, 0.98);
        assert_eq!(report.per_class[1].recall, Some(0.0));
        // crack never predicted: precision undefined, but F1 and IoU are 0
        assert_eq!(report.per_class[1].precision, None);
        assert_eq!(report.per_class[1].f1, Some(0.0));
        assert_eq!(report.per_class[1].iou, Some(0.0));
    }

    #[test]
    fn metrics_hand_example() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        let report = metrics(&cm).unwrap();
        let c0 = &report.per_class[0];
        assert!((c0.precision.unwrap() - 0.6).abs() < 1e-12);
        assert!((c0.recall.unwrap() - 0.75).abs() < 1e-12);
        assert!((c0.f1.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((c0.iou.unwrap() - 0.5).abs() < 1e-12);
        assert!((report.global_accuracy - 0.7).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_excluded_from_means() {
        // class 2 never appears in truth or prediction
        let truth = mask_of(2, vec![0, 0, 1, 1]);
        let pred = mask_of(2, vec![0, 1, 1, 1]);
        let cm = confusion(&pred, &truth, 3).unwrap();
        let report = metrics(&cm).unwrap();
        assert_eq!(report.per_class[2].recall, None);
        assert_eq!(report.per_class[2].iou, None);
        // MCA averages the two defined recalls: 0.5 and 1.0
        assert!((report.mean_class_accuracy - 0.75).abs() < 1e-12);
    }

    #[test]
    fn iou_equals_f1_over_two_minus_f1() {
        let cm = ConfusionMatrix::from_counts(3, vec![10, 3, 1, 2, 20, 4, 0, 5, 30]).unwrap();
        let report = metrics(&cm).unwrap();
        for c in &report.per_class {
            if let (Some(f1), Some(iou)) = (c.f1, c.iou) {
                assert!((iou - f1 / (2.0 - f1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_is_commutative() {
        let a = ConfusionMatrix::from_counts(2, vec![1, 2, 3, 4]).unwrap();
        let b = ConfusionMatrix::from_counts(2, vec![10, 0, 5, 1]).unwrap();
        let mut ab = a.clone();
        ab.merge(&b).unwrap();
        let mut ba = b.clone();
        ba.merge(&a).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(ab.total(), a.total() + b.total());
    }

    #[test]
    fn metrics_match_brute_force_on_random_masks() {
        // Independent oracle: raw per-pixel counting without the matrix.
        for seed in 0..10u64 {
            let nb = if seed % 2 == 0 { 2 } else { 6 };
            let n = 40 * 30;
            let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
            let mut next = || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                state
            };
            let truth: Vec<u8> = (0..n).map(|_| (next() % nb) as u8).collect();
            let pred: Vec<u8> = (0..n).map(|_| (next() % nb) as u8).collect();
            let truth_m = mask_of(40, truth.clone());
            let pred_m = mask_of(40, pred.clone());
            let report = metrics(&confusion(&pred_m, &truth_m, nb as usize).unwrap()).unwrap();

            let mut correct = 0usize;
            for c in 0..nb as u8 {
                let tp = truth
                    .iter()
                    .zip(&pred)
                    .filter(|(&t, &p)| t == c && p == c)
                    .count();
                let t_count = truth.iter().filter(|&&t| t == c).count();
                let p_count = pred.iter().filter(|&&p| p == c).count();
                correct += tp;
                let cm = &report.per_class[c as usize];
                if t_count > 0 {
                    assert!((cm.recall.unwrap() - tp as f64 / t_count as f64).abs() < 1e-15);
                }
                if p_count > 0 {
                    assert!((cm.precision.unwrap() - tp as f64 / p_count as f64).abs() < 1e-15);
                }
                let union = t_count + p_count - tp;
                if union > 0 {
                    assert!((cm.iou.unwrap() - tp as f64 / union as f64).abs() < 1e-15);
                }
            }
            assert!((report.global_accuracy - correct as f64 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn auroc_perfect_separation_is_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let positives = [true, true, false, false];
        assert_eq!(auroc(&scores, &positives).unwrap(), 1.0);
    }

    #[test]
    fn auroc_constant_scores_is_half() {
        let scores = [0.5; 6];
        let positives = [true, false, true, false, false, true];
        assert!((auroc(&scores, &positives).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auroc_hand_example() {
        // {err 0.9, err 0.4, ok 0.5, ok 0.1}: 3 of 4 pairs won -> 0.75.
        let scores = [0.9, 0.4, 0.5, 0.1];
        let positives = [true, true, false, false];
        assert!((auroc(&scores, &positives).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let scores: Vec<f64> = (0..50).map(|i| ((i * 37) % 19) as f64 / 7.0).collect();
        let positives: Vec<bool> = (0..50).map(|i| (i * 13) % 3 == 0).collect();
        let base = auroc(&scores, &positives).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| (2.0 * s + 1.0).ln()).collect();
        assert!((auroc(&squashed, &positives).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn auroc_degenerate_is_undefined_not_a_crash() {
        let scores = [0.1, 0.2];
        assert!(matches!(
            auroc(&scores, &[false, false]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            auroc(&scores, &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    fn report_from(counts: Vec<u64>) -> MetricReport {
        metrics(&ConfusionMatrix::from_counts(2, counts).unwrap()).unwrap()
    }

    #[test]
    fn table_difference_row_formatting() {
        // IoU pair engineered to print +1.10: 71.30% vs 72.40%.
        let a = report_from(vec![7130, 2870, 0, 10_000]);
        let b = report_from(vec![7240, 2760, 0, 10_000]);
        assert!((a.per_class[0].iou.unwrap() - 0.7130).abs() < 1e-12);
        let table = report_table(
            &[
                LabeledReport {
                    label: "initial".into(),
                    report: a,
                },
                LabeledReport {
                    label: "surrogate".into(),
                    report: b,
                },
            ],
            &["background", "damage"],
            &[(0, 1)],
        )
        .unwrap();
        assert!(table.contains("+1.10"), "{table}");
        assert!(table.contains("Difference"), "{table}");
        assert!(table.contains("Mean value"), "{table}");
    }

    #[test]
    fn table_without_pairs_has_no_difference_row() {
        let a = report_from(vec![5, 1, 2, 7]);
        let table = report_table(
            &[LabeledReport {
                label: "only".into(),
                report: a,
            }],
            &["background", "crack"],
            &[],
        )
        .unwrap();
        assert!(!table.contains("Difference"));
    }

    #[test]
    fn identical_reports_diff_to_plus_zero() {
        let a = report_from(vec![5, 1, 2, 7]);
        let table = report_table(
            &[
                LabeledReport {
                    label: "a".into(),
                    report: a.clone(),
                },
                LabeledReport {
                    label: "b".into(),
                    report: a,
                },
            ],
            &["background", "crack"],
            &[(0, 1)],
        )
        .unwrap();
        assert!(table.contains("+0.00"), "{table}");
    }

    #[test]
    fn table_rejects_mismatched_class_counts() {
        let two = report_from(vec![5, 1, 2, 7]);
        let six = metrics(&ConfusionMatrix::from_counts(3, vec![1; 9]).unwrap()).unwrap();
        let result = report_table(
            &[
                LabeledReport {
                    label: "two".into(),
                    report: two,
                },
                LabeledReport {
                    label: "six".into(),
                    report: six,
                },
            ],
            &["a", "b"],
            &[],
        );
        assert!(matches!(result, Err(Error::Report(_))));
    }

    #[test]
    fn point_biserial_sign_tracks_separation() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let positives = [true, true, false, false];
        assert!(point_biserial(&scores, &positives).unwrap() > 0.9);
        assert!(point_biserial(&[0.5; 4], &positives).is_none());
    }
}
