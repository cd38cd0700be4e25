//! Classification metrics: confusion matrices, ACC/SEN/SPE/PPV/NPV and
//! ROC AUC.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Square confusion matrix, rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<usize>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dim("confusion", "truth and prediction lengths differ"));
        }
        let mut c = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::Data(format!("class index out of range: {t} / {p}")));
            }
            c.counts[t * classes + p] += 1;
        }
        Ok(c)
    }

    /// Binary matrix from `(tp, fn, tn, fp)`, class 1 positive.
    pub fn binary(tp: usize, fn_: usize, tn: usize, fp: usize) -> Self {
        Self {
            classes: 2,
            counts: vec![tn, fp, fn_, tp],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> usize {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// One-vs-rest `(tp, fn, tn, fp)` for `class`.
    pub fn one_vs_rest(&self, class: usize) -> (usize, usize, usize, usize) {
        let tp = self.get(class, class);
        let row: usize = (0..self.classes).map(|p| self.get(class, p)).sum();
        let col: usize = (0..self.classes).map(|t| self.get(t, class)).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        let tn = self.total() - tp - fn_ - fp;
        (tp, fn_, tn, fp)
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        self.counts.chunks(self.classes).map(<[usize]>::to_vec).collect()
    }
}

/// Ratio with an empty denominator mapped to zero.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Sensitivity, specificity, predictive values and accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub ppv: f64,
    pub npv: f64,
}

pub fn binary_rates(tp: usize, fn_: usize, tn: usize, fp: usize) -> Rates {
    Rates {
        acc: ratio(tp + tn, tp + tn + fp + fn_),
        sen: ratio(tp, tp + fn_),
        spe: ratio(tn, tn + fp),
        ppv: ratio(tp, tp + fp),
        npv: ratio(tn, tn + fn_),
    }
}

/// Binary confusions use class 1 as positive. Multi-class confusions
/// macro-average the one-vs-rest rates; accuracy is `trace / total`.
pub fn rates(confusion: &Confusion) -> Rates {
    if confusion.classes() == 2 {
        let (tp, fn_, tn, fp) = confusion.one_vs_rest(1);
        return binary_rates(tp, fn_, tn, fp);
    }
    let k = confusion.classes() as f64;
    let mut sum = Rates {
        acc: 0.0,
        sen: 0.0,
        spe: 0.0,
        ppv: 0.0,
        npv: 0.0,
    };
    for c in 0..confusion.classes() {
        let (tp, fn_, tn, fp) = confusion.one_vs_rest(c);
        let r = binary_rates(tp, fn_, tn, fp);
        sum.sen += r.sen / k;
        sum.spe += r.spe / k;
        sum.ppv += r.ppv / k;
        sum.npv += r.npv / k;
    }
    sum.acc = ratio(confusion.trace(), confusion.total());
    sum
}

/// Area under the ROC curve by the trapezoidal rule. Tied scores form a
/// single ROC step. Returns 0.5 when only one class is present.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    area
}

/// Binary: AUC of the class-1 probability. Multi-class: macro average of
/// one-vs-rest AUCs.
pub fn auc(probs: &Tensor, truth: &[usize]) -> f64 {
    let classes = probs.cols();
    let column = |c: usize| -> Vec<f64> { (0..probs.rows()).map(|i| probs.get(i, c)).collect() };
    if classes == 2 {
        let positive: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        return roc_auc(&column(1), &positive);
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            roc_auc(&column(c), &positive)
        })
        .sum();
    total / classes as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Metrics of one evaluated run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub ppv: f64,
    pub npv: f64,
    pub auc: f64,
    pub confusion: Confusion,
}

impl MetricsReport {
    /// Metrics of class-probability rows against true labels.
    pub fn from_probs(probs: &Tensor, truth: &[usize]) -> Result<Self> {
        if probs.rows() != truth.len() {
            return Err(Error::dim("metrics", "probability rows and labels differ"));
        }
        if truth.is_empty() {
            return Err(Error::Data("no patients to evaluate".into()));
        }
        let predicted: Vec<usize> = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
        let confusion = Confusion::from_predictions(probs.cols(), truth, &predicted)?;
        let r = rates(&confusion);
        Ok(Self {
            acc: r.acc,
            sen: r.sen,
            spe: r.spe,
            ppv: r.ppv,
            npv: r.npv,
            auc: auc(probs, truth),
            confusion,
        })
    }

    pub fn values(&self) -> [(&'static str, f64); 6] {
        [
            ("acc", self.acc),
            ("sen", self.sen),
            ("spe", self.spe),
            ("ppv", self.ppv),
            ("npv", self.npv),
            ("auc", self.auc),
        ]
    }
}

/// Mean and population standard deviation of one metric over repeats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// `mean ± std` of every metric over a set of runs.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsSummary {
    pub runs: usize,
    pub metrics: Vec<(&'static str, MeanStd)>,
}

impl MetricsSummary {
    pub fn of(reports: &[MetricsReport]) -> Self {
        let names = ["acc", "sen", "spe", "ppv", "npv", "auc"];
        let metrics = names
            .iter()
            .enumerate()
            .map(|(k, &name)| {
                let vals: Vec<f64> = reports.iter().map(|r| r.values()[k].1).collect();
                (name, MeanStd::of(&vals))
            })
            .collect();
        Self {
            runs: reports.len(),
            metrics,
        }
    }

    pub fn get(&self, name: &str) -> Option<MeanStd> {
        self.metrics.iter().find(|(n, _)| *n == name).map(|(_, m)| *m)
    }
}
