//! Per-class confidence thresholds, accept/refer decisions, referral-aware
//! evaluation and the confidence-ordered removal curve.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::format::{fixed6, sig6};
use crate::mc::{nearest_rank, PredictiveSummary};

pub const DEFAULT_PERCENTILE: f64 = 10.0;
pub const DEFAULT_WINDOW: usize = 5;

/// Which label decides the calibration group of a training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Grouping {
    #[default]
    Predicted,
    True,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    class_names: Vec<String>,
    thresholds: Vec<f64>,
    /// Percentile the table was calibrated at; `None` for tables read from disk.
    pub percentile: Option<f64>,
}

impl ThresholdTable {
    pub fn new(class_names: Vec<String>, thresholds: Vec<f64>, percentile: Option<f64>) -> Result<Self> {
        if class_names.len() != thresholds.len() || class_names.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} class names for {} thresholds",
                class_names.len(),
                thresholds.len()
            )));
        }
        if let Some((name, t)) = class_names.iter().zip(&thresholds).find(|(_, t)| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidArgument(format!("threshold {t} for `{name}` outside [0, 1]")));
        }
        Ok(ThresholdTable {
            class_names,
            thresholds,
            percentile,
        })
    }

    /// Same threshold for every class.
    pub fn uniform(class_names: Vec<String>, threshold: f64) -> Result<Self> {
        let n = class_names.len();
        Self::new(class_names, vec![threshold; n], None)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn threshold(&self, class: usize) -> f64 {
        self.thresholds[class]
    }

    pub fn num_classes(&self) -> usize {
        self.thresholds.len()
    }

    /// `name<TAB>threshold` per line, six decimals.
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        for (name, &t) in self.class_names.iter().zip(&self.thresholds) {
            writeln!(w, "{name}\t{}", fixed6(t))?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let mut names = Vec::new();
        let mut thresholds = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (name, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("threshold line {}: expected name<TAB>value", lineno + 1)))?;
            let t: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("threshold line {}: bad number `{value}`", lineno + 1)))?;
            names.push(name.to_string());
            thresholds.push(t);
        }
        if names.is_empty() {
            return Err(Error::Parse("threshold file has no entries".into()));
        }
        Self::new(names, thresholds, None)
    }
}

/// Nearest-rank percentile of each group's confidences.
pub fn calibrate_thresholds(
    summaries: &[PredictiveSummary],
    labels: &[usize],
    class_names: &[String],
    percentile: f64,
    grouping: Grouping,
) -> Result<ThresholdTable> {
    if summaries.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} summaries for {} labels",
            summaries.len(),
            labels.len()
        )));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::InvalidArgument(format!("percentile {percentile} outside [0, 100]")));
    }
    let c = class_names.len();
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); c];
    for (s, &label) in summaries.iter().zip(labels) {
        let key = match grouping {
            Grouping::Predicted => s.predicted_class,
            Grouping::True => label,
        };
        if key >= c {
            return Err(Error::InvalidArgument(format!("class index {key} out of range for {c} classes")));
        }
        groups[key].push(s.confidence);
    }
    let mut thresholds = Vec::with_capacity(c);
    for (name, mut group) in class_names.iter().zip(groups) {
        if group.is_empty() {
            return Err(Error::EmptyClass(name.clone()));
        }
        group.sort_by(f64::total_cmp);
        thresholds.push(nearest_rank(&group, percentile));
    }
    ThresholdTable::new(class_names.to_vec(), thresholds, Some(percentile))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept(usize),
    Refer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriageOutcome {
    pub decision: Decision,
    pub summary: PredictiveSummary,
    pub threshold_applied: f64,
}

impl TriageOutcome {
    pub fn is_referred(&self) -> bool {
        self.decision == Decision::Refer
    }
}

/// Refers iff the confidence is strictly below the predicted class's threshold.
///
/// # Panics
/// If the predicted class has no entry in `thresholds`.
pub fn decide(summary: &PredictiveSummary, thresholds: &ThresholdTable) -> TriageOutcome {
    let threshold = thresholds.threshold(summary.predicted_class);
    let decision = if summary.confidence < threshold {
        Decision::Refer
    } else {
        Decision::Accept(summary.predicted_class)
    };
    TriageOutcome {
        decision,
        summary: summary.clone(),
        threshold_applied: threshold,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Rows are true classes, columns predicted; accepted samples only.
    pub confusion: Vec<Vec<usize>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub fraction_correct: Vec<f64>,
    /// Accuracy over accepted samples.
    pub accuracy: f64,
    /// Accuracy of the same predictions with nothing referred.
    pub full_accuracy: f64,
    pub referrals: Vec<usize>,
    pub retained: usize,
    pub outcomes: Vec<TriageOutcome>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.outcomes.len()
    }

    pub fn referred(&self) -> usize {
        self.referrals.iter().sum()
    }

    pub fn referral_fraction(&self) -> f64 {
        ratio(self.referred(), self.total())
    }

    /// Confusion matrix block, blank line, per-class metrics, blank line, totals.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "true\\predicted,{}", self.class_names.join(","))?;
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(w, "{name},{}", cells.join(","))?;
        }
        writeln!(w)?;
        writeln!(w, "class,precision,recall,f1,fraction_correct,referrals")?;
        for (i, name) in self.class_names.iter().enumerate() {
            writeln!(
                w,
                "{name},{},{},{},{},{}",
                sig6(self.precision[i]),
                sig6(self.recall[i]),
                sig6(self.f1[i]),
                sig6(self.fraction_correct[i]),
                self.referrals[i]
            )?;
        }
        writeln!(w)?;
        writeln!(w, "metric,value")?;
        writeln!(w, "accuracy,{}", sig6(self.accuracy))?;
        writeln!(w, "full_accuracy,{}", sig6(self.full_accuracy))?;
        writeln!(w, "retained,{}", self.retained)?;
        writeln!(w, "referred,{}", self.referred())?;
        writeln!(w, "total,{}", self.total())?;
        Ok(())
    }
}

pub fn evaluate_with_referral(
    summaries: &[PredictiveSummary],
    labels: &[usize],
    thresholds: &ThresholdTable,
) -> Result<EvalReport> {
    if summaries.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} summaries for {} labels",
            summaries.len(),
            labels.len()
        )));
    }
    let c = thresholds.num_classes();
    if let Some(s) = summaries.iter().find(|s| s.median.len() != c) {
        return Err(Error::Shape(format!(
            "summary has {} classes, threshold table has {c}",
            s.median.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {c} classes")));
    }

    let mut confusion = vec![vec![0usize; c]; c];
    let mut referrals = vec![0usize; c];
    let mut outcomes = Vec::with_capacity(summaries.len());
    let mut full_correct = 0;
    for (s, &label) in summaries.iter().zip(labels) {
        if s.predicted_class == label {
            full_correct += 1;
        }
        let outcome = decide(s, thresholds);
        match outcome.decision {
            Decision::Accept(p) => confusion[label][p] += 1,
            Decision::Refer => referrals[label] += 1,
        }
        outcomes.push(outcome);
    }

    let retained: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    let mut precision = Vec::with_capacity(c);
    let mut recall = Vec::with_capacity(c);
    let mut f1 = Vec::with_capacity(c);
    for i in 0..c {
        let tp = confusion[i][i];
        let predicted: usize = confusion.iter().map(|row| row[i]).sum();
        let actual: usize = confusion[i].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        precision.push(p);
        recall.push(r);
        f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    let fraction_correct = recall.clone();

    Ok(EvalReport {
        class_names: thresholds.class_names().to_vec(),
        confusion,
        precision,
        recall,
        f1,
        fraction_correct,
        accuracy: ratio(correct, retained),
        full_accuracy: ratio(full_correct, summaries.len()),
        referrals,
        retained,
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemovalCurve {
    /// Sample indices sorted by ascending confidence (stable).
    pub order: Vec<usize>,
    /// `raw[k]`: accuracy after removing the `k` least-confident samples.
    pub raw: Vec<f64>,
    /// `smoothed[k]`: mean of `raw[k..k + window]`.
    pub smoothed: Vec<f64>,
    pub window: usize,
}

impl RemovalCurve {
    /// `k,raw_accuracy,smoothed_accuracy`, smoothed blank past its end.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "k,raw_accuracy,smoothed_accuracy")?;
        for (k, &r) in self.raw.iter().enumerate() {
            let s = self.smoothed.get(k).map(|&v| sig6(v)).unwrap_or_default();
            writeln!(w, "{k},{},{s}", sig6(r))?;
        }
        Ok(())
    }
}

pub fn removal_curve(summaries: &[PredictiveSummary], labels: &[usize], window: usize) -> Result<RemovalCurve> {
    let n = summaries.len();
    if n != labels.len() {
        return Err(Error::InvalidArgument(format!("{n} summaries for {} labels", labels.len())));
    }
    if window == 0 || window > n {
        return Err(Error::InvalidArgument(format!(
            "window {window} must be in 1..={n} (number of samples)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| summaries[a].confidence.total_cmp(&summaries[b].confidence));

    let mut correct_suffix = vec![0usize; n + 1];
    for k in (0..n).rev() {
        let i = order[k];
        correct_suffix[k] = correct_suffix[k + 1] + usize::from(summaries[i].predicted_class == labels[i]);
    }
    let raw: Vec<f64> = (0..n).map(|k| correct_suffix[k] as f64 / (n - k) as f64).collect();
    let smoothed = raw
        .windows(window)
        .map(|win| win.iter().sum::<f64>() / window as f64)
        .collect();
    Ok(RemovalCurve {
        order,
        raw,
        smoothed,
        window,
    })
}
