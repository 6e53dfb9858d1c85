//! Hybrid-classifier evaluation: rows whose true class is a majority class
//! are scored by `C_N`, minority rows by `C_P`. True labels select the
//! classifier only; both predict over the full label space.

use std::fmt::Write as _;

use serde::Serialize;

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::network::{argmax, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum OverallMode {
    /// correct / total over all target rows
    #[default]
    SampleWeighted,
    /// mean of per-class accuracies
    ClassMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub tau: f64,
    /// Score every row with `C_P`, ignoring true-label routing.
    pub deploy_mode: bool,
    pub overall: OverallMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tau: 10.0,
            deploy_mode: false,
            overall: OverallMode::SampleWeighted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub a_f: Option<f64>,
    pub a_m: Option<f64>,
    pub a_o: f64,
    pub per_class_correct: Vec<usize>,
    pub per_class_total: Vec<usize>,
    pub correct_f: usize,
    pub correct_m: usize,
    pub correct_total: usize,
    pub n_f: usize,
    pub n_m: usize,
}

fn pct(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * correct as f64 / total as f64)
}

impl MetricsReport {
    pub fn from_predictions(
        truth: &[usize],
        predicted: &[usize],
        minority: &[bool],
        overall: OverallMode,
    ) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                found: predicted.len(),
            });
        }
        if truth.is_empty() {
            return Err(Error::invalid("no target rows to evaluate"));
        }
        let classes = minority.len();
        let mut per_class_correct = vec![0; classes];
        let mut per_class_total = vec![0; classes];
        let (mut correct_f, mut correct_m, mut n_f, mut n_m) = (0, 0, 0, 0);
        for (&y, &p) in truth.iter().zip(predicted) {
            if y >= classes {
                return Err(Error::invalid(format!("label {y} outside [0, {classes})")));
            }
            let hit = (y == p) as usize;
            per_class_total[y] += 1;
            per_class_correct[y] += hit;
            if minority[y] {
                n_f += 1;
                correct_f += hit;
            } else {
                n_m += 1;
                correct_m += hit;
            }
        }
        let correct_total = correct_f + correct_m;
        let a_o = match overall {
            OverallMode::SampleWeighted => 100.0 * correct_total as f64 / truth.len() as f64,
            OverallMode::ClassMean => {
                let accs: Vec<f64> = per_class_correct
                    .iter()
                    .zip(&per_class_total)
                    .filter_map(|(&c, &t)| pct(c, t))
                    .collect();
                accs.iter().sum::<f64>() / accs.len() as f64
            }
        };
        Ok(Self {
            a_f: pct(correct_f, n_f),
            a_m: pct(correct_m, n_m),
            a_o,
            per_class_correct,
            per_class_total,
            correct_f,
            correct_m,
            correct_total,
            n_f,
            n_m,
        })
    }

    pub fn class_accuracy(&self, class: usize) -> Option<f64> {
        pct(self.per_class_correct[class], self.per_class_total[class])
    }

    pub fn tsv_header(&self) -> String {
        let mut h = String::from("task\tseed\tepoch\ta_f\ta_m\ta_o");
        for c in 0..self.per_class_total.len() {
            let _ = write!(h, "\tacc_{c}");
        }
        h
    }

    pub fn tsv_row(&self, task: &str, seed: u64, epoch: usize) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut r = format!(
            "{task}\t{seed}\t{epoch}\t{}\t{}\t{}",
            fmt(self.a_f),
            fmt(self.a_m),
            self.a_o
        );
        for c in 0..self.per_class_total.len() {
            let _ = write!(r, "\t{}", fmt(self.class_accuracy(c)));
        }
        r
    }

    pub fn to_tsv(&self, task: &str, seed: u64, epoch: usize) -> String {
        format!(
            "{}\n{}\n",
            self.tsv_header(),
            self.tsv_row(task, seed, epoch)
        )
    }
}

/// Hybrid predictions for every target row.
pub fn predict(
    model: &ModelState,
    target: &EmbeddingDataset,
    minority: &[bool],
    opts: &EvalOptions,
) -> Result<Vec<usize>> {
    if target.dim() != model.dims.input {
        return Err(Error::DimensionMismatch {
            expected: model.dims.input,
            found: target.dim(),
        });
    }
    if target.class_count() != model.dims.classes || minority.len() != model.dims.classes {
        return Err(Error::DimensionMismatch {
            expected: model.dims.classes,
            found: target.class_count(),
        });
    }
    if let Some(c) = (0..model.prototypes.classes()).find(|&c| !model.prototypes.is_defined(c)) {
        return Err(Error::UndefinedPrototype(c));
    }
    let truth = target.dense_labels().ok_or(Error::MissingLabels)?;
    let features = model.generator.features(target.embeddings());
    let proto = model.prototypes.probabilities(features.view(), opts.tau)?;
    let neural = model.classifier.logits(features.view());
    Ok(truth
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if opts.deploy_mode || minority[y] {
                argmax(proto.row(i))
            } else {
                argmax(neural.row(i))
            }
        })
        .collect())
}

pub fn evaluate(
    model: &ModelState,
    target: &EmbeddingDataset,
    minority: &[bool],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let predicted = predict(model, target, minority, opts)?;
    let truth = target.dense_labels().ok_or(Error::MissingLabels)?;
    MetricsReport::from_predictions(&truth, &predicted, minority, opts.overall)
}
