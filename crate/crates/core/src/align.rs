//! Cross-domain prototype alignment.
//!
//! Source prototypes average every pool sample of a class (real and
//! synthetic), target prototypes average the target features pseudo-labeled
//! with that class. `M_c` is the mean squared distance between matching
//! prototypes and `M_d` the mean squared distance between mismatched pairs.
//! Only classes defined in both tables take part; the averaging
//! denominators shrink accordingly.

use log::warn;
use ndarray::{Array2, ArrayView2};

use crate::augment::Provenance;
use crate::error::{Error, Result};
use crate::network::{argmax, PrototypeTable};

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub classes: Vec<usize>,
    pub confidence: Vec<f64>,
    /// Rows that pass the optional confidence threshold.
    pub accepted: Vec<bool>,
}

impl PseudoLabels {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn as_labels(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        self.classes
            .iter()
            .zip(&self.accepted)
            .map(|(&c, &ok)| ok.then_some(c))
    }
}

/// Argmax of the prototype classifier for each target row.
pub fn pseudo_labels(
    target_features: ArrayView2<'_, f64>,
    prototypes: &PrototypeTable,
    tau: f64,
    threshold: Option<f64>,
) -> Result<PseudoLabels> {
    let probs = prototypes.probabilities(target_features, tau)?;
    let mut classes = Vec::with_capacity(probs.nrows());
    let mut confidence = Vec::with_capacity(probs.nrows());
    for row in probs.rows() {
        let c = argmax(row);
        classes.push(c);
        confidence.push(row[c]);
    }
    let accepted = confidence
        .iter()
        .map(|&p| threshold.is_none_or(|t| p >= t))
        .collect();
    Ok(PseudoLabels {
        classes,
        confidence,
        accepted,
    })
}

/// Source prototypes over all pool samples of each class. With no synthetic
/// samples this is the plain class mean.
pub fn amended_prototypes(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    provenance: &[Provenance],
    classes: usize,
) -> PrototypeTable {
    let mut table =
        PrototypeTable::from_class_means(features, labels.iter().map(|&c| Some(c)), classes);
    table.amended = provenance.iter().any(|&p| p != Provenance::Real);
    table
}

pub fn target_prototypes(
    features: ArrayView2<'_, f64>,
    pseudo: &PseudoLabels,
    classes: usize,
) -> PrototypeTable {
    PrototypeTable::from_class_means(features, pseudo.as_labels(), classes)
}

fn common_classes(source: &PrototypeTable, target: &PrototypeTable) -> Vec<usize> {
    (0..source.classes().min(target.classes()))
        .filter(|&c| source.is_defined(c) && target.is_defined(c))
        .collect()
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A prototype-distance term with its gradients with respect to the rows
/// of both prototype tables.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTerm {
    pub value: f64,
    pub classes: Vec<usize>,
    pub grad_source: Array2<f64>,
    pub grad_target: Array2<f64>,
}

pub fn class_mmd(source: &PrototypeTable, target: &PrototypeTable) -> Result<PrototypeTerm> {
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: source.dim(),
            found: target.dim(),
        });
    }
    let classes = common_classes(source, target);
    if classes.is_empty() {
        return Err(Error::NoCommonClass);
    }
    let k = classes.len() as f64;
    let mut grad_source = Array2::zeros(source.vectors.dim());
    let mut grad_target = Array2::zeros(target.vectors.dim());
    let mut value = 0.0;
    for &c in &classes {
        let diff = &source.vectors.row(c) - &target.vectors.row(c);
        value += diff.dot(&diff);
        grad_source.row_mut(c).scaled_add(2.0 / k, &diff);
        grad_target.row_mut(c).scaled_add(-2.0 / k, &diff);
    }
    Ok(PrototypeTerm {
        value: value / k,
        classes,
        grad_source,
        grad_target,
    })
}

/// `None` (with a warning) when fewer than two classes are commonly defined.
pub fn interclass_divergence(
    source: &PrototypeTable,
    target: &PrototypeTable,
) -> Result<Option<PrototypeTerm>> {
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: source.dim(),
            found: target.dim(),
        });
    }
    let classes = common_classes(source, target);
    if classes.len() < 2 {
        warn!(
            "inter-class divergence needs two common classes, found {}; term dropped",
            classes.len()
        );
        return Ok(None);
    }
    let k = classes.len() as f64;
    let scale = 1.0 / (k * (k - 1.0));
    let mut grad_source = Array2::zeros(source.vectors.dim());
    let mut grad_target = Array2::zeros(target.vectors.dim());
    let mut value = 0.0;
    for &c in &classes {
        for &c2 in &classes {
            if c == c2 {
                continue;
            }
            let s = source.vectors.row(c);
            let t = target.vectors.row(c2);
            value += sq_dist(s, t);
            let diff = &s - &t;
            grad_source.row_mut(c).scaled_add(2.0 * scale, &diff);
            grad_target.row_mut(c2).scaled_add(-2.0 * scale, &diff);
        }
    }
    Ok(Some(PrototypeTerm {
        value: value * scale,
        classes,
        grad_source,
        grad_target,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentSwitches {
    pub intra: bool,
    pub inter: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTerms {
    pub m_c: Option<f64>,
    pub m_d: Option<f64>,
    /// Classes defined in both tables.
    pub active_classes: Vec<usize>,
    /// Number of ordered `(c, c')` pairs entering `M_d`.
    pub active_pairs: usize,
}

impl AlignmentTerms {
    /// `M_c - M_d` over the terms that are present.
    pub fn combined(&self) -> f64 {
        self.m_c.unwrap_or(0.0) - self.m_d.unwrap_or(0.0)
    }
}

/// Alignment value and gradients of `M_c - M_d` with respect to every
/// source and target feature row, chained through the class means.
/// Pseudo-label assignments are treated as constants.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub terms: AlignmentTerms,
    pub source_table: PrototypeTable,
    pub target_table: PrototypeTable,
    pub d_source: Array2<f64>,
    pub d_target: Array2<f64>,
}

fn spread_to_rows(
    grad: &Array2<f64>,
    table: &PrototypeTable,
    labels: impl Iterator<Item = Option<usize>>,
    rows: usize,
    scale: f64,
    out: &mut Array2<f64>,
) {
    debug_assert_eq!(out.nrows(), rows);
    for (i, label) in labels.enumerate() {
        if let Some(c) = label {
            let n = table.counts[c];
            if n > 0 {
                out.row_mut(i).scaled_add(scale / n as f64, &grad.row(c));
            }
        }
    }
}

pub fn alignment(
    source_features: ArrayView2<'_, f64>,
    source_labels: &[usize],
    source_provenance: &[Provenance],
    target_features: ArrayView2<'_, f64>,
    pseudo: &PseudoLabels,
    classes: usize,
    switches: AlignmentSwitches,
) -> Result<Alignment> {
    let source_table =
        amended_prototypes(source_features, source_labels, source_provenance, classes);
    let target_table = target_prototypes(target_features, pseudo, classes);
    let mut d_source = Array2::zeros(source_features.dim());
    let mut d_target = Array2::zeros(target_features.dim());
    let active_classes = common_classes(&source_table, &target_table);
    let n_active = active_classes.len();
    let mut terms = AlignmentTerms {
        m_c: None,
        m_d: None,
        active_pairs: if n_active >= 2 {
            n_active * (n_active - 1)
        } else {
            0
        },
        active_classes,
    };
    let src_labels = || source_labels.iter().map(|&c| Some(c));

    if switches.intra {
        match class_mmd(&source_table, &target_table) {
            Ok(t) => {
                terms.m_c = Some(t.value);
                spread_to_rows(
                    &t.grad_source,
                    &source_table,
                    src_labels(),
                    source_labels.len(),
                    1.0,
                    &mut d_source,
                );
                spread_to_rows(
                    &t.grad_target,
                    &target_table,
                    pseudo.as_labels(),
                    pseudo.len(),
                    1.0,
                    &mut d_target,
                );
            }
            Err(Error::NoCommonClass) => {
                warn!("no commonly defined class; class-wise MMD dropped");
            }
            Err(e) => return Err(e),
        }
    }
    if switches.inter {
        if let Some(t) = interclass_divergence(&source_table, &target_table)? {
            terms.m_d = Some(t.value);
            spread_to_rows(
                &t.grad_source,
                &source_table,
                src_labels(),
                source_labels.len(),
                -1.0,
                &mut d_source,
            );
            spread_to_rows(
                &t.grad_target,
                &target_table,
                pseudo.as_labels(),
                pseudo.len(),
                -1.0,
                &mut d_target,
            );
        }
    }
    Ok(Alignment {
        terms,
        source_table,
        target_table,
        d_source,
        d_target,
    })
}
