//! Cross-domain augmentation of the minority classes.
//!
//! Each minority seed row contributes one within-source propagated sample
//! (EP), one cross-domain propagated sample (KP), and `k` mixup samples
//! `(1 - g) z_ep + g z_kp` with `g ~ Beta(a, b)` drawn independently per
//! sample. Majority classes are never augmented.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Real,
    EpSource,
    KpCross,
    Mix,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Real => "REAL",
            Provenance::EpSource => "EP",
            Provenance::KpCross => "KP",
            Provenance::Mix => "MIX",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub embedding: Array1<f64>,
    pub label: usize,
    pub provenance: Provenance,
    /// Index of the minority seed row in the real source rows.
    pub seed_row: usize,
    /// Mixing coefficient, MIX samples only.
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub beta_a: f64,
    pub beta_b: f64,
    pub mix_count: usize,
    pub row_normalize: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            beta_a: 2.0,
            beta_b: 2.0,
            mix_count: 5,
            row_normalize: true,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_a > 0.0 && self.beta_b > 0.0) {
            return Err(Error::invalid(format!(
                "Beta parameters must be positive, got ({}, {})",
                self.beta_a, self.beta_b
            )));
        }
        Ok(())
    }
}

/// Which synthetic sets enter the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolFlags {
    pub ep: bool,
    pub kp: bool,
    pub mix: bool,
}

impl PoolFlags {
    pub const ALL: PoolFlags = PoolFlags {
        ep: true,
        kp: true,
        mix: true,
    };
    pub const NONE: PoolFlags = PoolFlags {
        ep: false,
        kp: false,
        mix: false,
    };
}

pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    assert!(a > 0.0 && b > 0.0, "Beta parameters must be positive");
    rng::sample_beta(a, b, rng)
}

pub fn mix(ep: ArrayView1<'_, f64>, kp: ArrayView1<'_, f64>, gamma: f64) -> Result<Array1<f64>> {
    if ep.len() != kp.len() {
        return Err(Error::DimensionMismatch {
            expected: ep.len(),
            found: kp.len(),
        });
    }
    Ok(ep
        .iter()
        .zip(kp.iter())
        .map(|(s, o)| (1.0 - gamma) * s + gamma * o)
        .collect())
}

/// Wraps propagated rows (aligned with `seed_rows`) as samples.
pub fn propagated_samples(
    propagated: ArrayView2<'_, f64>,
    seed_rows: &[usize],
    labels: &[usize],
    provenance: Provenance,
) -> Vec<AugmentedSample> {
    assert_eq!(propagated.nrows(), seed_rows.len());
    seed_rows
        .iter()
        .zip(propagated.rows())
        .map(|(&seed_row, row)| AugmentedSample {
            embedding: row.to_owned(),
            label: labels[seed_row],
            provenance,
            seed_row,
            gamma: None,
        })
        .collect()
}

/// `k` mixup samples per seed row, pairing the EP and KP samples of the
/// same seed row.
pub fn mixup_samples<R: Rng + ?Sized>(
    ep: &[AugmentedSample],
    kp: &[AugmentedSample],
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<Vec<AugmentedSample>> {
    cfg.validate()?;
    if ep.len() != kp.len() {
        return Err(Error::DimensionMismatch {
            expected: ep.len(),
            found: kp.len(),
        });
    }
    let mut out = Vec::with_capacity(ep.len() * cfg.mix_count);
    for (s, o) in ep.iter().zip(kp) {
        if s.seed_row != o.seed_row {
            return Err(Error::invalid(format!(
                "mixup parents disagree on seed row ({} vs {})",
                s.seed_row, o.seed_row
            )));
        }
        for _ in 0..cfg.mix_count {
            let gamma = sample_beta(cfg.beta_a, cfg.beta_b, rng);
            out.push(AugmentedSample {
                embedding: mix(s.embedding.view(), o.embedding.view(), gamma)?,
                label: s.label,
                provenance: Provenance::Mix,
                seed_row: s.seed_row,
                gamma: Some(gamma),
            });
        }
    }
    Ok(out)
}

/// Real source rows plus the synthetic sets selected by `flags`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPool {
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
    pub seed_rows: Vec<Option<usize>>,
    pub gammas: Vec<Option<f64>>,
}

impl AugmentedPool {
    pub fn real_only(embeddings: Array2<f64>, labels: Vec<usize>) -> Self {
        let n = labels.len();
        assert_eq!(embeddings.nrows(), n);
        Self {
            embeddings,
            labels,
            provenance: vec![Provenance::Real; n],
            seed_rows: vec![None; n],
            gammas: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&q| q == p).count()
    }

    pub fn synthetic_count(&self) -> usize {
        self.len() - self.count(Provenance::Real)
    }

    pub fn extend(&mut self, samples: &[AugmentedSample]) {
        if samples.is_empty() {
            return;
        }
        let (n, d) = self.embeddings.dim();
        let mut rows = Array2::<f64>::zeros((n + samples.len(), d));
        rows.slice_mut(ndarray::s![..n, ..])
            .assign(&self.embeddings);
        for (k, s) in samples.iter().enumerate() {
            rows.row_mut(n + k).assign(&s.embedding);
            self.labels.push(s.label);
            self.provenance.push(s.provenance);
            self.seed_rows.push(Some(s.seed_row));
            self.gammas.push(s.gamma);
        }
        self.embeddings = rows;
    }

    /// Text dump: the embedding file layout with a provenance column.
    pub fn to_text(&self, class_count: usize) -> String {
        let mut out = format!(
            "#fkt v1 n={} d={} c={} domain=source\n",
            self.len(),
            self.embeddings.ncols(),
            class_count
        );
        for (i, row) in self.embeddings.rows().into_iter().enumerate() {
            out.push_str(&self.labels[i].to_string());
            out.push('\t');
            crate::dataset::write_values(&mut out, row);
            out.push('\t');
            out.push_str(&self.provenance[i].to_string());
            out.push('\n');
        }
        out
    }
}

/// Assembles the training pool. MIX samples are drawn whenever `flags.mix`
/// is set, independently of whether their EP/KP parents are kept.
pub fn build_augmented_pool<R: Rng + ?Sized>(
    real: ArrayView2<'_, f64>,
    real_labels: &[usize],
    ep: &[AugmentedSample],
    kp: &[AugmentedSample],
    cfg: &AugmentationConfig,
    rng: &mut R,
    flags: PoolFlags,
) -> Result<AugmentedPool> {
    cfg.validate()?;
    let mut pool = AugmentedPool::real_only(real.to_owned(), real_labels.to_vec());
    if flags.ep {
        pool.extend(ep);
    }
    if flags.kp {
        pool.extend(kp);
    }
    if flags.mix {
        let mixed = mixup_samples(ep, kp, cfg, rng)?;
        pool.extend(&mixed);
    }
    Ok(pool)
}
