//! Similarity graphs and embedding propagation.
//!
//! For a set of embeddings `Z` the adjacency is a Gaussian kernel on squared
//! distances with a zero diagonal, the Laplacian is the symmetric
//! normalization `D^{-1/2} A D^{-1/2}`, and the propagator is
//! `H = (I - alpha L)^{-1}`. A propagated embedding is `sum_j H_ij z_j`,
//! optionally with row `i` of `H` rescaled to sum to one.
//!
//! The propagator is never formed by explicit inversion: `I - alpha L` is
//! LU-factorized with partial pivoting and solved one column at a time.
//! Propagation only needs the rows of `H` for the seed rows, and since
//! `I - alpha L` is symmetric those are the corresponding columns.

use log::warn;
use ndarray::{s, Array2, ArrayView2, Axis};

use crate::dataset::Domain;
use crate::error::{Error, Result};
use crate::linalg::{self, LuFactor};

/// Statistic used for the kernel bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaMode {
    /// Variance of the squared pairwise distances.
    #[default]
    VarSquaredDistance,
    /// Variance of the (unsquared) pairwise distances.
    VarDistance,
}

impl std::str::FromStr for SigmaMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "var-sq" | "var_sq" => Ok(SigmaMode::VarSquaredDistance),
            "var-dist" | "var_dist" => Ok(SigmaMode::VarDistance),
            other => Err(format!("unknown sigma mode `{other}` (var-sq | var-dist)")),
        }
    }
}

impl std::fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SigmaMode::VarSquaredDistance => "var-sq",
            SigmaMode::VarDistance => "var-dist",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub alpha: f64,
    pub sigma: SigmaMode,
    pub row_normalize: bool,
    /// Sum within-source propagation over minority rows only.
    pub ep_minority_only: bool,
    pub threads: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            sigma: SigmaMode::default(),
            row_normalize: true,
            ep_minority_only: false,
            threads: 1,
        }
    }
}

impl GraphConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Where a graph node came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowOrigin {
    pub domain: Domain,
    pub row: usize,
}

#[derive(Debug, Clone)]
pub struct PropagationGraph {
    pub adjacency: Array2<f64>,
    pub laplacian: Array2<f64>,
    pub propagator: Array2<f64>,
    pub bandwidth: f64,
    pub alpha: f64,
    pub row_index: Vec<RowOrigin>,
}

impl PropagationGraph {
    /// Builds all three matrices. `row_index` must have one entry per row of `z`.
    pub fn build(
        z: ArrayView2<'_, f64>,
        cfg: &GraphConfig,
        row_index: Vec<RowOrigin>,
    ) -> Result<Self> {
        cfg.validate()?;
        if row_index.len() != z.nrows() {
            return Err(Error::DimensionMismatch {
                expected: z.nrows(),
                found: row_index.len(),
            });
        }
        let (adjacency, bandwidth) = build_adjacency_with(z, cfg.sigma);
        let laplacian = build_laplacian(adjacency.view());
        let propagator = build_propagator_threaded(laplacian.view(), cfg.alpha, cfg.threads)?;
        Ok(Self {
            adjacency,
            laplacian,
            propagator,
            bandwidth,
            alpha: cfg.alpha,
            row_index,
        })
    }
}

const SIGMA_FLOOR: f64 = 1e-12;

/// Gaussian adjacency with the default bandwidth rule.
pub fn build_adjacency(z: ArrayView2<'_, f64>) -> (Array2<f64>, f64) {
    build_adjacency_with(z, SigmaMode::default())
}

pub fn build_adjacency_with(z: ArrayView2<'_, f64>, mode: SigmaMode) -> (Array2<f64>, f64) {
    let n = z.nrows();
    let sq = linalg::pairwise_sq_distances(z);
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push(sq[[i, j]]);
        }
    }
    let stat: Vec<f64> = match mode {
        SigmaMode::VarSquaredDistance => pairs.clone(),
        SigmaMode::VarDistance => pairs.iter().map(|v| v.sqrt()).collect(),
    };
    let (_, var) = linalg::mean_var(&stat);
    let (mean_sq, _) = linalg::mean_var(&pairs);
    let sigma2 = if var >= SIGMA_FLOOR {
        var
    } else if mean_sq >= SIGMA_FLOOR {
        mean_sq
    } else {
        1.0
    };
    let mut a = sq.mapv(|d2| (-d2 / sigma2).exp());
    a.diag_mut().fill(0.0);
    (a, sigma2)
}

/// `D^{-1/2} A D^{-1/2}`; isolated nodes get zero rows and columns.
pub fn build_laplacian(a: ArrayView2<'_, f64>) -> Array2<f64> {
    let inv_sqrt: Vec<f64> = a
        .sum_axis(Axis(1))
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    Array2::from_shape_fn(a.dim(), |(i, j)| a[[i, j]] * inv_sqrt[i] * inv_sqrt[j])
}

fn system_matrix(l: ArrayView2<'_, f64>, alpha: f64) -> Array2<f64> {
    let mut m = l.mapv(|v| -alpha * v);
    m.diag_mut().mapv_inplace(|v| v + 1.0);
    m
}

/// `H = (I - alpha L)^{-1}` by column-wise solves.
pub fn build_propagator(l: ArrayView2<'_, f64>, alpha: f64) -> Result<Array2<f64>> {
    build_propagator_threaded(l, alpha, 1)
}

pub fn build_propagator_threaded(
    l: ArrayView2<'_, f64>,
    alpha: f64,
    threads: usize,
) -> Result<Array2<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let lu = LuFactor::new(system_matrix(l, alpha).view())?;
    Ok(lu.inverse(threads))
}

/// Rows `seeds` of the propagator for the graph over `z`, optionally
/// restricted to the columns in `support` and row-normalized.
fn propagator_rows(
    z: ArrayView2<'_, f64>,
    seeds: &[usize],
    support: Option<&[usize]>,
    cfg: &GraphConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n = z.nrows();
    let (a, _) = build_adjacency_with(z, cfg.sigma);
    let l = build_laplacian(a.view());
    let lu = LuFactor::new(system_matrix(l.view(), cfg.alpha).view())?;
    let mut weights = Array2::<f64>::zeros((seeds.len(), n));
    for (k, &i) in seeds.iter().enumerate() {
        let col = lu.inverse_column(i);
        let mut row = weights.row_mut(k);
        match support {
            Some(cols) => {
                for &j in cols {
                    row[j] = col[j];
                }
            }
            None => row.assign(&ndarray::ArrayView1::from(&col)),
        }
        if cfg.row_normalize {
            let total: f64 = row.sum();
            if total > 0.0 {
                row.mapv_inplace(|v| v / total);
            }
        }
    }
    Ok(weights)
}

/// Within-source propagation for the seed rows `minority_rows` of `z_s`.
/// Returns one propagated embedding per seed row, in order.
pub fn propagate_within_source(
    z_s: ArrayView2<'_, f64>,
    minority_rows: &[usize],
    cfg: &GraphConfig,
) -> Result<Array2<f64>> {
    let d = z_s.ncols();
    if minority_rows.is_empty() {
        return Ok(Array2::zeros((0, d)));
    }
    if let Some(&bad) = minority_rows.iter().find(|&&r| r >= z_s.nrows()) {
        return Err(Error::invalid(format!("seed row {bad} out of range")));
    }
    let support = cfg.ep_minority_only.then_some(minority_rows);
    let w = propagator_rows(z_s, minority_rows, support, cfg)?;
    Ok(w.dot(&z_s))
}

/// Cross-domain propagation: the graph spans the minority rows (first) and
/// the target rows; each minority row gets one propagated embedding.
pub fn propagate_cross_domain(
    minority: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    cfg: &GraphConfig,
) -> Result<Array2<f64>> {
    let (nf, d) = minority.dim();
    if nf == 0 {
        return Ok(Array2::zeros((0, d)));
    }
    if target.nrows() > 0 && target.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: target.ncols(),
        });
    }
    if target.nrows() == 0 {
        warn!("cross-domain propagation without target rows; using minority rows only");
    }
    let mut z_o = Array2::<f64>::zeros((nf + target.nrows(), d));
    z_o.slice_mut(s![..nf, ..]).assign(&minority);
    z_o.slice_mut(s![nf.., ..]).assign(&target);
    let seeds: Vec<usize> = (0..nf).collect();
    let w = propagator_rows(z_o.view(), &seeds, None, cfg)?;
    Ok(w.dot(&z_o))
}
