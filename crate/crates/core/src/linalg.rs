//! Small dense kernels shared by the graph and network code.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// LU factorization with partial (row) pivoting of a square matrix.
///
/// Stored packed: the strict lower triangle holds the unit-lower factor, the
/// upper triangle holds U. `perm[k]` is the original row placed at row `k`.
#[derive(Debug, Clone)]
pub struct LuFactor {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl LuFactor {
    pub fn new(a: ArrayView2<'_, f64>) -> Result<Self> {
        let (n, m) = a.dim();
        if n != m {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: m,
            });
        }
        // logical iteration order is row-major regardless of memory layout
        let mut lu: Vec<f64> = a.iter().copied().collect();
        let scale = lu.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(1.0);
        let tiny = scale * 1e-14;
        let mut perm: Vec<usize> = (0..n).collect();

        for k in 0..n {
            let (mut piv_row, mut piv_val) = (k, lu[k * n + k].abs());
            for r in (k + 1)..n {
                let v = lu[r * n + k].abs();
                if v > piv_val {
                    piv_row = r;
                    piv_val = v;
                }
            }
            if !(piv_val > tiny) {
                return Err(Error::Singular {
                    column: k,
                    pivot: piv_val,
                });
            }
            if piv_row != k {
                for j in 0..n {
                    lu.swap(k * n + j, piv_row * n + j);
                }
                perm.swap(k, piv_row);
            }
            let pivot = lu[k * n + k];
            let (head, tail) = lu.split_at_mut((k + 1) * n);
            let row_k = &head[k * n..(k + 1) * n];
            for row in tail.chunks_exact_mut(n) {
                let factor = row[k] / pivot;
                row[k] = factor;
                if factor != 0.0 {
                    for (x, &u) in row[(k + 1)..].iter_mut().zip(&row_k[(k + 1)..]) {
                        *x -= factor * u;
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n, "rhs length");
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.lu[i * n..i * n + i];
            let s: f64 = row.iter().zip(&x[..i]).map(|(l, v)| l * v).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n..(i + 1) * n];
            let s: f64 = row[(i + 1)..]
                .iter()
                .zip(&x[(i + 1)..])
                .map(|(u, v)| u * v)
                .sum();
            x[i] = (x[i] - s) / row[i];
        }
        x
    }

    /// Column `j` of `A^{-1}`.
    pub fn inverse_column(&self, j: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.n];
        e[j] = 1.0;
        self.solve(&e)
    }

    /// Full inverse assembled column by column, optionally spread over
    /// `threads` workers. Each column is computed by the same sequential
    /// routine, so the result does not depend on the thread count.
    pub fn inverse(&self, threads: usize) -> Array2<f64> {
        let n = self.n;
        let cols: Vec<Vec<f64>> = if threads <= 1 || n < 64 {
            (0..n).map(|j| self.inverse_column(j)).collect()
        } else {
            let chunk = n.div_ceil(threads);
            let mut out: Vec<Vec<f64>> = vec![Vec::new(); n];
            std::thread::scope(|s| {
                for (ci, slot) in out.chunks_mut(chunk).enumerate() {
                    s.spawn(move || {
                        for (off, col) in slot.iter_mut().enumerate() {
                            *col = self.inverse_column(ci * chunk + off);
                        }
                    });
                }
            });
            out
        };
        Array2::from_shape_fn((n, n), |(i, j)| cols[j][i])
    }
}

/// Squared Euclidean distances between all pairs of rows.
pub fn pairwise_sq_distances(z: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = z.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        let zi = z.row(i);
        for j in (i + 1)..n {
            let v: f64 = zi
                .iter()
                .zip(z.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Population mean and variance.
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

pub fn max_abs_diff(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn column_means(z: ArrayView2<'_, f64>) -> Array1<f64> {
    let n = z.nrows().max(1) as f64;
    z.sum_axis(ndarray::Axis(0)) / n
}
