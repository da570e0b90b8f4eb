//! Sparse storage and the linear solver used by policy iteration.
//!
//! The default path is an unpivoted banded LU. The systems produced by the
//! scheme are nonsingular M-matrices, for which Gaussian elimination without
//! pivoting is stable and keeps all fill inside the band. BiCGSTAB with a
//! Jacobi preconditioner backs it up when elimination hits a vanishing pivot.

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    /// Build from per-row entry lists. Duplicate columns are summed, exact zeros dropped.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut builder = CsrBuilder::with_capacity(n, rows.iter().map(Vec::len).sum());
        for row in rows {
            builder.push_row(row);
        }
        builder.finish()
    }

    pub fn from_dense(a: &[Vec<f64>]) -> Self {
        Self::from_rows(
            a.iter()
                .map(|r| r.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect())
                .collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `(column, value)` pairs of one row, sorted by column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    /// `(lower, upper)` bandwidth.
    pub fn bandwidth(&self) -> (usize, usize) {
        let mut lower = 0;
        let mut upper = 0;
        for i in 0..self.n {
            for (j, _) in self.row(i) {
                if j < i {
                    lower = lower.max(i - j);
                } else {
                    upper = upper.max(j - i);
                }
            }
        }
        (lower, upper)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }

    /// Symmetric permutation `B[perm[i], perm[j]] = A[i, j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut rows = vec![Vec::new(); self.n];
        for i in 0..self.n {
            rows[perm[i]] = self.row(i).map(|(j, v)| (perm[j], v)).collect();
        }
        Self::from_rows(rows)
    }
}

pub struct CsrBuilder {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrBuilder {
    pub fn with_capacity(rows: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(rows + 1);
        row_ptr.push(0);
        Self {
            row_ptr,
            cols: Vec::with_capacity(nnz),
            vals: Vec::with_capacity(nnz),
        }
    }

    pub fn push_row(&mut self, mut entries: Vec<(usize, f64)>) {
        entries.sort_unstable_by_key(|e| e.0);
        let start = self.cols.len();
        for (j, v) in entries {
            if self.cols.len() > start && *self.cols.last().unwrap() == j {
                *self.vals.last_mut().unwrap() += v;
            } else {
                self.cols.push(j);
                self.vals.push(v);
            }
        }
        // drop entries that cancelled to exact zero
        let mut w = start;
        for r in start..self.cols.len() {
            if self.vals[r] != 0.0 {
                self.cols[w] = self.cols[r];
                self.vals[w] = self.vals[r];
                w += 1;
            }
        }
        self.cols.truncate(w);
        self.vals.truncate(w);
        self.row_ptr.push(w);
    }

    pub fn finish(self) -> CsrMatrix {
        CsrMatrix {
            n: self.row_ptr.len() - 1,
            row_ptr: self.row_ptr,
            cols: self.cols,
            vals: self.vals,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    BandedLu,
    BiCgStab,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Mixed absolute/relative tolerance on `||A v - b||_inf / (1 + ||b||_inf)`.
    pub tol: f64,
    /// Iteration cap for the Krylov fallback.
    pub max_iter: usize,
    pub method: Method,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 2000,
            method: Method::BandedLu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub method: Method,
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn residual_vec(a: &CsrMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    a.mul_vec(x).iter().zip(b).map(|(ax, bi)| bi - ax).collect()
}

/// Scaled residual `||b - A x||_inf / (1 + ||b||_inf)`.
pub fn scaled_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let r = residual_vec(a, x, b);
    if r.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    inf_norm(&r) / (1.0 + inf_norm(b))
}

pub fn solve(a: &CsrMatrix, b: &[f64], opts: &SolveOptions) -> Result<SolveReport> {
    if b.len() != a.n() {
        return Err(Error::DimensionMismatch {
            expected: a.n(),
            got: b.len(),
        });
    }
    if let Some(row) = (0..a.n()).find(|&i| a.row_len(i) == 0) {
        return Err(Error::SingularSystem {
            row,
            reason: "empty row".into(),
        });
    }
    if opts.method == Method::BandedLu {
        match BandedLu::factor(a) {
            Ok(lu) => {
                let mut x = lu.solve(b);
                let mut res = scaled_residual(a, &x, b);
                let mut sweeps = 1;
                // iterative refinement against the factored matrix
                while res > opts.tol * 1e-3 && sweeps < 3 && res.is_finite() {
                    let correction = lu.solve(&residual_vec(a, &x, b));
                    x.iter_mut().zip(&correction).for_each(|(xi, c)| *xi += c);
                    res = scaled_residual(a, &x, b);
                    sweeps += 1;
                }
                if res <= opts.tol {
                    return Ok(SolveReport {
                        solution: x,
                        iterations: sweeps,
                        residual: res,
                        method: Method::BandedLu,
                    });
                }
                log::debug!("banded LU residual {res:.3e} above tolerance, falling back to BiCGSTAB");
                return bicgstab(a, b, Some(x), opts);
            }
            Err(e) => {
                log::debug!("banded LU failed ({e}), falling back to BiCGSTAB");
                return bicgstab(a, b, None, opts).map_err(|err| match err {
                    Error::SolveNotConverged { .. } => e,
                    other => other,
                });
            }
        }
    }
    bicgstab(a, b, None, opts)
}

/// Unpivoted LU factors stored in a dense band, row-major.
struct BandedLu {
    n: usize,
    lower: usize,
    upper: usize,
    width: usize,
    band: Vec<f64>,
}

impl BandedLu {
    fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.n();
        let (lower, upper) = a.bandwidth();
        let width = lower + upper + 1;
        let mut band = vec![0.0; n * width];
        for i in 0..n {
            for (j, v) in a.row(i) {
                band[i * width + j + lower - i] = v;
            }
        }
        let scale = (0..n)
            .map(|i| a.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let tiny = f64::EPSILON * scale.max(1.0) * 1e-2;
        for k in 0..n {
            let pivot = band[k * width + lower];
            if !pivot.is_finite() || pivot.abs() <= tiny {
                return Err(Error::SingularSystem {
                    row: k,
                    reason: format!("vanishing pivot {pivot:.3e} during elimination"),
                });
            }
            let last_col = (k + upper).min(n - 1);
            let span = last_col - k;
            let last_row = (k + lower).min(n - 1);
            for i in k + 1..=last_row {
                let off = i * width + lower;
                let lik_pos = off + k - i;
                let lik = band[lik_pos];
                if lik == 0.0 {
                    continue;
                }
                let l = lik / pivot;
                band[lik_pos] = l;
                let (head, tail) = band.split_at_mut(i * width);
                let src = &head[k * width + lower + 1..k * width + lower + 1 + span];
                let dst_start = off + k + 1 - i - i * width;
                let dst = &mut tail[dst_start..dst_start + span];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d -= l * s;
                }
            }
        }
        Ok(Self {
            n,
            lower,
            upper,
            width,
            band,
        })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, lw, w) = (self.n, self.lower, self.width);
        let mut y = b.to_vec();
        for i in 0..n {
            let first = i.saturating_sub(lw);
            let mut acc = y[i];
            for j in first..i {
                acc -= self.band[i * w + j + lw - i] * y[j];
            }
            y[i] = acc;
        }
        for i in (0..n).rev() {
            let last = (i + self.upper).min(n - 1);
            let mut acc = y[i];
            for j in i + 1..=last {
                acc -= self.band[i * w + j + lw - i] * y[j];
            }
            y[i] = acc / self.band[i * w + lw];
        }
        y
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn bicgstab(a: &CsrMatrix, b: &[f64], x0: Option<Vec<f64>>, opts: &SolveOptions) -> Result<SolveReport> {
    let n = a.n();
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    if let Some(row) = diag.iter().position(|&d| d == 0.0) {
        return Err(Error::SingularSystem {
            row,
            reason: "zero diagonal".into(),
        });
    }
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&diag).map(|(x, d)| x / d).collect() };
    let mut x = match x0 {
        Some(x) if x.iter().all(|v| v.is_finite()) => x,
        _ => precond(b),
    };
    let bnorm = 1.0 + inf_norm(b);
    let mut r = residual_vec(a, &x, b);
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut best = (inf_norm(&r) / bnorm, x.clone());
    for it in 1..=opts.max_iter {
        if best.0 <= opts.tol {
            return Ok(SolveReport {
                solution: best.1,
                iterations: it - 1,
                residual: best.0,
                method: Method::BiCgStab,
            });
        }
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || !rho_new.is_finite() {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let p_hat = precond(&p);
        v = a.mul_vec(&p_hat);
        let denom = dot(&r_hat, &v);
        if denom == 0.0 {
            break;
        }
        alpha = rho / denom;
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        let s_hat = precond(&s);
        let t = a.mul_vec(&s_hat);
        let tt = dot(&t, &t);
        omega = if tt == 0.0 { 0.0 } else { dot(&t, &s) / tt };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
        }
        r = residual_vec(a, &x, b);
        let res = inf_norm(&r) / bnorm;
        if res < best.0 {
            best = (res, x.clone());
        }
        if omega == 0.0 {
            break;
        }
    }
    if best.0 <= opts.tol {
        return Ok(SolveReport {
            solution: best.1,
            iterations: opts.max_iter,
            residual: best.0,
            method: Method::BiCgStab,
        });
    }
    Err(Error::SolveNotConverged {
        iterations: opts.max_iter,
        residual: best.0,
        best: best.1,
    })
}
