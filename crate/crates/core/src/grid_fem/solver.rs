//! Linear solvers for the reduced (free-dof) system.
//!
//! Dirichlet dofs are eliminated by dropping their rows and columns, so every
//! backend sees a symmetric positive definite matrix.

use serde::{Deserialize, Serialize};

use super::{BoundarySpec, SparseSymmetricMatrix, DENSE_DOF_LIMIT};
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    /// Banded Cholesky; the structured-grid numbering keeps the band narrow.
    #[default]
    Auto,
    /// Jacobi-preconditioned conjugate gradient.
    Cg,
    /// Dense Gaussian elimination, limited to [`DENSE_DOF_LIMIT`] dofs.
    Dense,
    Banded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub kind: SolverKind,
    pub tolerance: f64,
    /// Defaults to ten times the number of free dofs when `None`.
    pub max_iterations: Option<usize>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            kind: SolverKind::Auto,
            tolerance: 1e-10,
            max_iterations: None,
        }
    }
}

impl SolverSettings {
    pub fn with_kind(kind: SolverKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

/// Solves `K U = F` with homogeneous Dirichlet conditions on `boundary.fixed_dofs`.
pub fn solve(
    k: &SparseSymmetricMatrix,
    boundary: &BoundarySpec,
    settings: &SolverSettings,
) -> Result<Vec<f64>> {
    let n = k.dim();
    boundary.validate(n)?;
    let free = boundary.free_index(n);
    let reduced = k.reduce(&free);
    let rhs: Vec<f64> = free
        .iter()
        .zip(&boundary.load)
        .filter_map(|(slot, f)| slot.map(|_| *f))
        .collect();

    let u_free = match settings.kind {
        SolverKind::Cg => {
            let max_iter = settings.max_iterations.unwrap_or(10 * reduced.dim().max(1));
            conjugate_gradient(&reduced, &rhs, settings.tolerance, max_iter)?
        }
        SolverKind::Dense => {
            if reduced.dim() > DENSE_DOF_LIMIT {
                return Err(Error::invalid(
                    "solver",
                    format!(
                        "dense solve limited to {DENSE_DOF_LIMIT} dofs, system has {}",
                        reduced.dim()
                    ),
                ));
            }
            dense_solve(reduced.to_dense(), rhs)?
        }
        SolverKind::Auto | SolverKind::Banded => BandedCholesky::from_sparse(&reduced)
            .factor()?
            .solve(&rhs),
    };

    let mut u = vec![0.0; n];
    for (slot, target) in free.iter().zip(u.iter_mut()) {
        if let Some(i) = slot {
            *target = u_free[*i];
        }
    }
    Ok(u)
}

/// Jacobi-preconditioned CG. Converged when `||r|| / ||b|| <= tolerance`.
pub(crate) fn conjugate_gradient(
    a: &SparseSymmetricMatrix,
    b: &[f64],
    tolerance: f64,
    max_iterations: usize,
) -> Result<Vec<f64>> {
    let n = a.dim();
    check_len("right-hand side", n, b.len())?;
    let b_norm = norm(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .enumerate()
        .map(|(row, d)| {
            if d > 0.0 {
                Ok(1.0 / d)
            } else {
                Err(Error::Singular { row, pivot: d })
            }
        })
        .collect::<Result<_>>()?;

    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);

    for iteration in 0..max_iterations {
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::Singular {
                row: iteration,
                pivot: pap,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm(&r) / b_norm <= tolerance {
            // guard against drift of the recursive residual
            let ax = a.mul_vec(&x);
            let true_res = ax.iter().zip(b).map(|(ax, b)| (b - ax).powi(2)).sum::<f64>().sqrt();
            if true_res / b_norm <= tolerance {
                return Ok(x);
            }
            r = b.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverFailure {
        iterations: max_iterations,
        residual: norm(&r) / b_norm,
    })
}

/// Gaussian elimination with partial pivoting on a dense system.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    check_len("dense matrix rows", n, a.len())?;
    let scale = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        let pivot = a[pivot_row][col];
        if pivot.abs() <= 1e-14 * scale || !pivot.is_finite() {
            return Err(Error::Singular { row: col, pivot });
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        let (upper, lower) = a.split_at_mut(col + 1);
        let prow = &upper[col];
        for (offset, row) in lower.iter_mut().enumerate() {
            let factor = row[col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                row[k] -= factor * prow[k];
            }
            b[col + 1 + offset] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let tail: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - tail) / a[i][i];
    }
    Ok(x)
}

/// Lower-triangular band storage for an SPD matrix, factored in place.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    dim: usize,
    half_bw: usize,
    // row i holds columns i-half_bw ..= i
    band: Vec<f64>,
    factored: bool,
}

impl BandedCholesky {
    pub fn zeros(dim: usize, half_bw: usize) -> Self {
        Self {
            dim,
            half_bw,
            band: vec![0.0; dim * (half_bw + 1)],
            factored: false,
        }
    }

    pub fn from_sparse(a: &SparseSymmetricMatrix) -> Self {
        let mut out = Self::zeros(a.dim(), a.half_bandwidth());
        for r in 0..a.dim() {
            for (c, v) in a.row(r) {
                if c <= r {
                    out.add(r, c, v);
                }
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn at(&self, row: usize, col: usize) -> usize {
        row * (self.half_bw + 1) + (col + self.half_bw - row)
    }

    /// Accumulates into the lower triangle; requires `col <= row` within the band.
    #[inline]
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(col <= row && row - col <= self.half_bw);
        let i = self.at(row, col);
        self.band[i] += value;
    }

    pub fn factor(mut self) -> Result<Self> {
        let w = self.half_bw;
        for i in 0..self.dim {
            let first = i.saturating_sub(w);
            for j in first..=i {
                let start = first.max(j.saturating_sub(w));
                let original = self.band[self.at(i, j)];
                let mut s = original;
                let ri = self.at(i, start);
                let rj = self.at(j, start);
                for k in 0..(j - start) {
                    s -= self.band[ri + k] * self.band[rj + k];
                }
                if i == j {
                    // cancellation down to roundoff means a rank-deficient system
                    if !(s > 1e-13 * original.abs()) || !s.is_finite() {
                        return Err(Error::Singular { row: i, pivot: s });
                    }
                    let idx = self.at(i, i);
                    self.band[idx] = s.sqrt();
                } else {
                    let idx = self.at(i, j);
                    self.band[idx] = s / self.band[self.at(j, j)];
                }
            }
        }
        self.factored = true;
        Ok(self)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert!(self.factored, "solve called before factor");
        let w = self.half_bw;
        let mut y = b.to_vec();
        for i in 0..self.dim {
            let first = i.saturating_sub(w);
            let row = self.at(i, first);
            let mut s = y[i];
            for (k, yk) in (first..i).zip(&y[first..i]) {
                s -= self.band[row + (k - first)] * yk;
            }
            y[i] = s / self.band[self.at(i, i)];
        }
        for i in (0..self.dim).rev() {
            y[i] /= self.band[self.at(i, i)];
            let yi = y[i];
            let first = i.saturating_sub(w);
            let row = self.at(i, first);
            for k in first..i {
                y[k] -= self.band[row + (k - first)] * yi;
            }
        }
        y
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
