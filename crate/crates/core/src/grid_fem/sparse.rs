use super::{DofMap, ElementMatrix, StructuredGrid};
use crate::error::{check_len, Error, Result};

/// Compressed-row storage of a symmetric matrix (both triangles stored).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetricMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSymmetricMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(dim: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dim];
        for &(r, c, v) in triplets {
            rows[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last = None;
            for (c, v) in row {
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            dim,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|r| self.get(r, r)).collect()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.mul_vec_into(v, &mut out);
        out
    }

    pub fn mul_vec_into(&self, v: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * v[self.col_idx[k]];
            }
            *o = acc;
        }
    }

    /// Largest `|r - c|` over stored entries.
    pub fn half_bandwidth(&self) -> usize {
        (0..self.dim)
            .flat_map(|r| self.row(r).map(move |(c, _)| r.abs_diff(c)))
            .max()
            .unwrap_or(0)
    }

    /// Drops the rows and columns whose entry in `free` is `None`.
    pub fn reduce(&self, free: &[Option<usize>]) -> Self {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for (r, slot) in free.iter().enumerate() {
            if slot.is_none() {
                continue;
            }
            for (c, v) in self.row(r) {
                if let Some(cc) = free[c] {
                    col_idx.push(cc);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            dim: row_ptr.len() - 1,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.dim]; self.dim];
        for (r, row) in dense.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] = v;
            }
        }
        dense
    }

    /// Largest `|a_rc - a_cr|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        (0..self.dim)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v)))
            .map(|(r, c, v)| (v - self.get(c, r)).abs())
            .fold(0.0, f64::max)
            / scale
    }
}

/// `K = sum_e scale_e * scatter(k0)`.
pub fn assemble(
    grid: &StructuredGrid,
    per_element_scale: &[f64],
    k0: &ElementMatrix,
    dofmap: &DofMap,
) -> Result<SparseSymmetricMatrix> {
    check_len("per-element scale", grid.element_count(), per_element_scale.len())?;
    check_len("element matrix", dofmap.dofs_per_element(), k0.size())?;
    if let Some((e, s)) = per_element_scale
        .iter()
        .enumerate()
        .find(|(_, s)| !(**s > 0.0 && s.is_finite()))
    {
        return Err(Error::invalid(
            "per_element_scale",
            format!("element {e} has nonpositive or non-finite scale {s}"),
        ));
    }
    let n = k0.size();
    let mut triplets = Vec::with_capacity(grid.element_count() * n * n);
    for (e, &s) in per_element_scale.iter().enumerate() {
        let dofs = dofmap.element_dofs(e);
        for (i, &gi) in dofs.iter().enumerate() {
            for (j, &gj) in dofs.iter().enumerate() {
                triplets.push((gi, gj, s * k0.get(i, j)));
            }
        }
    }
    Ok(SparseSymmetricMatrix::from_triplets(
        dofmap.total_dofs(),
        &triplets,
    ))
}
