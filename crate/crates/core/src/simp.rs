//! Modified-SIMP interpolation, density filtering and the compliance
//! objective with its adjoint sensitivity. One call to [`evaluate`] is one
//! FEM solve.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grid_fem::{
    assemble, element_stiffness_elastic, element_stiffness_heat, solve, BandedCholesky,
    BoundarySpec, DofMap, ElementMatrix, Physics, SolverKind, SolverSettings, StructuredGrid,
};

/// `E(x) = Emin + x^p (E0 - Emin)`, shared by stiffness and conductivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialModel {
    pub e0: f64,
    pub emin: f64,
    pub penal: f64,
}

impl Default for MaterialModel {
    fn default() -> Self {
        Self {
            e0: 1.0,
            emin: 1e-3,
            penal: 3.0,
        }
    }
}

impl MaterialModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.emin > 0.0 && self.emin < self.e0 && self.e0.is_finite()) {
            return Err(Error::invalid(
                "material",
                format!("need 0 < Emin < E0, got Emin={} E0={}", self.emin, self.e0),
            ));
        }
        if !(self.penal >= 1.0) {
            return Err(Error::invalid(
                "material",
                format!("penalization must be >= 1, got {}", self.penal),
            ));
        }
        Ok(())
    }

    #[inline]
    fn modulus(&self, x: f64) -> f64 {
        self.emin + x.powf(self.penal) * (self.e0 - self.emin)
    }

    #[inline]
    fn modulus_derivative(&self, x: f64) -> f64 {
        self.penal * x.powf(self.penal - 1.0) * (self.e0 - self.emin)
    }
}

pub fn interpolate(x: f64, model: &MaterialModel) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid(
            "density",
            format!("must lie in [0, 1], got {x}"),
        ));
    }
    Ok(model.modulus(x))
}

/// Per-element densities on a structured grid, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: StructuredGrid,
    values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: StructuredGrid, values: Vec<f64>) -> Result<Self> {
        check_len("density field", grid.element_count(), values.len())?;
        if let Some((e, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::invalid(
                "density",
                format!("element {e} has value {v} outside [0, 1]"),
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn uniform(grid: StructuredGrid, value: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.element_count()])
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Largest componentwise absolute difference.
    pub fn max_change(&self, other: &DensityField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn volume_fraction(x: &DensityField) -> f64 {
    x.values.iter().sum::<f64>() / x.values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub rmin: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self { rmin: 1.5 }
    }
}

/// Row-normalized conic-weight density filter `W`.
#[derive(Debug, Clone)]
pub struct DensityFilter {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl DensityFilter {
    pub fn new(grid: &StructuredGrid, spec: FilterSpec) -> Result<Self> {
        let rmin = spec.rmin;
        if !(rmin >= 1.0) || !rmin.is_finite() {
            return Err(Error::invalid(
                "rmin",
                format!("filter radius must be >= 1, got {rmin}"),
            ));
        }
        let reach = rmin.ceil() as i64 - 1;
        let (nx, ny) = (grid.nelx as i64, grid.nely as i64);
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for e in 0..grid.element_count() {
            let (ex, ey) = grid.element_coords(e);
            let (ex, ey) = (ex as i64, ey as i64);
            let start = cols.len();
            for ix in (ex - reach).max(0)..=(ex + reach).min(nx - 1) {
                for iy in (ey - reach).max(0)..=(ey + reach).min(ny - 1) {
                    let dist = (((ix - ex).pow(2) + (iy - ey).pow(2)) as f64).sqrt();
                    let w = rmin - dist;
                    if w > 0.0 {
                        cols.push(grid.element(ix as usize, iy as usize));
                        weights.push(w);
                    }
                }
            }
            let total: f64 = weights[start..].iter().sum();
            weights[start..].iter_mut().for_each(|w| *w /= total);
            row_ptr.push(cols.len());
        }
        Ok(Self {
            row_ptr,
            cols,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalized weights of row `e` as `(column, weight)`.
    pub fn row(&self, e: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[e]..self.row_ptr[e + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    /// `W x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|e| self.row(e).map(|(i, w)| w * x[i]).sum())
            .collect()
    }

    /// `W^T g`
    pub fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (e, ge) in g.iter().enumerate() {
            for (i, w) in self.row(e) {
                out[i] += w * ge;
            }
        }
        out
    }
}

pub fn density_filter(x: &DensityField, spec: FilterSpec) -> Result<DensityField> {
    let filter = DensityFilter::new(x.grid(), spec)?;
    let mut values = filter.apply(x.values());
    // weights are convex, so only roundoff can leave [0, 1]
    values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    DensityField::new(*x.grid(), values)
}

pub fn filter_chain_rule(
    grid: &StructuredGrid,
    d_filtered: &[f64],
    spec: FilterSpec,
) -> Result<Vec<f64>> {
    check_len("filtered sensitivity", grid.element_count(), d_filtered.len())?;
    Ok(DensityFilter::new(grid, spec)?.apply_transpose(d_filtered))
}

/// A well-posed design problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub physics: Physics,
    pub grid: StructuredGrid,
    pub material: MaterialModel,
    /// Only used for elasticity.
    pub poisson_ratio: f64,
    pub boundary: BoundarySpec,
    pub volume_fraction: f64,
    pub filter: FilterSpec,
    pub solver: SolverSettings,
}

/// Objective, sensitivity and state at one design.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    /// `dC/dx` with respect to the raw design.
    pub gradient: Vec<f64>,
    /// `dC/dx~` with respect to the filtered design.
    pub filtered_gradient: Vec<f64>,
    pub filtered: Vec<f64>,
    pub state: Vec<f64>,
    pub fem_solves: usize,
}

/// Precomputed element matrix, dof tables and filter for a [`ProblemSpec`].
#[derive(Debug, Clone)]
pub struct Problem {
    spec: ProblemSpec,
    k0: ElementMatrix,
    dofmap: DofMap,
    filter: DensityFilter,
    // reduced index of each element dof, for direct band assembly
    element_free: Vec<Option<usize>>,
    free_index: Vec<Option<usize>>,
    free_count: usize,
    half_bandwidth: usize,
}

impl Problem {
    pub fn new(spec: ProblemSpec) -> Result<Self> {
        spec.material.validate()?;
        if !(spec.volume_fraction > 0.0 && spec.volume_fraction < 1.0) {
            return Err(Error::invalid(
                "volume_fraction",
                format!("must lie in (0, 1), got {}", spec.volume_fraction),
            ));
        }
        let k0 = match spec.physics {
            Physics::Elastic => element_stiffness_elastic(spec.poisson_ratio)?,
            Physics::Heat => element_stiffness_heat(),
        };
        let dofmap = DofMap::new(&spec.grid, spec.physics);
        spec.boundary.validate(dofmap.total_dofs())?;
        let filter = DensityFilter::new(&spec.grid, spec.filter)?;
        let free_index = spec.boundary.free_index(dofmap.total_dofs());
        let free_count = free_index.iter().flatten().count();
        let mut element_free = Vec::with_capacity(dofmap.element_count() * dofmap.dofs_per_element());
        let mut half_bandwidth = 0;
        for e in 0..dofmap.element_count() {
            let reduced: Vec<Option<usize>> =
                dofmap.element_dofs(e).iter().map(|&d| free_index[d]).collect();
            let present: Vec<usize> = reduced.iter().flatten().copied().collect();
            if let (Some(lo), Some(hi)) = (present.iter().min(), present.iter().max()) {
                half_bandwidth = half_bandwidth.max(hi - lo);
            }
            element_free.extend(reduced);
        }
        Ok(Self {
            spec,
            k0,
            dofmap,
            filter,
            element_free,
            free_index,
            free_count,
            half_bandwidth,
        })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.spec.grid
    }

    pub fn element_count(&self) -> usize {
        self.spec.grid.element_count()
    }

    pub fn element_matrix(&self) -> &ElementMatrix {
        &self.k0
    }

    pub fn dofmap(&self) -> &DofMap {
        &self.dofmap
    }

    pub fn filter(&self) -> &DensityFilter {
        &self.filter
    }

    pub fn free_dof_count(&self) -> usize {
        self.free_count
    }

    fn solve_state(&self, moduli: &[f64]) -> Result<Vec<f64>> {
        match self.spec.solver.kind {
            SolverKind::Auto | SolverKind::Banded => self.solve_banded(moduli),
            _ => {
                let k = assemble(&self.spec.grid, moduli, &self.k0, &self.dofmap)?;
                solve(&k, &self.spec.boundary, &self.spec.solver)
            }
        }
    }

    fn solve_banded(&self, moduli: &[f64]) -> Result<Vec<f64>> {
        let dpe = self.dofmap.dofs_per_element();
        let mut band = BandedCholesky::zeros(self.free_count, self.half_bandwidth);
        for (e, &scale) in moduli.iter().enumerate() {
            let reduced = &self.element_free[e * dpe..(e + 1) * dpe];
            for (i, ri) in reduced.iter().enumerate() {
                let Some(ri) = *ri else { continue };
                for (j, rj) in reduced.iter().enumerate() {
                    match *rj {
                        Some(rj) if rj <= ri => band.add(ri, rj, scale * self.k0.get(i, j)),
                        _ => {}
                    }
                }
            }
        }
        let rhs: Vec<f64> = self
            .free_index
            .iter()
            .zip(&self.spec.boundary.load)
            .filter_map(|(slot, f)| slot.map(|_| *f))
            .collect();
        let u_free = band.factor()?.solve(&rhs);
        let mut u = vec![0.0; self.dofmap.total_dofs()];
        for (slot, target) in self.free_index.iter().zip(u.iter_mut()) {
            if let Some(i) = slot {
                *target = u_free[*i];
            }
        }
        Ok(u)
    }
}

/// Compliance `C = sum_e E(x~_e) u_e^T k0 u_e` and `dC/dx`, chain-ruled
/// through the density filter. Compliance is self-adjoint, so the state
/// solve is the only solve.
pub fn evaluate(x: &DensityField, problem: &Problem) -> Result<Evaluation> {
    check_len("design", problem.element_count(), x.len())?;
    let material = &problem.spec.material;
    let filtered = problem.filter.apply(x.values());
    let moduli: Vec<f64> = filtered.iter().map(|&v| material.modulus(v)).collect();
    let state = problem.solve_state(&moduli)?;

    let mut objective = 0.0;
    let mut filtered_gradient = Vec::with_capacity(filtered.len());
    let mut ue = vec![0.0; problem.dofmap.dofs_per_element()];
    for (e, &xe) in filtered.iter().enumerate() {
        for (slot, &d) in ue.iter_mut().zip(problem.dofmap.element_dofs(e)) {
            *slot = state[d];
        }
        let energy = problem.k0.quadratic_form(&ue);
        objective += moduli[e] * energy;
        filtered_gradient.push(-material.modulus_derivative(xe) * energy);
    }
    if !objective.is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    let gradient = problem.filter.apply_transpose(&filtered_gradient);
    Ok(Evaluation {
        objective,
        gradient,
        filtered_gradient,
        filtered,
        state,
        fem_solves: 1,
    })
}
