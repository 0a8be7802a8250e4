//! Structured 2D finite-element core.
//!
//! Bilinear quadrilateral elements on a unit-square grid. Nodes are numbered
//! column-major with `y` running fastest, and row 0 is the *top* row so that
//! element order matches image rows. Element dofs follow counterclockwise node
//! order starting at the bottom-left corner: BL, BR, TR, TL.

mod element;
mod solver;
mod sparse;

pub use element::{element_stiffness_elastic, element_stiffness_heat, ElementMatrix};
pub use solver::{dense_solve, solve, BandedCholesky, SolverKind, SolverSettings};
pub use sparse::{assemble, SparseSymmetricMatrix};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest system the dense direct solver accepts.
pub const DENSE_DOF_LIMIT: usize = 2_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredGrid {
    pub nelx: usize,
    pub nely: usize,
}

impl StructuredGrid {
    pub fn new(nelx: usize, nely: usize) -> Result<Self> {
        if nelx == 0 || nely == 0 {
            return Err(Error::invalid(
                "grid",
                format!("element counts must be positive, got {nelx}x{nely}"),
            ));
        }
        Ok(Self { nelx, nely })
    }

    /// Edge length of every element.
    pub fn element_size(&self) -> f64 {
        1.0
    }

    pub fn element_count(&self) -> usize {
        self.nelx * self.nely
    }

    pub fn node_count(&self) -> usize {
        (self.nelx + 1) * (self.nely + 1)
    }

    /// Node index of grid point `(ix, iy)`, `iy` counted from the top edge.
    pub fn node(&self, ix: usize, iy: usize) -> usize {
        ix * (self.nely + 1) + iy
    }

    /// Element index of cell `(ex, ey)`, `ey` counted from the top row.
    pub fn element(&self, ex: usize, ey: usize) -> usize {
        ex * self.nely + ey
    }

    /// Element `(ex, ey)` coordinates of element index `e`.
    pub fn element_coords(&self, e: usize) -> (usize, usize) {
        (e / self.nely, e % self.nely)
    }

    /// Corner nodes of an element in counterclockwise order from bottom-left.
    pub fn element_nodes(&self, e: usize) -> [usize; 4] {
        let (ex, ey) = self.element_coords(e);
        [
            self.node(ex, ey + 1),
            self.node(ex + 1, ey + 1),
            self.node(ex + 1, ey),
            self.node(ex, ey),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Physics {
    Elastic,
    Heat,
}

impl Physics {
    pub fn dofs_per_node(self) -> usize {
        match self {
            Physics::Elastic => 2,
            Physics::Heat => 1,
        }
    }
}

/// Element-to-global degree-of-freedom table.
#[derive(Debug, Clone)]
pub struct DofMap {
    dofs_per_node: usize,
    dofs_per_element: usize,
    total_dofs: usize,
    indices: Vec<usize>,
}

impl DofMap {
    pub fn new(grid: &StructuredGrid, physics: Physics) -> Self {
        let dpn = physics.dofs_per_node();
        let dpe = 4 * dpn;
        let mut indices = Vec::with_capacity(grid.element_count() * dpe);
        for e in 0..grid.element_count() {
            for node in grid.element_nodes(e) {
                for d in 0..dpn {
                    indices.push(dpn * node + d);
                }
            }
        }
        Self {
            dofs_per_node: dpn,
            dofs_per_element: dpe,
            total_dofs: dpn * grid.node_count(),
            indices,
        }
    }

    pub fn dofs_per_node(&self) -> usize {
        self.dofs_per_node
    }

    pub fn dofs_per_element(&self) -> usize {
        self.dofs_per_element
    }

    pub fn total_dofs(&self) -> usize {
        self.total_dofs
    }

    pub fn element_count(&self) -> usize {
        self.indices.len() / self.dofs_per_element
    }

    pub fn element_dofs(&self, e: usize) -> &[usize] {
        &self.indices[e * self.dofs_per_element..(e + 1) * self.dofs_per_element]
    }
}

/// Homogeneous Dirichlet dofs and the load vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub fixed_dofs: Vec<usize>,
    pub load: Vec<f64>,
}

impl BoundarySpec {
    pub fn new(mut fixed_dofs: Vec<usize>, load: Vec<f64>) -> Result<Self> {
        fixed_dofs.sort_unstable();
        fixed_dofs.dedup();
        let spec = Self { fixed_dofs, load };
        spec.validate(spec.load.len())?;
        Ok(spec)
    }

    pub fn validate(&self, total_dofs: usize) -> Result<()> {
        if self.fixed_dofs.is_empty() {
            return Err(Error::invalid(
                "boundary",
                "no fixed dofs; the system would be singular",
            ));
        }
        if self.load.len() != total_dofs {
            return Err(Error::DimensionMismatch {
                what: "load vector",
                expected: total_dofs,
                actual: self.load.len(),
            });
        }
        if let Some(&d) = self.fixed_dofs.iter().find(|&&d| d >= total_dofs) {
            return Err(Error::invalid(
                "boundary",
                format!("fixed dof {d} out of range (total {total_dofs})"),
            ));
        }
        if self.load.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("load vector"));
        }
        Ok(())
    }

    /// Maps every dof to its index in the reduced (free-dof) system.
    pub fn free_index(&self, total_dofs: usize) -> Vec<Option<usize>> {
        let mut map = vec![None; total_dofs];
        let mut fixed = self.fixed_dofs.iter().peekable();
        let mut next = 0;
        for (d, slot) in map.iter_mut().enumerate() {
            if fixed.peek() == Some(&&d) {
                fixed.next();
            } else {
                *slot = Some(next);
                next += 1;
            }
        }
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts() {
        let g = StructuredGrid::new(3, 2).unwrap();
        assert_eq!(g.node_count(), 12);
        assert_eq!(g.element_count(), 6);
        assert!(StructuredGrid::new(0, 2).is_err());
    }

    #[test]
    fn element_nodes_are_counterclockwise() {
        let g = StructuredGrid::new(2, 2).unwrap();
        // element (0,0) is the top-left cell
        assert_eq!(g.element_nodes(0), [1, 4, 3, 0]);
        let (ex, ey) = g.element_coords(g.element(1, 1));
        assert_eq!((ex, ey), (1, 1));
    }

    #[test]
    fn dofmap_indices_in_range() {
        let g = StructuredGrid::new(4, 3).unwrap();
        for physics in [Physics::Elastic, Physics::Heat] {
            let map = DofMap::new(&g, physics);
            assert_eq!(map.element_count(), 12);
            assert_eq!(map.dofs_per_element(), 4 * physics.dofs_per_node());
            for e in 0..12 {
                assert!(map.element_dofs(e).iter().all(|&d| d < map.total_dofs()));
            }
        }
    }

    #[test]
    fn boundary_requires_fixed_dofs() {
        assert!(BoundarySpec::new(vec![], vec![0.0; 4]).is_err());
        assert!(BoundarySpec::new(vec![5], vec![0.0; 4]).is_err());
        assert!(BoundarySpec::new(vec![0], vec![f64::NAN, 0.0]).is_err());
        let b = BoundarySpec::new(vec![2, 0, 2], vec![0.0; 4]).unwrap();
        assert_eq!(b.fixed_dofs, vec![0, 2]);
        assert_eq!(b.free_index(4), vec![None, Some(0), None, Some(1)]);
    }
}
