use crate::error::{Error, Result};

/// Small dense row-major element matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementMatrix {
    size: usize,
    data: Vec<f64>,
}

impl ElementMatrix {
    pub fn from_rows(size: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), size * size, "element matrix must be square");
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.size)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `v^T k v`
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, row) in self.data.chunks_exact(self.size).enumerate() {
            let mut r = 0.0;
            for (a, b) in row.iter().zip(v) {
                r += a * b;
            }
            acc += v[i] * r;
        }
        acc
    }
}

/// Plane-stress bilinear quad on a unit square with unit Young's modulus.
///
/// Dof order is `[u_BL, v_BL, u_BR, v_BR, u_TR, v_TR, u_TL, v_TL]`.
pub fn element_stiffness_elastic(poisson_ratio: f64) -> Result<ElementMatrix> {
    let nu = poisson_ratio;
    if !(nu > 0.0 && nu < 0.5) {
        return Err(Error::invalid(
            "poisson_ratio",
            format!("must lie in (0, 0.5), got {nu}"),
        ));
    }
    let k = [
        0.5 - nu / 6.0,
        0.125 + nu / 8.0,
        -0.25 - nu / 12.0,
        -0.125 + 3.0 * nu / 8.0,
        -0.25 + nu / 12.0,
        -0.125 - nu / 8.0,
        nu / 6.0,
        0.125 - 3.0 * nu / 8.0,
    ];
    let idx: [[usize; 8]; 8] = [
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ];
    let scale = 1.0 / (1.0 - nu * nu);
    let data = idx
        .iter()
        .flat_map(|row| row.iter().map(|&i| scale * k[i]))
        .collect();
    Ok(ElementMatrix::from_rows(8, data))
}

/// Unit-conductivity bilinear quad on a unit square, nodes BL, BR, TR, TL.
pub fn element_stiffness_heat() -> ElementMatrix {
    let (d, a, o) = (2.0 / 3.0, -1.0 / 6.0, -1.0 / 3.0);
    ElementMatrix::from_rows(
        4,
        vec![
            d, a, o, a, //
            a, d, a, o, //
            o, a, d, a, //
            a, o, a, d,
        ],
    )
}
