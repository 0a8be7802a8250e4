//! Method of moving asymptotes for box-bounded designs with one linearized
//! constraint, and an optimality-criteria updater used as a reference.
//!
//! The constraint `g(x) <= 0` enters the subproblem through its first-order
//! expansion `g + dgdx . (x_new - x)`, which is exact for the volume
//! constraint. The subproblem is solved by bisection on the dual multiplier.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::simp::DensityField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub volume_target: f64,
    pub move_limit: f64,
}

impl ConstraintSpec {
    pub fn new(volume_target: f64, move_limit: f64) -> Result<Self> {
        if !(volume_target > 0.0 && volume_target < 1.0) {
            return Err(Error::invalid(
                "volume_target",
                format!("must lie in (0, 1), got {volume_target}"),
            ));
        }
        if !(move_limit > 0.0 && move_limit <= 1.0) {
            return Err(Error::invalid(
                "move_limit",
                format!("must lie in (0, 1], got {move_limit}"),
            ));
        }
        Ok(Self {
            volume_target,
            move_limit,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmaSettings {
    /// Initial asymptote distance as a fraction of the variable range.
    pub asymptote_init: f64,
    /// Applied when the last two steps changed direction.
    pub asymptote_shrink: f64,
    /// Applied when the last two steps kept direction.
    pub asymptote_expand: f64,
    pub asymptote_min: f64,
    pub asymptote_max: f64,
    /// Scale the objective gradient to unit max-norm before the subproblem.
    pub normalize_objective: bool,
}

impl Default for MmaSettings {
    fn default() -> Self {
        Self {
            asymptote_init: 0.5,
            asymptote_shrink: 0.7,
            asymptote_expand: 1.2,
            asymptote_min: 0.01,
            asymptote_max: 10.0,
            normalize_objective: true,
        }
    }
}

const X_MIN: f64 = 0.0;
const X_MAX: f64 = 1.0;
const RANGE: f64 = X_MAX - X_MIN;
// keeps the subproblem strictly convex where the gradient vanishes
const RAA0: f64 = 1e-5;
const ALBEFA: f64 = 0.1;

/// Asymptotes and the two previous iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct MmaState {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub x_prev: Vec<f64>,
    pub x_prev2: Vec<f64>,
    pub iteration: usize,
    pub settings: MmaSettings,
}

impl MmaState {
    pub fn new(n: usize, settings: MmaSettings) -> Self {
        Self {
            lower: vec![X_MIN; n],
            upper: vec![X_MAX; n],
            x_prev: vec![0.0; n],
            x_prev2: vec![0.0; n],
            iteration: 0,
            settings,
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    fn update_asymptotes(&mut self, x: &[f64]) {
        let s = self.settings;
        for i in 0..x.len() {
            if self.iteration < 2 {
                self.lower[i] = x[i] - s.asymptote_init * RANGE;
                self.upper[i] = x[i] + s.asymptote_init * RANGE;
                continue;
            }
            let trend = (x[i] - self.x_prev[i]) * (self.x_prev[i] - self.x_prev2[i]);
            let factor = if trend < 0.0 {
                s.asymptote_shrink
            } else if trend > 0.0 {
                s.asymptote_expand
            } else {
                1.0
            };
            let lower = x[i] - factor * (self.x_prev[i] - self.lower[i]);
            let upper = x[i] + factor * (self.upper[i] - self.x_prev[i]);
            self.lower[i] = lower.clamp(
                x[i] - s.asymptote_max * RANGE,
                x[i] - s.asymptote_min * RANGE,
            );
            self.upper[i] = upper.clamp(
                x[i] + s.asymptote_min * RANGE,
                x[i] + s.asymptote_max * RANGE,
            );
        }
    }
}

/// Separable convex approximation of the objective around one iterate.
struct Subproblem<'a> {
    p: Vec<f64>,
    q: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    lower: &'a [f64],
    upper: &'a [f64],
    x: &'a [f64],
    dgdx: &'a [f64],
    g: f64,
}

impl Subproblem<'_> {
    /// Minimizer of `p/(U-x) + q/(x-L) + lambda a x` on `[alpha, beta]`.
    fn primal(&self, i: usize, lambda: f64) -> f64 {
        let (p, q, l, u) = (self.p[i], self.q[i], self.lower[i], self.upper[i]);
        let c = lambda * self.dgdx[i];
        let slope = |x: f64| p / (u - x).powi(2) - q / (x - l).powi(2) + c;
        let (mut lo, mut hi) = (self.alpha[i], self.beta[i]);
        if slope(lo) >= 0.0 {
            return lo;
        }
        if slope(hi) <= 0.0 {
            return hi;
        }
        // safeguarded Newton on the increasing slope
        let mut x = 0.5 * (lo + hi);
        for _ in 0..100 {
            let s = slope(x);
            if s.abs() <= 1e-15 * (1.0 + c.abs()) {
                break;
            }
            if s > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            if hi - lo <= 1e-15 * (1.0 + x.abs()) {
                break;
            }
            let curvature = 2.0 * p / (u - x).powi(3) + 2.0 * q / (x - l).powi(3);
            let newton = x - s / curvature;
            x = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        x
    }

    fn primal_all(&self, lambda: f64) -> Vec<f64> {
        (0..self.x.len()).map(|i| self.primal(i, lambda)).collect()
    }

    /// Linearized constraint value at the primal point for `lambda`.
    fn constraint(&self, x_new: &[f64]) -> f64 {
        self.g
            + x_new
                .iter()
                .zip(self.x)
                .zip(self.dgdx)
                .map(|((xn, x), a)| a * (xn - x))
                .sum::<f64>()
    }
}

/// One MMA step. `g` is the constraint value at `x` (feasible when `<= 0`)
/// and `dgdx` its gradient.
pub fn mma_update(
    x: &DensityField,
    dfdx: &[f64],
    g: f64,
    dgdx: &[f64],
    state: &mut MmaState,
    spec: &ConstraintSpec,
) -> Result<DensityField> {
    let n = x.len();
    check_len("objective gradient", n, dfdx.len())?;
    check_len("constraint gradient", n, dgdx.len())?;
    check_len("MMA state", n, state.len())?;
    if dfdx.iter().chain(dgdx).any(|v| !v.is_finite()) || !g.is_finite() {
        return Err(Error::NonFinite("MMA gradients"));
    }
    let fmax = dfdx.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if fmax == 0.0 {
        return Ok(x.clone());
    }
    let scale = if state.settings.normalize_objective {
        1.0 / fmax
    } else {
        1.0
    };

    let xv = x.values();
    state.update_asymptotes(xv);

    let mut p = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let mut beta = Vec::with_capacity(n);
    for i in 0..n {
        let (l, u, xi) = (state.lower[i], state.upper[i], xv[i]);
        alpha.push(
            X_MIN
                .max(l + ALBEFA * (xi - l))
                .max(xi - spec.move_limit * RANGE),
        );
        beta.push(
            X_MAX
                .min(u - ALBEFA * (u - xi))
                .min(xi + spec.move_limit * RANGE),
        );
        let df = scale * dfdx[i];
        let (plus, minus) = (df.max(0.0), (-df).max(0.0));
        let pq = 0.001 * (plus + minus) + RAA0 / RANGE;
        p.push((plus + pq) * (u - xi).powi(2));
        q.push((minus + pq) * (xi - l).powi(2));
    }

    let sub = Subproblem {
        p,
        q,
        alpha,
        beta,
        lower: &state.lower,
        upper: &state.upper,
        x: xv,
        dgdx,
        g,
    };

    let x_new = solve_dual(&sub)?;
    state.x_prev2 = std::mem::replace(&mut state.x_prev, xv.to_vec());
    state.iteration += 1;
    // the subproblem keeps iterates inside [alpha, beta] up to roundoff
    let x_new = x_new.into_iter().map(|v| v.clamp(X_MIN, X_MAX)).collect();
    DensityField::new(*x.grid(), x_new)
}

fn solve_dual(sub: &Subproblem<'_>) -> Result<Vec<f64>> {
    let x0 = sub.primal_all(0.0);
    if sub.constraint(&x0) <= 0.0 {
        return Ok(x0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut x_hi = sub.primal_all(hi);
    let mut h_hi = sub.constraint(&x_hi);
    let mut doublings = 0;
    while h_hi > 0.0 {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 {
            return Err(Error::DualSolver {
                lower: lo,
                upper: hi,
                residual: h_hi,
            });
        }
        x_hi = sub.primal_all(hi);
        h_hi = sub.constraint(&x_hi);
    }
    for _ in 0..200 {
        if hi - lo <= 1e-15 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let x_mid = sub.primal_all(mid);
        let h_mid = sub.constraint(&x_mid);
        if h_mid > 0.0 {
            lo = mid;
        } else {
            hi = mid;
            x_hi = x_mid;
            h_hi = h_mid;
        }
    }
    if h_hi > 1e-6 {
        return Err(Error::DualSolver {
            lower: lo,
            upper: hi,
            residual: h_hi,
        });
    }
    Ok(x_hi)
}

/// Classical optimality-criteria update with the volume constraint
/// `mean(x_new) = volume_target` enforced by bisection on the multiplier.
pub fn oc_update(
    x: &DensityField,
    dfdx: &[f64],
    volume_target: f64,
    move_limit: f64,
) -> Result<DensityField> {
    let n = x.len();
    check_len("objective gradient", n, dfdx.len())?;
    if let Some((i, v)) = dfdx.iter().enumerate().find(|(_, v)| !(**v <= 0.0)) {
        return Err(Error::invalid(
            "dfdx",
            format!("optimality criteria need nonpositive sensitivities, entry {i} is {v}"),
        ));
    }
    let xv = x.values();
    let candidate = |lambda: f64| -> Vec<f64> {
        xv.iter()
            .zip(dfdx)
            .map(|(&xi, &d)| {
                let target = xi * (-d / lambda).sqrt();
                target
                    .min(xi + move_limit)
                    .min(1.0)
                    .max(xi - move_limit)
                    .max(0.0)
            })
            .collect()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;

    let scale = dfdx.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::Bisection {
            lower: 0.0,
            upper: 0.0,
            volume: mean(xv),
        });
    }
    // mean(candidate) decreases in lambda
    let (mut lo, mut hi) = (scale * 1e-30, scale * 1e30);
    let (v_lo, v_hi) = (mean(&candidate(lo)), mean(&candidate(hi)));
    if v_lo < volume_target - 1e-9 || v_hi > volume_target + 1e-9 {
        return Err(Error::Bisection {
            lower: lo,
            upper: hi,
            volume: if v_lo < volume_target { v_lo } else { v_hi },
        });
    }
    let mut best = candidate(hi);
    for _ in 0..500 {
        let mid = (lo * hi).sqrt();
        let trial = candidate(mid);
        let vol = mean(&trial);
        if vol > volume_target {
            lo = mid;
        } else {
            hi = mid;
        }
        best = trial;
        if (vol - volume_target).abs() <= 1e-9 || hi / lo - 1.0 <= 1e-14 {
            break;
        }
    }
    let vol = mean(&best);
    if (vol - volume_target).abs() > 1e-6 {
        return Err(Error::Bisection {
            lower: lo,
            upper: hi,
            volume: vol,
        });
    }
    DensityField::new(*x.grid(), best)
}
