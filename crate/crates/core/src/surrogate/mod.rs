//! Local surrogate of the design-to-gradient map.
//!
//! Recent iterates define a componentwise envelope; designs drawn from a
//! Gaussian centred on the envelope midpoint are simulated and used to fit a
//! [`GradientNet`]. A cosine-distance trigger decides when the current design
//! has drifted far enough from the last fitted region to require a new fit.

mod net;

pub use net::{
    mean_cosine_similarity, train, Activation, GradientNet, SamplePair, TrainConfig, TrainReport,
};

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grid_fem::StructuredGrid;
use crate::simp::DensityField;

/// The most recent `window + 1` designs, oldest first.
#[derive(Debug, Clone)]
pub struct LookbackBuffer {
    window: usize,
    designs: VecDeque<DensityField>,
}

impl LookbackBuffer {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            designs: VecDeque::with_capacity(window + 1),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn push(&mut self, design: DensityField) {
        if self.designs.len() == self.window + 1 {
            self.designs.pop_front();
        }
        self.designs.push_back(design);
    }

    pub fn len(&self) -> usize {
        self.designs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.designs.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.designs.len() == self.window + 1
    }

    pub fn designs(&self) -> impl Iterator<Item = &DensityField> {
        self.designs.iter()
    }
}

/// Componentwise bounds of the designs in a lookback window.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub grid: StructuredGrid,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Envelope {
    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| lo + (hi - lo) / 2.0)
            .collect()
    }
}

pub fn envelope(buffer: &LookbackBuffer) -> Result<Envelope> {
    let mut designs = buffer.designs();
    let first = designs.next().ok_or(Error::EmptyBuffer)?;
    let mut lower = first.values().to_vec();
    let mut upper = lower.clone();
    for d in designs {
        for ((lo, hi), &v) in lower.iter_mut().zip(upper.iter_mut()).zip(d.values()) {
            *lo = lo.min(v);
            *hi = hi.max(v);
        }
    }
    Ok(Envelope {
        grid: *first.grid(),
        lower,
        upper,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Standard deviation applied to every component, in density units.
    pub sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Use the undisturbed envelope midpoint as the first sample.
    pub include_midpoint: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            n_samples: 64,
            seed: 0,
            include_midpoint: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(
                "sigma",
                format!("must be positive, got {}", self.sigma),
            ));
        }
        if self.n_samples < 2 {
            return Err(Error::invalid(
                "n_samples",
                format!("need at least 2 samples, got {}", self.n_samples),
            ));
        }
        Ok(())
    }
}

/// Draws designs componentwise from `N(midpoint, sigma)`, clipped to `[0, 1]`.
pub fn draw_samples(env: &Envelope, cfg: &SamplerConfig) -> Result<Vec<DensityField>> {
    cfg.validate()?;
    let mid = env.midpoint();
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::invalid("sigma", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.n_samples);
    if cfg.include_midpoint {
        samples.push(DensityField::new(env.grid, mid.clone())?);
    }
    while samples.len() < cfg.n_samples {
        let values = mid
            .iter()
            .map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0))
            .collect();
        samples.push(DensityField::new(env.grid, values)?);
    }
    Ok(samples)
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("cosine distance operand", a.len(), b.len())?;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((1.0 - ab / (aa.sqrt() * bb.sqrt())).clamp(0.0, 2.0))
}

/// Relearn threshold on the cosine distance to the last learning-step design.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerConfig {
    pub lambda_star: f64,
    pub reference: Option<DensityField>,
}

impl TriggerConfig {
    /// `lambda_star = 0` is accepted and means "relearn on any change".
    pub fn new(lambda_star: f64) -> Result<Self> {
        if !(0.0..=2.0).contains(&lambda_star) {
            return Err(Error::invalid(
                "lambda_star",
                format!("must lie in [0, 2], got {lambda_star}"),
            ));
        }
        Ok(Self {
            lambda_star,
            reference: None,
        })
    }

    pub fn set_reference(&mut self, design: DensityField) {
        self.reference = Some(design);
    }
}

/// True when `current` is farther than `lambda_star` from the reference
/// design, or when no reference exists yet.
pub fn should_relearn(current: &DensityField, cfg: &TriggerConfig) -> bool {
    let Some(reference) = &cfg.reference else {
        return true;
    };
    match cosine_distance(current.values(), reference.values()) {
        Ok(d) => d > cfg.lambda_star,
        Err(_) => true,
    }
}
