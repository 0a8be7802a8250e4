//! Benchmark problems at desk-scale resolution.
//!
//! * `bridge`: unit downward load on every top-edge node, both bottom corners
//!   pinned in x and y.
//! * `cantilever`: left edge clamped, unit downward load at the bottom-right
//!   corner.
//! * `heat`: unit heat source spread over all elements, zero-temperature sink
//!   on a centred fraction of one edge.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_fem::{BoundarySpec, Physics, SolverSettings, StructuredGrid};
use crate::simp::{FilterSpec, MaterialModel, ProblemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetName {
    Bridge,
    Cantilever,
    Heat,
}

impl PresetName {
    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::Bridge => "bridge",
            PresetName::Cantilever => "cantilever",
            PresetName::Heat => "heat",
        }
    }

    pub fn default_resolution(self) -> (usize, usize) {
        match self {
            PresetName::Bridge => (120, 40),
            PresetName::Cantilever => (60, 20),
            PresetName::Heat => (64, 64),
        }
    }

    pub fn default_volume_fraction(self) -> f64 {
        match self {
            PresetName::Bridge => 0.2,
            PresetName::Cantilever => 0.5,
            PresetName::Heat => 0.4,
        }
    }

    pub fn default_iterations(self) -> usize {
        match self {
            PresetName::Bridge | PresetName::Cantilever => 100,
            PresetName::Heat => 200,
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bridge" => Ok(PresetName::Bridge),
            "cantilever" => Ok(PresetName::Cantilever),
            "heat" => Ok(PresetName::Heat),
            other => Err(Error::Config {
                key: "preset".into(),
                reason: format!("unknown preset `{other}` (expected bridge, cantilever or heat)"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    Left,
    Right,
    Top,
    Bottom,
}

impl Edge {
    pub fn as_str(self) -> &'static str {
        match self {
            Edge::Left => "left",
            Edge::Right => "right",
            Edge::Top => "top",
            Edge::Bottom => "bottom",
        }
    }
}

impl FromStr for Edge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Edge::Left),
            "right" => Ok(Edge::Right),
            "top" => Ok(Edge::Top),
            "bottom" => Ok(Edge::Bottom),
            other => Err(Error::Config {
                key: "sink-edge".into(),
                reason: format!("unknown edge `{other}`"),
            }),
        }
    }
}

/// Heat-sink placement for the `heat` preset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkSpec {
    pub fraction: f64,
    pub edge: Edge,
}

impl Default for SinkSpec {
    fn default() -> Self {
        Self {
            fraction: 0.1,
            edge: Edge::Left,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetOptions {
    pub sink: SinkSpec,
    pub rmin: f64,
    pub poisson_ratio: f64,
    pub solver: SolverSettings,
}

impl Default for PresetOptions {
    fn default() -> Self {
        Self {
            sink: SinkSpec::default(),
            rmin: FilterSpec::default().rmin,
            poisson_ratio: 0.3,
            solver: SolverSettings::default(),
        }
    }
}

pub fn build_preset(name: PresetName, nelx: usize, nely: usize, volume_fraction: f64) -> Result<ProblemSpec> {
    build_preset_with(name, nelx, nely, volume_fraction, &PresetOptions::default())
}

pub fn build_preset_with(
    name: PresetName,
    nelx: usize,
    nely: usize,
    volume_fraction: f64,
    options: &PresetOptions,
) -> Result<ProblemSpec> {
    let grid = StructuredGrid::new(nelx, nely)?;
    let (physics, boundary) = match name {
        PresetName::Bridge => (Physics::Elastic, bridge_boundary(&grid)?),
        PresetName::Cantilever => (Physics::Elastic, cantilever_boundary(&grid)?),
        PresetName::Heat => (Physics::Heat, heat_boundary(&grid, options.sink)?),
    };
    Ok(ProblemSpec {
        physics,
        grid,
        material: MaterialModel {
            e0: 1.0,
            emin: 1e-3,
            penal: 3.0,
        },
        poisson_ratio: options.poisson_ratio,
        boundary,
        volume_fraction,
        filter: FilterSpec { rmin: options.rmin },
        solver: options.solver,
    })
}

fn bridge_boundary(grid: &StructuredGrid) -> Result<BoundarySpec> {
    let mut load = vec![0.0; 2 * grid.node_count()];
    for ix in 0..=grid.nelx {
        load[2 * grid.node(ix, 0) + 1] = -1.0;
    }
    let left = grid.node(0, grid.nely);
    let right = grid.node(grid.nelx, grid.nely);
    BoundarySpec::new(vec![2 * left, 2 * left + 1, 2 * right, 2 * right + 1], load)
}

fn cantilever_boundary(grid: &StructuredGrid) -> Result<BoundarySpec> {
    let mut load = vec![0.0; 2 * grid.node_count()];
    load[2 * grid.node(grid.nelx, grid.nely) + 1] = -1.0;
    let fixed = (0..=grid.nely)
        .flat_map(|iy| {
            let n = grid.node(0, iy);
            [2 * n, 2 * n + 1]
        })
        .collect();
    BoundarySpec::new(fixed, load)
}

/// Number of sink nodes on an edge with `edge_nodes` nodes.
pub fn sink_node_count(edge_nodes: usize, fraction: f64) -> usize {
    ((fraction * edge_nodes as f64).ceil() as usize).clamp(1, edge_nodes)
}

fn heat_boundary(grid: &StructuredGrid, sink: SinkSpec) -> Result<BoundarySpec> {
    if !(sink.fraction > 0.0 && sink.fraction <= 1.0) {
        return Err(Error::Config {
            key: "sink-frac".into(),
            reason: format!("must lie in (0, 1], got {}", sink.fraction),
        });
    }
    let mut load = vec![0.0; grid.node_count()];
    for e in 0..grid.element_count() {
        for n in grid.element_nodes(e) {
            load[n] += 0.25;
        }
    }
    let edge_nodes = match sink.edge {
        Edge::Left | Edge::Right => grid.nely + 1,
        Edge::Top | Edge::Bottom => grid.nelx + 1,
    };
    let count = sink_node_count(edge_nodes, sink.fraction);
    let start = (edge_nodes - count) / 2;
    let fixed = (start..start + count)
        .map(|k| match sink.edge {
            Edge::Left => grid.node(0, k),
            Edge::Right => grid.node(grid.nelx, k),
            Edge::Top => grid.node(k, 0),
            Edge::Bottom => grid.node(k, grid.nely),
        })
        .collect();
    BoundarySpec::new(fixed, load)
}
