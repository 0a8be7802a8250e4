//! Run artifacts: density image, iteration history, manifest and surrogate.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{EffectiveConfig, OutputBundle};
use crate::error::{Error, Result};
use crate::grid_fem::StructuredGrid;
use crate::orchestrator::{IterationRecord, LearningStepReport, Mode, RunManifest, RunOutput};
use crate::simp::DensityField;

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Gray level of each element, solid dark, in image row order.
pub fn quantize_density(x: &DensityField) -> Vec<u8> {
    let grid = x.grid();
    let mut pixels = Vec::with_capacity(x.len());
    for ey in 0..grid.nely {
        for ex in 0..grid.nelx {
            let v = x.values()[grid.element(ex, ey)];
            pixels.push((255.0 * (1.0 - v)).round().clamp(0.0, 255.0) as u8);
        }
    }
    pixels
}

/// Binary 8-bit PGM, one pixel per element, top row first.
pub fn write_density_pgm(x: &DensityField, path: &Path) -> Result<()> {
    let grid = x.grid();
    let mut bytes = format!("P5\n{} {}\n255\n", grid.nelx, grid.nely).into_bytes();
    bytes.extend(quantize_density(x));
    fs::write(path, bytes).map_err(io_error(path))
}

/// Reads a file written by [`write_density_pgm`]; returns the grid and the
/// raw pixels.
pub fn read_density_pgm(path: &Path) -> Result<(StructuredGrid, Vec<u8>)> {
    let bytes = fs::read(path).map_err(io_error(path))?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // single whitespace byte separates header and raster
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format(format!("unsupported PGM header {fields:?}")));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM dimension `{s}`")))
    };
    let grid = StructuredGrid::new(parse(&fields[1])?, parse(&fields[2])?)?;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != grid.element_count() {
        return Err(Error::Format(format!(
            "expected {} pixels, found {}",
            grid.element_count(),
            raster.len()
        )));
    }
    Ok((grid, raster.to_vec()))
}

/// CSV with header `iter,mode,objective,volume,change,fem_solves,wall_ms`.
/// Missing objectives, and wall times when `timing` is off, are empty.
pub fn write_history_csv(history: &[IterationRecord], path: &Path, timing: bool) -> Result<()> {
    let mut out = String::from("iter,mode,objective,volume,change,fem_solves,wall_ms\n");
    for r in history {
        let objective = r.objective.map(|v| v.to_string()).unwrap_or_default();
        let wall = if timing {
            format!("{:.3}", r.wall_ms)
        } else {
            String::new()
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.index,
            r.mode.as_str(),
            objective,
            r.volume,
            r.design_change,
            r.cumulative_fem_solves,
            wall
        );
    }
    fs::write(path, out).map_err(io_error(path))
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
struct RunSection {
    mode: Mode,
    iterations: usize,
    workers: usize,
    fem_solves: usize,
    audit_fem_solves: usize,
    learning_step_count: usize,
    online_step_count: usize,
    warmup_steps: usize,
    samples_evaluated: usize,
    fallback_count: usize,
    critical_path_fem_solves: usize,
    accounting_identity: String,
    accounting_holds: bool,
    initial_objective: f64,
    final_objective: f64,
    final_volume: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
struct Artifacts {
    density: String,
    history: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    surrogate: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
struct LearningStepRow {
    iteration: usize,
    samples: usize,
    failed_samples: usize,
    retrained: bool,
    accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    holdout_cosine: Option<f64>,
    epochs: usize,
}

impl From<&LearningStepReport> for LearningStepRow {
    fn from(r: &LearningStepReport) -> Self {
        Self {
            iteration: r.iteration,
            samples: r.samples,
            failed_samples: r.failed_samples,
            retrained: r.retrained,
            accepted: r.accepted,
            holdout_cosine: r.holdout_cosine,
            epochs: r.epochs,
        }
    }
}

/// Manifest contents: the effective configuration under `[config]`, the
/// FEM accounting under `[run]` and one `[[learning-step]]` per learning
/// step that drew samples.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ManifestDocument {
    config: EffectiveConfig,
    run: RunSection,
    artifacts: Artifacts,
    learning_step: Vec<LearningStepRow>,
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

impl ManifestDocument {
    pub fn new(
        config: &EffectiveConfig,
        manifest: &RunManifest,
        outputs: &OutputBundle,
        surrogate_written: bool,
    ) -> Self {
        let identity = match manifest.mode {
            Mode::Seq => format!("fem-solves = iterations = {}", manifest.iterations),
            Mode::Sdl => format!(
                "fem-solves = samples-evaluated + learning-step-count + 1 = {} + {} + 1 = {}",
                manifest.samples_evaluated,
                manifest.learning_step_count,
                manifest.expected_fem_solves()
            ),
        };
        Self {
            config: config.clone(),
            run: RunSection {
                mode: manifest.mode,
                iterations: manifest.iterations,
                workers: manifest.workers,
                fem_solves: manifest.fem_solves,
                audit_fem_solves: manifest.audit_fem_solves,
                learning_step_count: manifest.learning_step_count,
                online_step_count: manifest.online_step_count,
                warmup_steps: manifest.warmup_steps,
                samples_evaluated: manifest.samples_evaluated,
                fallback_count: manifest.fallback_count,
                critical_path_fem_solves: manifest.critical_path_fem_solves,
                accounting_identity: identity,
                accounting_holds: manifest.accounting_holds(),
                initial_objective: manifest.initial_objective,
                final_objective: manifest.final_objective,
                final_volume: manifest.final_volume,
                wall_ms: config.timing.then_some(manifest.wall_ms),
            },
            artifacts: Artifacts {
                density: file_name(&outputs.density),
                history: file_name(&outputs.history),
                surrogate: outputs
                    .surrogate
                    .as_deref()
                    .filter(|_| surrogate_written)
                    .map(file_name),
            },
            learning_step: manifest.learning_steps.iter().map(Into::into).collect(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn write_manifest(document: &ManifestDocument, path: &Path) -> Result<()> {
    fs::write(path, document.to_toml()?).map_err(io_error(path))
}

/// Writes every artifact of a finished run.
pub fn write_outputs(config: &EffectiveConfig, outputs: &OutputBundle, run: &RunOutput) -> Result<()> {
    write_density_pgm(&run.design, &outputs.density)?;
    write_history_csv(&run.history, &outputs.history, config.timing)?;
    let mut surrogate_written = false;
    if let (Some(path), Some(net)) = (&outputs.surrogate, &run.surrogate) {
        net.save(path)?;
        surrogate_written = true;
    }
    let document = ManifestDocument::new(config, &run.manifest, outputs, surrogate_written);
    write_manifest(&document, &outputs.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli_io::{parse_config, PresetName};
    use crate::orchestrator::{run_sdl_to, run_seq_to, StepKind};

    fn grid() -> StructuredGrid {
        StructuredGrid::new(3, 2).unwrap()
    }

    #[test]
    fn solid_is_black_void_is_white() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm");
        write_density_pgm(&DensityField::uniform(grid(), 1.0).unwrap(), &path).unwrap();
        assert!(read_density_pgm(&path).unwrap().1.iter().all(|&p| p == 0));
        write_density_pgm(&DensityField::uniform(grid(), 0.0).unwrap(), &path).unwrap();
        assert!(read_density_pgm(&path).unwrap().1.iter().all(|&p| p == 255));
    }

    #[test]
    fn pgm_round_trip_and_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm");
        let g = grid();
        let mut values = vec![0.0; 6];
        values[g.element(2, 0)] = 1.0;
        values[g.element(0, 1)] = 0.5;
        let x = DensityField::new(g, values).unwrap();
        write_density_pgm(&x, &path).unwrap();
        let (read_grid, pixels) = read_density_pgm(&path).unwrap();
        assert_eq!(read_grid, g);
        assert_eq!(pixels, quantize_density(&x));
        assert_eq!(pixels, vec![255, 255, 0, 128, 255, 255]);
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    }

    #[test]
    fn io_errors_carry_the_path() {
        let path = Path::new("/nonexistent-dir/d.pgm");
        match write_density_pgm(&DensityField::uniform(grid(), 0.5).unwrap(), path) {
            Err(Error::Io { path: p, .. }) => assert_eq!(p, path),
            other => panic!("{other:?}"),
        }
    }

    fn small_run(mode: &str, iters: &str, dir: &Path) -> (super::super::ParsedConfig, RunOutput) {
        let parsed = parse_config([
            "sdlto", "--preset", "cantilever", "--nelx", "12", "--nely", "6", "--mode", mode, "--iters", iters,
            "--samples", "6", "--window", "2", "--hidden", "8", "--epochs", "40", "--workers", "2",
            "--out-dir", dir.to_str().unwrap(),
        ])
        .unwrap();
        assert_eq!(parsed.effective.preset, PresetName::Cantilever);
        let out = match parsed.run.mode {
            Mode::Seq => run_seq_to(&parsed.problem, &parsed.run),
            Mode::Sdl => run_sdl_to(&parsed.problem, &parsed.run),
        }
        .unwrap();
        (parsed, out)
    }

    #[test]
    fn one_iteration_history_has_two_lines() {
        let dir = tempfile::tempdir().unwrap();
        let (parsed, out) = small_run("seq", "1", dir.path());
        parsed.outputs.prepare().unwrap();
        write_outputs(&parsed.effective, &parsed.outputs, &out).unwrap();
        let csv = fs::read_to_string(&parsed.outputs.history).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "iter,mode,objective,volume,change,fem_solves,wall_ms");
        assert!(lines[1].starts_with("0,simulated,"));
        assert!(lines[1].ends_with(",1,"));
    }

    #[test]
    fn manifest_matches_history() {
        let dir = tempfile::tempdir().unwrap();
        let (parsed, out) = small_run("sdl", "10", dir.path());
        parsed.outputs.prepare().unwrap();
        write_outputs(&parsed.effective, &parsed.outputs, &out).unwrap();
        let text = fs::read_to_string(&parsed.outputs.manifest).unwrap();
        let doc: toml::Table = text.parse().unwrap();
        let run = doc["run"].as_table().unwrap();
        let fem = run["fem-solves"].as_integer().unwrap() as usize;
        let learning = run["learning-step-count"].as_integer().unwrap() as usize;
        let online = run["online-step-count"].as_integer().unwrap() as usize;
        assert!(run["accounting-holds"].as_bool().unwrap());
        assert_eq!(learning + online, out.history.len());

        // the last history row precedes the certification solve
        let csv = fs::read_to_string(&parsed.outputs.history).unwrap();
        let last = csv.lines().last().unwrap();
        let cumulative: usize = last.split(',').nth(5).unwrap().parse().unwrap();
        assert_eq!(cumulative + 1, fem);
        assert_eq!(out.history.last().unwrap().cumulative_fem_solves + 1, out.manifest.fem_solves);

        let learned = out.history.iter().filter(|r| r.mode == StepKind::Learned).count();
        let empty = csv.lines().skip(1).filter(|l| l.split(',').nth(2) == Some("")).count();
        assert_eq!(learned, empty);
        assert!(parsed.outputs.surrogate.as_ref().unwrap().exists());
    }
}
