//! Command line, configuration files and run artifacts.
//!
//! Settings resolve in three layers: built-in defaults (partly per preset),
//! then a TOML config file, then command-line flags. The config file uses
//! the flag names as keys. A manifest written by a previous run is also a
//! valid config file: only its `[config]` table is read.

pub mod output;
pub mod presets;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_fem::SolverSettings;
use crate::orchestrator::{Mode, OnlineUpdate, RunConfig, SurrogateSettings};
use crate::simp::ProblemSpec;
use crate::surrogate::{SamplerConfig, TrainConfig};

pub use output::{
    read_density_pgm, quantize_density, write_density_pgm, write_history_csv, write_manifest,
    write_outputs, ManifestDocument,
};
pub use presets::{build_preset, build_preset_with, Edge, PresetName, PresetOptions, SinkSpec};

/// Topology optimization with an optional learned-gradient acceleration loop.
#[derive(Debug, Clone, Default, Parser)]
#[command(name = "sdlto", version, arg_required_else_help = true)]
pub struct Cli {
    /// Benchmark problem: bridge, cantilever or heat.
    #[arg(long)]
    pub preset: Option<String>,
    /// Optimizer loop: seq or sdl.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub nelx: Option<usize>,
    #[arg(long)]
    pub nely: Option<usize>,
    /// Target volume fraction in (0, 1).
    #[arg(long)]
    pub volfrac: Option<f64>,
    /// Number of update steps.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Standard deviation of the local samples.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Samples simulated per learning step.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Lookback window.
    #[arg(long)]
    pub window: Option<usize>,
    /// Cosine-distance relearn threshold in (0, 2).
    #[arg(long = "lambda-star")]
    pub lambda_star: Option<f64>,
    /// Threads used for sample simulation.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "out-dir")]
    pub out_dir: Option<PathBuf>,
    /// Evaluate the objective on every k-th online step (diagnostic only).
    #[arg(long = "audit-every")]
    pub audit_every: Option<usize>,
    /// Share of the sink edge held at zero temperature (heat preset).
    #[arg(long = "sink-frac")]
    pub sink_frac: Option<f64>,
    /// Edge carrying the heat sink: left, right, top or bottom.
    #[arg(long = "sink-edge")]
    pub sink_edge: Option<String>,
    /// Density filter radius in elements.
    #[arg(long)]
    pub rmin: Option<f64>,
    /// Move limit per update step.
    #[arg(long = "move-limit")]
    pub move_limit: Option<f64>,
    /// Online update rule: mma or projected-descent.
    #[arg(long = "online-update")]
    pub online_update: Option<String>,
    /// Hidden layer widths of the surrogate, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Training epochs per learning step.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Record wall-clock times in the history and manifest.
    #[arg(long)]
    pub timing: bool,
    /// TOML file with the same keys as the flags, or a previous manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Config-file layer. Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    preset: Option<String>,
    mode: Option<String>,
    nelx: Option<usize>,
    nely: Option<usize>,
    volfrac: Option<f64>,
    iters: Option<usize>,
    sigma: Option<f64>,
    samples: Option<usize>,
    window: Option<usize>,
    lambda_star: Option<f64>,
    workers: Option<usize>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    audit_every: Option<usize>,
    sink_frac: Option<f64>,
    sink_edge: Option<String>,
    rmin: Option<f64>,
    move_limit: Option<f64>,
    online_update: Option<String>,
    hidden: Option<Vec<usize>>,
    epochs: Option<usize>,
    timing: Option<bool>,
}

/// Fully resolved settings, echoed into every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EffectiveConfig {
    pub preset: PresetName,
    pub mode: Mode,
    pub nelx: usize,
    pub nely: usize,
    pub volfrac: f64,
    pub iters: usize,
    pub sigma: f64,
    pub samples: usize,
    pub window: usize,
    pub lambda_star: f64,
    pub workers: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit_every: Option<usize>,
    pub sink_frac: f64,
    pub sink_edge: Edge,
    pub rmin: f64,
    pub move_limit: f64,
    pub online_update: OnlineUpdate,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub timing: bool,
}

impl EffectiveConfig {
    pub fn defaults(preset: PresetName) -> Self {
        let (nelx, nely) = preset.default_resolution();
        let run = RunConfig::default();
        let sink = SinkSpec::default();
        Self {
            preset,
            mode: Mode::Sdl,
            nelx,
            nely,
            volfrac: preset.default_volume_fraction(),
            iters: preset.default_iterations(),
            sigma: run.sampler.sigma,
            samples: run.sampler.n_samples,
            window: run.window,
            lambda_star: run.lambda_star,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            seed: run.seed,
            out_dir: PathBuf::from("out"),
            audit_every: None,
            sink_frac: sink.fraction,
            sink_edge: sink.edge,
            rmin: PresetOptions::default().rmin,
            move_limit: run.move_limit,
            online_update: run.surrogate.online_update,
            hidden: run.surrogate.hidden,
            epochs: run.surrogate.training.epochs,
            timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(key: &str, reason: String) -> Error {
            Error::Config {
                key: key.into(),
                reason,
            }
        }
        if self.nelx == 0 || self.nely == 0 {
            let key = if self.nelx == 0 { "nelx" } else { "nely" };
            return Err(bad(key, "must be at least 1".into()));
        }
        if !(self.volfrac > 0.0 && self.volfrac < 1.0) {
            return Err(bad("volfrac", format!("must lie in (0, 1), got {}", self.volfrac)));
        }
        if self.iters == 0 {
            return Err(bad("iters", "must be at least 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(bad("sigma", format!("must be positive, got {}", self.sigma)));
        }
        if self.samples < 2 {
            return Err(bad("samples", format!("must be at least 2, got {}", self.samples)));
        }
        if self.window == 0 {
            return Err(bad("window", "must be at least 1".into()));
        }
        if !(self.lambda_star > 0.0 && self.lambda_star < 2.0) {
            return Err(bad(
                "lambda-star",
                format!("must lie in (0, 2), got {}", self.lambda_star),
            ));
        }
        if self.workers == 0 {
            return Err(bad("workers", "must be at least 1".into()));
        }
        if self.audit_every == Some(0) {
            return Err(bad("audit-every", "must be at least 1".into()));
        }
        if !(self.sink_frac > 0.0 && self.sink_frac <= 1.0) {
            return Err(bad("sink-frac", format!("must lie in (0, 1], got {}", self.sink_frac)));
        }
        if !(self.rmin > 0.0 && self.rmin.is_finite()) {
            return Err(bad("rmin", format!("must be positive, got {}", self.rmin)));
        }
        if !(self.move_limit > 0.0 && self.move_limit <= 1.0) {
            return Err(bad(
                "move-limit",
                format!("must lie in (0, 1], got {}", self.move_limit),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(bad("hidden", "layer widths must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "must be at least 1".into()));
        }
        Ok(())
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        let options = PresetOptions {
            sink: SinkSpec {
                fraction: self.sink_frac,
                edge: self.sink_edge,
            },
            rmin: self.rmin,
            poisson_ratio: 0.3,
            solver: SolverSettings::default(),
        };
        build_preset_with(self.preset, self.nelx, self.nely, self.volfrac, &options)
    }

    pub fn run_config(&self) -> RunConfig {
        let defaults = RunConfig::default();
        RunConfig {
            max_iterations: self.iters,
            mode: self.mode,
            sampler: SamplerConfig {
                sigma: self.sigma,
                n_samples: self.samples,
                ..SamplerConfig::default()
            },
            lambda_star: self.lambda_star,
            window: self.window,
            move_limit: self.move_limit,
            workers: self.workers,
            seed: self.seed,
            audit_every: self.audit_every,
            surrogate: SurrogateSettings {
                hidden: self.hidden.clone(),
                training: TrainConfig {
                    epochs: self.epochs,
                    ..TrainConfig::default()
                },
                online_update: self.online_update,
                ..defaults.surrogate.clone()
            },
            ..defaults
        }
    }

    pub fn outputs(&self) -> OutputBundle {
        OutputBundle::in_dir(&self.out_dir, self.mode == Mode::Sdl)
    }
}

/// Artifact paths of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputBundle {
    pub dir: PathBuf,
    pub density: PathBuf,
    pub history: PathBuf,
    pub manifest: PathBuf,
    pub surrogate: Option<PathBuf>,
}

impl OutputBundle {
    pub fn in_dir(dir: &Path, with_surrogate: bool) -> Self {
        Self {
            dir: dir.to_path_buf(),
            density: dir.join("density.pgm"),
            history: dir.join("history.csv"),
            manifest: dir.join("manifest.toml"),
            surrogate: with_surrogate.then(|| dir.join("surrogate.bin")),
        }
    }

    /// Creates the directory and checks that every artifact can be written.
    pub fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|source| Error::Io {
            path: self.dir.clone(),
            source,
        })?;
        let paths = [&self.density, &self.history, &self.manifest]
            .into_iter()
            .chain(self.surrogate.as_ref());
        for path in paths {
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| Error::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        Ok(())
    }
}

/// Everything a run needs, resolved from flags, file and defaults.
#[derive(Debug, Clone)]
pub struct ParsedConfig {
    pub effective: EffectiveConfig,
    pub problem: ProblemSpec,
    pub run: RunConfig,
    pub outputs: OutputBundle,
}

/// Parses `args` (program name first) and resolves the configuration.
pub fn parse_config<I, T>(args: I) -> Result<ParsedConfig>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config {
        key: "arguments".into(),
        reason: e.to_string(),
    })?;
    resolve(&cli)
}

fn parse_key<T: std::str::FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e| match e {
        Error::Config { reason, .. } => Error::Config {
            key: key.into(),
            reason,
        },
        other => other,
    })
}

fn parse_mode(value: &str) -> Result<Mode> {
    match value {
        "seq" => Ok(Mode::Seq),
        "sdl" => Ok(Mode::Sdl),
        other => Err(Error::Config {
            key: "mode".into(),
            reason: format!("unknown mode `{other}` (expected seq or sdl)"),
        }),
    }
}

fn parse_online_update(value: &str) -> Result<OnlineUpdate> {
    match value {
        "mma" => Ok(OnlineUpdate::Mma),
        "projected-descent" => Ok(OnlineUpdate::ProjectedDescent),
        other => Err(Error::Config {
            key: "online-update".into(),
            reason: format!("unknown update `{other}` (expected mma or projected-descent)"),
        }),
    }
}

fn read_config_file(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
        key: path.display().to_string(),
        reason: e.message().to_string(),
    })?;
    if let Some(toml::Value::Table(inner)) = table.remove("config") {
        table = inner;
    }
    if let Some(key) = table
        .keys()
        .find(|k| !FileConfig::KEYS.contains(&k.as_str()))
    {
        return Err(Error::Config {
            key: key.clone(),
            reason: format!("unknown key in {}", path.display()),
        });
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config {
            key: path.display().to_string(),
            reason: e.message().to_string(),
        })
}

impl FileConfig {
    const KEYS: [&'static str; 22] = [
        "preset",
        "mode",
        "nelx",
        "nely",
        "volfrac",
        "iters",
        "sigma",
        "samples",
        "window",
        "lambda-star",
        "workers",
        "seed",
        "out-dir",
        "audit-every",
        "sink-frac",
        "sink-edge",
        "rmin",
        "move-limit",
        "online-update",
        "hidden",
        "epochs",
        "timing",
    ];
}

/// Applies defaults, then the config file named by `cli.config`, then flags.
pub fn resolve(cli: &Cli) -> Result<ParsedConfig> {
    let file = match &cli.config {
        Some(path) => read_config_file(path)?,
        None => FileConfig::default(),
    };
    let preset_name = cli.preset.as_deref().or(file.preset.as_deref()).ok_or_else(|| {
        Error::Config {
            key: "preset".into(),
            reason: "required (bridge, cantilever or heat)".into(),
        }
    })?;
    let preset: PresetName = parse_key("preset", preset_name)?;
    let mut cfg = EffectiveConfig::defaults(preset);

    macro_rules! layer {
        ($($field:ident),*) => {
            $(
                if let Some(v) = file.$field.clone() {
                    cfg.$field = v;
                }
                if let Some(v) = cli.$field.clone() {
                    cfg.$field = v;
                }
            )*
        };
    }
    layer!(nelx, nely, volfrac, iters, sigma, samples, window, lambda_star, workers, seed, out_dir, sink_frac, rmin, move_limit, hidden, epochs);

    if let Some(v) = cli.audit_every.or(file.audit_every) {
        cfg.audit_every = Some(v);
    }
    if let Some(v) = cli.mode.as_deref().or(file.mode.as_deref()) {
        cfg.mode = parse_mode(v)?;
    }
    if let Some(v) = cli.sink_edge.as_deref().or(file.sink_edge.as_deref()) {
        cfg.sink_edge = parse_key("sink-edge", v)?;
    }
    if let Some(v) = cli.online_update.as_deref().or(file.online_update.as_deref()) {
        cfg.online_update = parse_online_update(v)?;
    }
    cfg.timing = cli.timing || file.timing.unwrap_or(false);

    cfg.validate()?;
    let problem = cfg.problem()?;
    let run = cfg.run_config();
    run.validate()?;
    let outputs = cfg.outputs();
    Ok(ParsedConfig {
        effective: cfg,
        problem,
        run,
        outputs,
    })
}
