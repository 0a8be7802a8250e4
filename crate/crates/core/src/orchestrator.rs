//! Optimization drivers.
//!
//! [`run_seq_to`] evaluates the FEM model at every iteration. [`run_sdl_to`]
//! alternates learning steps, which simulate a batch of designs sampled
//! around the recent history and fit a [`GradientNet`], with online steps
//! that update the design from predicted gradients without any FEM solve.
//!
//! Every iteration of either loop is a learning step or an online step. The
//! first `window + 1` iterations of an accelerated run fill the lookback
//! buffer; they are simulated and counted as learning steps that drew no
//! samples. A learning step whose surrogate fails the fidelity gate twice is
//! kept as a plain simulated step and the next iteration learns again.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mma::{mma_update, ConstraintSpec, MmaSettings, MmaState};
use crate::simp::{evaluate, volume_fraction, DensityField, Evaluation, Problem, ProblemSpec};
use crate::surrogate::{
    draw_samples, envelope, mean_cosine_similarity, should_relearn, train, Activation, GradientNet,
    LookbackBuffer, SamplePair, SamplerConfig, TrainConfig, TriggerConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Seq,
    Sdl,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Seq => "seq",
            Mode::Sdl => "sdl",
        }
    }
}

/// Design update used on online steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OnlineUpdate {
    Mma,
    ProjectedDescent,
}

impl OnlineUpdate {
    pub fn as_str(self) -> &'static str {
        match self {
            OnlineUpdate::Mma => "mma",
            OnlineUpdate::ProjectedDescent => "projected-descent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSettings {
    pub hidden: Vec<usize>,
    pub training: TrainConfig,
    /// Share of each step's samples held out for the fidelity gate.
    pub holdout_fraction: f64,
    /// Minimum mean cosine similarity on the held-out samples.
    pub fidelity_threshold: f64,
    /// Consecutive online steps after which a relearn is forced.
    pub max_online_steps: usize,
    pub online_update: OnlineUpdate,
}

impl Default for SurrogateSettings {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            training: TrainConfig::default(),
            holdout_fraction: 0.2,
            fidelity_threshold: 0.9,
            max_online_steps: 25,
            online_update: OnlineUpdate::Mma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub max_iterations: usize,
    pub mode: Mode,
    pub sampler: SamplerConfig,
    pub lambda_star: f64,
    pub window: usize,
    pub move_limit: f64,
    pub mma: MmaSettings,
    pub workers: usize,
    pub seed: u64,
    /// Evaluate the objective on every k-th online step. Audit solves are
    /// reported separately and never enter the FEM accounting.
    pub audit_every: Option<usize>,
    pub surrogate: SurrogateSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            mode: Mode::Sdl,
            sampler: SamplerConfig::default(),
            lambda_star: 0.05,
            window: 5,
            move_limit: 0.2,
            mma: MmaSettings::default(),
            workers: 1,
            seed: 0,
            audit_every: None,
            surrogate: SurrogateSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers", "must be at least 1"));
        }
        if self.window == 0 {
            return Err(Error::invalid("window", "must be at least 1"));
        }
        if self.audit_every == Some(0) {
            return Err(Error::invalid("audit_every", "must be at least 1"));
        }
        self.sampler.validate()?;
        TriggerConfig::new(self.lambda_star)?;
        ConstraintSpec::new(0.5, self.move_limit)?;
        let s = &self.surrogate;
        if !(0.0..1.0).contains(&s.holdout_fraction) {
            return Err(Error::invalid(
                "holdout_fraction",
                format!("must lie in [0, 1), got {}", s.holdout_fraction),
            ));
        }
        if !(-1.0..=1.0).contains(&s.fidelity_threshold) {
            return Err(Error::invalid(
                "fidelity_threshold",
                format!("must lie in [-1, 1], got {}", s.fidelity_threshold),
            ));
        }
        if s.max_online_steps == 0 {
            return Err(Error::invalid("max_online_steps", "must be at least 1"));
        }
        if s.hidden.contains(&0) {
            return Err(Error::invalid("hidden", "layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Simulated,
    Learned,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Simulated => "simulated",
            StepKind::Learned => "learned",
        }
    }
}

/// One update step. `objective` belongs to the design the step started
/// from; `volume` and `design_change` describe the design it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    pub mode: StepKind,
    pub objective: Option<f64>,
    pub volume: f64,
    pub design_change: f64,
    pub cumulative_fem_solves: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningStepReport {
    pub iteration: usize,
    pub samples: usize,
    pub failed_samples: usize,
    pub retrained: bool,
    pub accepted: bool,
    /// Mean held-out cosine similarity of the final fit.
    pub holdout_cosine: Option<f64>,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: Mode,
    pub iterations: usize,
    pub workers: usize,
    pub fem_solves: usize,
    pub audit_fem_solves: usize,
    pub learning_step_count: usize,
    pub online_step_count: usize,
    pub warmup_steps: usize,
    pub samples_evaluated: usize,
    pub fallback_count: usize,
    pub critical_path_fem_solves: usize,
    pub initial_objective: f64,
    /// Certified by a final solve in accelerated runs; the objective of the
    /// last evaluated design otherwise.
    pub final_objective: f64,
    pub final_volume: f64,
    pub wall_ms: f64,
    pub learning_steps: Vec<LearningStepReport>,
}

impl RunManifest {
    /// The FEM-solve identity for the run's mode.
    pub fn expected_fem_solves(&self) -> usize {
        match self.mode {
            Mode::Seq => self.iterations,
            Mode::Sdl => self.samples_evaluated + self.learning_step_count + 1,
        }
    }

    pub fn accounting_holds(&self) -> bool {
        self.fem_solves == self.expected_fem_solves()
            && self.learning_step_count + self.online_step_count == self.iterations
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub design: DensityField,
    pub history: Vec<IterationRecord>,
    pub manifest: RunManifest,
    /// Last accepted surrogate.
    pub surrogate: Option<GradientNet>,
}

/// Evaluates `designs` on a pool of `workers` threads. Results keep the
/// input order; individual failures are returned in place as long as at
/// least half of the batch succeeds.
pub fn evaluate_batch(
    designs: &[DensityField],
    problem: &Problem,
    workers: usize,
) -> Result<Vec<Result<Evaluation>>> {
    if workers == 0 {
        return Err(Error::invalid("workers", "must be at least 1"));
    }
    if designs.is_empty() {
        return Ok(Vec::new());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid("workers", e.to_string()))?;
    let results: Vec<Result<Evaluation>> =
        pool.install(|| designs.par_iter().map(|d| evaluate(d, problem)).collect());
    let failed = results.iter().filter(|r| r.is_err()).count();
    if 2 * failed > results.len() {
        return Err(Error::BatchFailed {
            failed,
            total: results.len(),
        });
    }
    Ok(results)
}


fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

const SAMPLE_STREAM: u64 = 0;
const RETRY_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

fn stream(iteration: usize, tag: u64) -> u64 {
    ((iteration as u64) << 2) | tag
}

/// Volume constraint `mean(x) - target <= 0` and its gradient.
fn volume_constraint(x: &DensityField, target: f64) -> (f64, Vec<f64>) {
    let n = x.len();
    (volume_fraction(x) - target, vec![1.0 / n as f64; n])
}

/// Steepest descent along the normalized gradient, projected onto the move
/// box and the volume equality by bisection on a uniform shift.
pub fn projected_descent_step(
    x: &DensityField,
    gradient: &[f64],
    spec: &ConstraintSpec,
) -> Result<DensityField> {
    crate::error::check_len("gradient", x.len(), gradient.len())?;
    let gmax = gradient.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    if !gmax.is_finite() {
        return Err(Error::NonFinite("projected descent gradient"));
    }
    if gmax == 0.0 {
        return Ok(x.clone());
    }
    let m = spec.move_limit;
    let n = x.len() as f64;
    let xv = x.values();
    let lo: Vec<f64> = xv.iter().map(|v| (v - m).max(0.0)).collect();
    let hi: Vec<f64> = xv.iter().map(|v| (v + m).min(1.0)).collect();
    let trial: Vec<f64> = xv
        .iter()
        .zip(gradient)
        .map(|(v, g)| v - m * g / gmax)
        .collect();
    let project = |shift: f64| -> Vec<f64> {
        trial
            .iter()
            .zip(lo.iter().zip(&hi))
            .map(|(t, (l, h))| (t - shift).clamp(*l, *h))
            .collect()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let target = spec.volume_target;
    let (mut a, mut b) = (-2.0, 2.0);
    let (va, vb) = (mean(&project(a)), mean(&project(b)));
    if va < target || vb > target {
        return Err(Error::Bisection {
            lower: vb,
            upper: va,
            volume: target,
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mean(&project(mid)) > target {
            a = mid;
        } else {
            b = mid;
        }
        if b - a <= 1e-15 {
            break;
        }
    }
    DensityField::new(*x.grid(), project(0.5 * (a + b)))
}

struct Stepper {
    constraint: ConstraintSpec,
    state: MmaState,
}

impl Stepper {
    fn new(problem: &Problem, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            constraint: ConstraintSpec::new(problem.spec().volume_fraction, cfg.move_limit)?,
            state: MmaState::new(problem.element_count(), cfg.mma),
        })
    }

    fn mma(&mut self, x: &DensityField, gradient: &[f64]) -> Result<DensityField> {
        let (g, dgdx) = volume_constraint(x, self.constraint.volume_target);
        mma_update(x, gradient, g, &dgdx, &mut self.state, &self.constraint)
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn initial_design(problem: &Problem) -> Result<DensityField> {
    DensityField::uniform(*problem.grid(), problem.spec().volume_fraction)
}

/// Sequential baseline: one FEM evaluation and one MMA step per iteration.
pub fn run_seq_to(spec: &ProblemSpec, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let problem = Problem::new(spec.clone())?;
    let mut stepper = Stepper::new(&problem, cfg)?;
    let mut x = initial_design(&problem)?;
    let mut history = Vec::with_capacity(cfg.max_iterations);
    let mut initial_objective = f64::NAN;
    let mut last_objective = f64::NAN;
    for k in 0..cfg.max_iterations {
        let eval = evaluate(&x, &problem).map_err(|e| e.at_iteration(k))?;
        if k == 0 {
            initial_objective = eval.objective;
        }
        last_objective = eval.objective;
        let next = stepper
            .mma(&x, &eval.gradient)
            .map_err(|e| e.at_iteration(k))?;
        history.push(IterationRecord {
            index: k,
            mode: StepKind::Simulated,
            objective: Some(eval.objective),
            volume: volume_fraction(&next),
            design_change: next.max_change(&x),
            cumulative_fem_solves: k + 1,
            wall_ms: elapsed_ms(start),
        });
        x = next;
    }
    let manifest = RunManifest {
        mode: Mode::Seq,
        iterations: cfg.max_iterations,
        workers: cfg.workers,
        fem_solves: cfg.max_iterations,
        audit_fem_solves: 0,
        learning_step_count: cfg.max_iterations,
        online_step_count: 0,
        warmup_steps: 0,
        samples_evaluated: 0,
        fallback_count: 0,
        critical_path_fem_solves: cfg.max_iterations,
        initial_objective,
        final_objective: last_objective,
        final_volume: volume_fraction(&x),
        wall_ms: elapsed_ms(start),
        learning_steps: Vec::new(),
    };
    Ok(RunOutput {
        design: x,
        history,
        manifest,
        surrogate: None,
    })
}

struct Fit {
    net: GradientNet,
    holdout_cosine: Option<f64>,
    epochs: usize,
}

struct Learner<'a> {
    problem: &'a Problem,
    cfg: &'a RunConfig,
}

impl Learner<'_> {
    fn simulate(&self, designs: &[DensityField]) -> Result<(Vec<SamplePair>, usize)> {
        let results = evaluate_batch(designs, self.problem, self.cfg.workers)?;
        let mut failed = 0;
        let mut pairs = Vec::with_capacity(designs.len());
        for (d, r) in designs.iter().zip(results) {
            match r {
                Ok(eval) => pairs.push(SamplePair {
                    design: d.values().to_vec(),
                    gradient: eval.gradient,
                }),
                Err(_) => failed += 1,
            }
        }
        Ok((pairs, failed))
    }

    fn fit(&self, pairs: &[SamplePair], center: &SamplePair, iteration: usize, attempt: u64) -> Result<Fit> {
        let s = &self.cfg.surrogate;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.cfg.seed,
            stream(iteration, SPLIT_STREAM) + (attempt << 40),
        ));
        order.shuffle(&mut rng);
        let holdout = (s.holdout_fraction * pairs.len() as f64).floor() as usize;
        let validation: Vec<SamplePair> = order[..holdout].iter().map(|&i| pairs[i].clone()).collect();
        let mut training: Vec<SamplePair> = order[holdout..].iter().map(|&i| pairs[i].clone()).collect();
        training.push(center.clone());
        let init_seed = derive_seed(self.cfg.seed, stream(iteration, INIT_STREAM) + (attempt << 40));
        let layers: Vec<usize> = std::iter::once(center.design.len())
            .chain(s.hidden.iter().copied())
            .chain(std::iter::once(center.design.len()))
            .collect();
        let net = GradientNet::new(layers, Activation::Tanh, init_seed)?;
        let (net, report) = train(&training, &validation, net, &s.training)?;
        let holdout_cosine = if validation.is_empty() {
            None
        } else {
            Some(mean_cosine_similarity(&net, &validation)?)
        };
        Ok(Fit {
            net,
            holdout_cosine,
            epochs: report.epochs_run,
        })
    }

    fn passes(&self, fit: &Fit) -> bool {
        fit.holdout_cosine
            .is_none_or(|c| c >= self.cfg.surrogate.fidelity_threshold)
    }
}

/// Accelerated loop. See the module documentation for the step schedule.
pub fn run_sdl_to(spec: &ProblemSpec, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let problem = Problem::new(spec.clone())?;
    let learner = Learner {
        problem: &problem,
        cfg,
    };
    let mut stepper = Stepper::new(&problem, cfg)?;
    let mut x = initial_design(&problem)?;
    let mut buffer = LookbackBuffer::new(cfg.window);
    let mut trigger = TriggerConfig::new(cfg.lambda_star)?;
    let mut net: Option<GradientNet> = None;
    let mut accepted_net: Option<GradientNet> = None;

    let mut history = Vec::with_capacity(cfg.max_iterations);
    let mut reports = Vec::new();
    let mut fem_solves = 0;
    let mut audit_fem_solves = 0;
    let mut samples_evaluated = 0;
    let mut critical_path = 0;
    let mut learning_step_count = 0;
    let mut online_step_count = 0;
    let mut warmup_steps = 0;
    let mut fallback_count = 0;
    let mut online_run = 0;
    let mut initial_objective = f64::NAN;

    for k in 0..cfg.max_iterations {
        buffer.push(x.clone());
        let warmup = k <= cfg.window;
        let learn = warmup
            || net.is_none()
            || online_run >= cfg.surrogate.max_online_steps
            || should_relearn(&x, &trigger);

        let (next, mode, objective) = if learn {
            let center = evaluate(&x, &problem).map_err(|e| e.at_iteration(k))?;
            fem_solves += 1;
            critical_path += 1;
            learning_step_count += 1;
            if k == 0 {
                initial_objective = center.objective;
            }
            if warmup {
                warmup_steps += 1;
            } else {
                let report = learning_step(
                    &learner,
                    &buffer,
                    &x,
                    &center,
                    k,
                    &mut net,
                )
                .map_err(|e| e.at_iteration(k))?;
                fem_solves += report.samples;
                samples_evaluated += report.samples;
                critical_path += report.samples.div_ceil(cfg.workers);
                if report.accepted {
                    trigger.set_reference(x.clone());
                    accepted_net.clone_from(&net);
                } else {
                    fallback_count += 1;
                }
                reports.push(report);
            }
            online_run = 0;
            let next = stepper
                .mma(&x, &center.gradient)
                .map_err(|e| e.at_iteration(k))?;
            (next, StepKind::Simulated, Some(center.objective))
        } else {
            let surrogate = net.as_ref().expect("online step requires a surrogate");
            let gradient = surrogate.predict(x.values()).map_err(|e| e.at_iteration(k))?;
            let next = match cfg.surrogate.online_update {
                OnlineUpdate::Mma => stepper.mma(&x, &gradient),
                OnlineUpdate::ProjectedDescent => projected_descent_step(&x, &gradient, &stepper.constraint),
            }
            .map_err(|e| e.at_iteration(k))?;
            online_run += 1;
            online_step_count += 1;
            let audited = match cfg.audit_every {
                Some(every) if online_step_count % every == 0 => {
                    audit_fem_solves += 1;
                    Some(evaluate(&x, &problem).map_err(|e| e.at_iteration(k))?.objective)
                }
                _ => None,
            };
            (next, StepKind::Learned, audited)
        };

        history.push(IterationRecord {
            index: k,
            mode,
            objective,
            volume: volume_fraction(&next),
            design_change: next.max_change(&x),
            cumulative_fem_solves: fem_solves,
            wall_ms: elapsed_ms(start),
        });
        x = next;
    }

    let certified = evaluate(&x, &problem).map_err(|e| e.at_iteration(cfg.max_iterations))?;
    fem_solves += 1;
    critical_path += 1;

    let manifest = RunManifest {
        mode: Mode::Sdl,
        iterations: cfg.max_iterations,
        workers: cfg.workers,
        fem_solves,
        audit_fem_solves,
        learning_step_count,
        online_step_count,
        warmup_steps,
        samples_evaluated,
        fallback_count,
        critical_path_fem_solves: critical_path,
        initial_objective,
        final_objective: certified.objective,
        final_volume: volume_fraction(&x),
        wall_ms: elapsed_ms(start),
        learning_steps: reports,
    };
    Ok(RunOutput {
        design: x,
        history,
        manifest,
        surrogate: accepted_net,
    })
}

/// Samples around the lookback envelope, simulates, fits and gates. On
/// success `net` holds the new surrogate; otherwise it is cleared.
fn learning_step(
    learner: &Learner<'_>,
    buffer: &LookbackBuffer,
    x: &DensityField,
    center: &Evaluation,
    iteration: usize,
    net: &mut Option<GradientNet>,
) -> Result<LearningStepReport> {
    let cfg = learner.cfg;
    let env = envelope(buffer)?;
    let sampler = SamplerConfig {
        seed: derive_seed(cfg.seed, stream(iteration, SAMPLE_STREAM)),
        ..cfg.sampler
    };
    let designs = draw_samples(&env, &sampler)?;
    let (mut pairs, mut failed) = learner.simulate(&designs)?;
    let mut samples = designs.len();
    let center_pair = SamplePair {
        design: x.values().to_vec(),
        gradient: center.gradient.clone(),
    };

    let mut fit = learner.fit(&pairs, &center_pair, iteration, 0)?;
    let mut retrained = false;
    if !learner.passes(&fit) {
        retrained = true;
        let extra = SamplerConfig {
            seed: derive_seed(cfg.seed, stream(iteration, RETRY_STREAM)),
            include_midpoint: false,
            ..cfg.sampler
        };
        let designs = draw_samples(&env, &extra)?;
        let (more, more_failed) = learner.simulate(&designs)?;
        samples += designs.len();
        failed += more_failed;
        pairs.extend(more);
        fit = learner.fit(&pairs, &center_pair, iteration, 1)?;
    }
    let accepted = learner.passes(&fit);
    let report = LearningStepReport {
        iteration,
        samples,
        failed_samples: failed,
        retrained,
        accepted,
        holdout_cosine: fit.holdout_cosine,
        epochs: fit.epochs,
    };
    *net = accepted.then_some(fit.net);
    Ok(report)
}
