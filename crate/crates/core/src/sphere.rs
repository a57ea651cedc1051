//! Search on the sphere of radius `√d`: sampling, projection, projected
//! gradient steps, and the restart driver.

use std::str::FromStr;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::kernels::{dot, norm};
use crate::error::{Error, Result};
use crate::generator::{GeneratorSpec, LatentState};
use crate::image::{Image, LinearResampler};
use crate::objective::{ObjectiveConfig, ObjectiveGraph};
use crate::par::{map_range, Execution};
use crate::rng::{derive_seed, restart_seed, rng};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_LEARNING_RATE: f64 = 0.4;
pub const DEFAULT_RESTARTS: usize = 5;

/// Standard Gaussian sample rescaled to norm `√d`.
pub fn sample_sphere(d: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        if let Ok(p) = project_sphere(&v, (d as f64).sqrt()) {
            return p;
        }
    }
}

/// `radius · v / ‖v‖`.
pub fn project_sphere(v: &[f64], radius: f64) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x * radius / n).collect())
}

/// How an iterate is brought back onto the sphere after a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Retraction {
    /// Step along the raw gradient, then renormalize.
    Renormalize,
    /// Drop the radial gradient component, step, then renormalize.
    #[default]
    Tangent,
}

impl FromStr for Retraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "renorm" | "renormalize" => Ok(Retraction::Renormalize),
            "tangent" => Ok(Retraction::Tangent),
            other => Err(Error::invalid(format!("unknown retraction `{other}`"))),
        }
    }
}

/// `g` minus its component along `v`.
pub fn tangent_component(g: &[f64], v: &[f64]) -> Vec<f64> {
    let vn2 = dot(v, v);
    if vn2 == 0.0 {
        return g.to_vec();
    }
    let radial = dot(g, v) / vn2;
    g.iter().zip(v).map(|(gi, vi)| gi - radial * vi).collect()
}

/// Projected gradient step applied to each style vector independently.
///
/// A step that lands on the origin is retried with half the learning rate.
pub fn spherical_step(styles: &mut [Vec<f64>], grads: &[&[f64]], lr: f64, mode: Retraction) -> Result<()> {
    if styles.len() != grads.len() {
        return Err(Error::shape("spherical step", &[styles.len()], &[grads.len()]));
    }
    for (v, g) in styles.iter_mut().zip(grads) {
        if v.len() != g.len() {
            return Err(Error::shape("spherical step", &[v.len()], &[g.len()]));
        }
        let radius = (v.len() as f64).sqrt();
        let direction: Vec<f64> = match mode {
            Retraction::Renormalize => g.to_vec(),
            Retraction::Tangent if dot(v, v) == 0.0 => return Err(Error::ZeroVector),
            Retraction::Tangent => tangent_component(g, v),
        };
        let mut rate = lr;
        let mut projected = None;
        for _ in 0..64 {
            let moved: Vec<f64> = v.iter().zip(&direction).map(|(x, d)| x - rate * d).collect();
            match project_sphere(&moved, radius) {
                Ok(p) => {
                    projected = Some(p);
                    break;
                }
                Err(_) => rate *= 0.5,
            }
        }
        *v = projected.ok_or(Error::ZeroVector)?;
    }
    Ok(())
}

/// Update rule producing the step direction from raw gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Descent {
    /// `x ← x − lr·g`.
    Plain,
    /// Heavy-ball: `m ← β·m + g`, `x ← x − lr·m`.
    Momentum { beta: f64 },
    /// Bias-corrected Adam moments.
    Adam { beta1: f64, beta2: f64 },
}

impl Default for Descent {
    fn default() -> Self {
        Descent::adam()
    }
}

impl FromStr for Descent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plain" | "gd" => Ok(Descent::Plain),
            "momentum" => Ok(Descent::Momentum { beta: 0.9 }),
            "adam" => Ok(Descent::adam()),
            _ => Err(Error::invalid(format!("unknown descent rule {s:?}"))),
        }
    }
}

impl Descent {
    fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        match *self {
            Descent::Plain => Ok(()),
            Descent::Momentum { beta } if ok(beta) => Ok(()),
            Descent::Adam { beta1, beta2 } if ok(beta1) && ok(beta2) => Ok(()),
            _ => Err(Error::invalid("descent coefficients must lie in [0, 1)")),
        }
    }

    pub fn adam() -> Self {
        Descent::Adam {
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

const ADAM_EPS: f64 = 1e-8;

/// Per-parameter optimizer memory.
#[derive(Clone, Debug)]
struct DescentState {
    first: Vec<f64>,
    second: Vec<f64>,
}

impl DescentState {
    fn new(n: usize) -> Self {
        DescentState {
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }

    /// Direction for iteration `t` (1-based).
    fn direction(&mut self, rule: Descent, g: &[f64], t: usize) -> Vec<f64> {
        match rule {
            Descent::Plain => g.to_vec(),
            Descent::Momentum { beta } => {
                for (m, gi) in self.first.iter_mut().zip(g) {
                    *m = beta * *m + gi;
                }
                self.first.clone()
            }
            Descent::Adam { beta1, beta2 } => {
                let c1 = 1.0 - beta1.powi(t as i32);
                let c2 = 1.0 - beta2.powi(t as i32);
                self.first
                    .iter_mut()
                    .zip(self.second.iter_mut())
                    .zip(g)
                    .map(|((m, v), &gi)| {
                        *m = beta1 * *m + (1.0 - beta1) * gi;
                        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                        (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS)
                    })
                    .collect()
            }
        }
    }
}

/// How additional restarts differ from the first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum RestartMode {
    /// Fresh latent initialization and fresh noise.
    #[default]
    Restart,
    /// Latent initialization shared with restart 0, noise redrawn.
    Noise,
}

impl FromStr for RestartMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "restart" => Ok(RestartMode::Restart),
            "noise" => Ok(RestartMode::Noise),
            other => Err(Error::invalid(format!("unknown restart mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub restarts: usize,
    pub seed: u64,
    pub retraction: Retraction,
    /// Leading noise layers that take gradient steps; `None` means `⌈k/3⌉`.
    pub trainable_noise: Option<usize>,
    pub restart_mode: RestartMode,
    pub descent: Descent,
    pub execution: Execution,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            steps: DEFAULT_STEPS,
            learning_rate: DEFAULT_LEARNING_RATE,
            restarts: DEFAULT_RESTARTS,
            seed: 0,
            retraction: Retraction::Tangent,
            trainable_noise: None,
            restart_mode: RestartMode::Restart,
            descent: Descent::default(),
            execution: Execution::Parallel,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be >= 1"));
        }
        self.descent.validate()
    }

    pub fn trainable_noise_for(&self, spec: &GeneratorSpec) -> usize {
        self.trainable_noise
            .unwrap_or_else(|| spec.config().default_trainable_noise())
            .min(spec.style_count())
    }
}

/// Outcome of one optimization run.
///
/// `converged == false` means no image within ε was found; `image` still
/// holds the best candidate.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub image: Image,
    pub best_loss: f64,
    pub best_step: usize,
    pub converged: bool,
    /// Downscaling loss of the state before each step and after the last (`steps + 1` entries).
    pub trajectory: Vec<f64>,
    pub restart: usize,
    pub seed: u64,
    /// Largest `|‖v‖ − √d| / √d` over every style vector after every step.
    pub max_norm_error: f64,
    pub best_state: LatentState,
}

struct Prepared {
    objective: ObjectiveGraph,
    trainable_noise: usize,
}

fn prepare(
    lr_image: &Image,
    spec: &GeneratorSpec,
    resampler: &LinearResampler,
    obj: &ObjectiveConfig,
    opt: &OptimConfig,
) -> Result<Prepared> {
    opt.validate()?;
    let trainable_noise = opt.trainable_noise_for(spec);
    let objective = ObjectiveGraph::build(spec, Arc::new(resampler.clone()), lr_image, obj, trainable_noise)?;
    Ok(Prepared {
        objective,
        trainable_noise,
    })
}

fn optimize(
    prepared: &Prepared,
    spec: &GeneratorSpec,
    obj: &ObjectiveConfig,
    opt: &OptimConfig,
    mut state: LatentState,
    restart: usize,
    seed: u64,
) -> Result<RunResult> {
    let objective = &prepared.objective;
    let radius = (spec.latent_dim() as f64).sqrt();
    let mut trajectory = Vec::with_capacity(opt.steps + 1);
    let mut best: Option<(f64, usize, Image, LatentState)> = None;
    let mut max_norm_error: f64 = 0.0;

    let mut record = |loss: f64, step: usize, image: Image, state: &LatentState| -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("objective at step {step} (restart {restart}, seed {seed})")));
        }
        trajectory.push(loss);
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, step, image, state.clone()));
        }
        Ok(())
    };

    let mut style_memory: Vec<DescentState> = state.styles.iter().map(|s| DescentState::new(s.len())).collect();
    let mut noise_memory: Vec<DescentState> = state.noise[..prepared.trainable_noise]
        .iter()
        .map(|n| DescentState::new(n.len()))
        .collect();
    for step in 0..opt.steps {
        let (value, run) = objective.gradient(spec, &state)?;
        record(value.downscaling, step, value.image, &state)?;
        let directions: Vec<Vec<f64>> = objective
            .style_grads(&run)
            .into_iter()
            .zip(state.styles.iter())
            .zip(style_memory.iter_mut())
            .map(|((g, v), mem)| {
                let g = match opt.retraction {
                    Retraction::Tangent => tangent_component(g.data(), v),
                    Retraction::Renormalize => g.data().to_vec(),
                };
                mem.direction(opt.descent, &g, step + 1)
            })
            .collect();
        let directions: Vec<&[f64]> = directions.iter().map(Vec::as_slice).collect();
        spherical_step(&mut state.styles, &directions, opt.learning_rate, opt.retraction)?;
        for n in state.style_norms() {
            max_norm_error = max_norm_error.max((n - radius).abs() / radius);
        }
        for i in 0..prepared.trainable_noise {
            let g = run.grad(&crate::generator::noise_input(i)).expect("trainable noise gradient");
            let dir = noise_memory[i].direction(opt.descent, g.data(), step + 1);
            for (x, di) in state.noise[i].data_mut().iter_mut().zip(&dir) {
                *x -= opt.learning_rate * di;
            }
        }
    }
    let value = objective.evaluate(spec, &state)?;
    record(value.downscaling, opt.steps, value.image, &state)?;

    let (best_loss, best_step, image, best_state) = best.expect("at least one evaluation");
    Ok(RunResult {
        image,
        best_loss,
        best_step,
        converged: best_loss <= obj.epsilon,
        trajectory,
        restart,
        seed,
        max_norm_error,
        best_state,
    })
}

/// One run from a tiled initialization drawn with `opt.seed`.
pub fn run_pulse(
    lr_image: &Image,
    spec: &GeneratorSpec,
    resampler: &LinearResampler,
    obj: &ObjectiveConfig,
    opt: &OptimConfig,
) -> Result<RunResult> {
    let prepared = prepare(lr_image, spec, resampler, obj, opt)?;
    let init = LatentState::sample(spec, opt.seed, prepared.trainable_noise);
    optimize(&prepared, spec, obj, opt, init, 0, opt.seed)
}

/// Runs from a caller-supplied initial state.
pub fn run_pulse_from(
    lr_image: &Image,
    spec: &GeneratorSpec,
    resampler: &LinearResampler,
    obj: &ObjectiveConfig,
    opt: &OptimConfig,
    init: LatentState,
) -> Result<RunResult> {
    let prepared = prepare(lr_image, spec, resampler, obj, opt)?;
    spec.check_state(&init)?;
    let mut init = init;
    init.trainable_noise = prepared.trainable_noise;
    optimize(&prepared, spec, obj, opt, init, 0, opt.seed)
}

/// `n` independently seeded runs sorted by best loss (ties by restart index).
///
/// Restart `i` uses seed `restart_seed(opt.seed, i)`; restart 0 therefore
/// reproduces [`run_pulse`] with the same config.
pub fn multi_restart(
    lr_image: &Image,
    spec: &GeneratorSpec,
    resampler: &LinearResampler,
    obj: &ObjectiveConfig,
    opt: &OptimConfig,
    n: usize,
) -> Result<Vec<RunResult>> {
    let prepared = prepare(lr_image, spec, resampler, obj, opt)?;
    let base = LatentState::sample(spec, opt.seed, prepared.trainable_noise);
    let runs = map_range(opt.execution, n, |i| {
        let seed = restart_seed(opt.seed, i);
        let init = match (i, opt.restart_mode) {
            (0, _) => base.clone(),
            (_, RestartMode::Restart) => LatentState::sample(spec, seed, prepared.trainable_noise),
            (_, RestartMode::Noise) => base.with_noise(spec, seed),
        };
        optimize(&prepared, spec, obj, opt, init, i, seed)
    });
    let mut runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    runs.sort_by(|a, b| a.best_loss.total_cmp(&b.best_loss).then(a.restart.cmp(&b.restart)));
    Ok(runs)
}

/// Monte Carlo summary of `‖z‖` for `z ~ N(0, I_d)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean_norm: f64,
    pub std_norm: f64,
    /// Fraction of samples with `‖z‖ ∈ [0.9, 1.1]·√d`.
    pub fraction_near_sphere: f64,
}

const NORM_CHUNK: usize = 1024;

pub fn gaussian_norm_stats(d: usize, n_samples: usize, seed: u64, exec: Execution) -> Result<NormStats> {
    if d == 0 || n_samples == 0 {
        return Err(Error::invalid("dimension and sample count must be positive"));
    }
    let root = (d as f64).sqrt();
    let chunks = n_samples.div_ceil(NORM_CHUNK);
    let partial = map_range(exec, chunks, |c| {
        let mut r = rng(derive_seed(seed, c as u64));
        let count = NORM_CHUNK.min(n_samples - c * NORM_CHUNK);
        let (mut s, mut s2, mut near) = (0.0, 0.0, 0usize);
        for _ in 0..count {
            let sq: f64 = (0..d)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut r);
                    x * x
                })
                .sum();
            let nrm = sq.sqrt();
            s += nrm;
            s2 += nrm * nrm;
            if (0.9 * root..=1.1 * root).contains(&nrm) {
                near += 1;
            }
        }
        (s, s2, near)
    });
    let (s, s2, near) = partial
        .into_iter()
        .fold((0.0, 0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let n = n_samples as f64;
    let mean = s / n;
    Ok(NormStats {
        mean_norm: mean,
        std_norm: (s2 / n - mean * mean).max(0.0).sqrt(),
        fraction_near_sphere: near as f64 / n,
    })
}

/// Minimizes `‖z‖²` from a point on the `√d` sphere and returns the iterate
/// norms (`steps + 1` entries). Unconstrained descent shrinks toward the
/// origin; the constrained variant uses [`spherical_step`] and stays on the sphere.
pub fn squared_norm_descent(
    d: usize,
    lr: f64,
    steps: usize,
    seed: u64,
    constrained: Option<Retraction>,
) -> Result<Vec<f64>> {
    let mut z = vec![sample_sphere(d, seed)];
    let mut norms = vec![norm(&z[0])];
    for _ in 0..steps {
        let g: Vec<f64> = z[0].iter().map(|x| 2.0 * x).collect();
        match constrained {
            Some(mode) => spherical_step(&mut z, &[&g], lr, mode)?,
            None => z[0].iter_mut().zip(&g).for_each(|(x, gi)| *x -= lr * gi),
        }
        norms.push(norm(&z[0]));
    }
    Ok(norms)
}
