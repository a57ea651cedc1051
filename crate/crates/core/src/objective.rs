//! The scalar objective: mean downscaling loss plus a weighted (geo)cross
//! regularizer on the style vectors.

use std::str::FromStr;
use std::sync::Arc;

use crate::autodiff::{kernels, Graph, GradientRun, NodeId, Power, Tensor};
use crate::error::{Error, Result};
use crate::generator::{GeneratorSpec, LatentState, SynthesisNodes};
use crate::image::{Image, LinearResampler};

/// Convergence threshold on the downscaling loss.
pub const DEFAULT_EPSILON: f64 = 1e-3;
/// Weight of the geodesic cross loss.
pub const DEFAULT_GEOCROSS_WEIGHT: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CrossVariant {
    /// Squared Euclidean distances.
    Euclidean,
    /// Squared angles.
    Geodesic,
}

impl FromStr for CrossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" | "cross" => Ok(CrossVariant::Euclidean),
            "geodesic" | "geocross" => Ok(CrossVariant::Geodesic),
            other => Err(Error::invalid(format!("unknown cross variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub power: Power,
    /// Regularizer weight λ ≥ 0.
    pub geocross_weight: f64,
    pub cross: CrossVariant,
    pub epsilon: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            power: Power::L2,
            geocross_weight: DEFAULT_GEOCROSS_WEIGHT,
            cross: CrossVariant::Geodesic,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.geocross_weight >= 0.0) || !self.geocross_weight.is_finite() {
            return Err(Error::invalid(format!(
                "regularizer weight must be >= 0, got {}",
                self.geocross_weight
            )));
        }
        Ok(())
    }
}

/// Mean over low-resolution pixels of `|DS(sr) − lr|^p`.
pub fn downscaling_loss(sr: &Image, lr: &Image, resampler: &LinearResampler, power: Power) -> Result<f64> {
    let down = resampler.apply(sr)?;
    down.check_same_shape(lr, "downscaling loss")?;
    let n = lr.data().len() as f64;
    Ok(down
        .data()
        .iter()
        .zip(lr.data())
        .map(|(a, b)| power.apply(a - b))
        .sum::<f64>()
        / n)
}

/// `Σ_{i<j} |v_i − v_j|²`.
pub fn cross_loss(styles: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (i, a) in styles.iter().enumerate() {
        for b in &styles[i + 1..] {
            total += a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        }
    }
    total
}

/// `Σ_{i<j} θ(v_i, v_j)²` with angles from `atan2(|rejection|, projection)`.
pub fn geocross_loss(styles: &[Vec<f64>]) -> Result<f64> {
    if styles.iter().any(|s| kernels::norm(s) == 0.0) {
        return Err(Error::ZeroVector);
    }
    let mut total = 0.0;
    for (i, a) in styles.iter().enumerate() {
        for b in &styles[i + 1..] {
            let theta = kernels::angle(a, b);
            total += theta * theta;
        }
    }
    Ok(total)
}

/// Objective value split into its parts.
#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub total: f64,
    pub downscaling: f64,
    pub regularizer: f64,
    pub image: Image,
}

/// The objective for one low-resolution target, built once and evaluated
/// for many latent states.
#[derive(Clone, Debug)]
pub struct ObjectiveGraph {
    graph: Graph,
    synthesis: SynthesisNodes,
    downscaling: NodeId,
    regularizer: Option<NodeId>,
    total: NodeId,
    trainable_noise: usize,
}

impl ObjectiveGraph {
    pub fn build(
        spec: &GeneratorSpec,
        resampler: Arc<LinearResampler>,
        lr: &Image,
        config: &ObjectiveConfig,
        trainable_noise: usize,
    ) -> Result<Self> {
        config.validate()?;
        if resampler.hr_dims() != spec.output_dims() {
            let (m, n) = resampler.hr_dims();
            let (a, b) = spec.output_dims();
            return Err(Error::shape("resampler input vs generator output", &[a, b], &[m, n]));
        }
        let (m, n) = resampler.lr_dims();
        let channels = spec.config().image_channels;
        if lr.dims() != (m, n) || lr.channels() != channels {
            return Err(Error::shape(
                "low-resolution input",
                &[channels, m, n],
                &[lr.channels(), lr.height(), lr.width()],
            ));
        }
        let trainable_noise = trainable_noise.min(spec.style_count());
        let mut graph = Graph::new();
        let synthesis = spec.build_synthesis(&mut graph, trainable_noise)?;
        let down = graph.resample(synthesis.image, resampler)?;
        let target = graph.constant(Arc::new(lr.to_tensor()));
        let diff = graph.sub(down, target)?;
        let err = graph.pow(diff, config.power)?;
        let downscaling = graph.mean(err)?;
        graph.label(downscaling, "downscaling_loss");
        let (regularizer, total) = if config.geocross_weight > 0.0 {
            let reg = match config.cross {
                CrossVariant::Geodesic => graph.geocross(&synthesis.styles)?,
                CrossVariant::Euclidean => graph.cross(&synthesis.styles)?,
            };
            let weighted = graph.scale(reg, config.geocross_weight)?;
            (Some(reg), graph.add(downscaling, weighted)?)
        } else {
            (None, downscaling)
        };
        graph.set_output(total)?;
        Ok(ObjectiveGraph {
            graph,
            synthesis,
            downscaling,
            regularizer,
            total,
            trainable_noise,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn trainable_noise(&self) -> usize {
        self.trainable_noise
    }

    fn split(&self, ev: &crate::autodiff::Evaluation) -> Result<ObjectiveValue> {
        Ok(ObjectiveValue {
            total: ev.value(self.total).data()[0],
            downscaling: ev.value(self.downscaling).data()[0],
            regularizer: self.regularizer.map_or(0.0, |r| ev.value(r).data()[0]),
            image: Image::from_tensor(ev.value(self.synthesis.image))?,
        })
    }

    pub fn evaluate(&self, spec: &GeneratorSpec, state: &LatentState) -> Result<ObjectiveValue> {
        let ev = self.graph.evaluate(&state.bindings(spec)?)?;
        self.split(&ev)
    }

    /// Objective value and gradients for styles (`style.{i}`) and trainable
    /// noise planes (`noise.{i}`).
    pub fn gradient(&self, spec: &GeneratorSpec, state: &LatentState) -> Result<(ObjectiveValue, GradientRun)> {
        let run = self.graph.gradient(&state.bindings(spec)?)?;
        Ok((self.split(&run.evaluation)?, run))
    }

    pub fn style_grads<'a>(&self, run: &'a GradientRun) -> Vec<&'a Tensor> {
        (0..self.synthesis.styles.len())
            .map(|i| run.grad(&crate::generator::style_input(i)).expect("style gradient"))
            .collect()
    }
}

/// One-shot evaluation of the full objective.
pub fn total_objective(
    state: &LatentState,
    spec: &GeneratorSpec,
    lr: &Image,
    resampler: &LinearResampler,
    config: &ObjectiveConfig,
) -> Result<f64> {
    let graph = ObjectiveGraph::build(spec, Arc::new(resampler.clone()), lr, config, state.trainable_noise)?;
    Ok(graph.evaluate(spec, state)?.total)
}
