//! StyleGAN-shaped differentiable generator: a one-layer mapping network,
//! per-layer style modulation, and per-layer noise injection.
//!
//! Layers come in pairs per resolution stage: layer `i` works at
//! `r₀ · 2^(i/2)` and every even layer after the first starts with a
//! nearest-neighbour ×2 upsample, so `k` layers give an output of
//! `r₀ · 2^(⌈k/2⌉ − 1)` pixels per side.

mod init;
mod latent;

use std::sync::Arc;

use nalgebra::DMatrix;

pub use init::{init_random_generator, init_random_generator_with, InitScales};
pub use latent::{sample_latent_pushforward, sample_noise, LatentState};

use crate::autodiff::{Bindings, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;

/// Largest accepted condition number of the mapping matrix.
pub const MAX_CONDITION_NUMBER: f64 = 1e6;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Architecture of a generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Number of synthesis layers, one style vector each.
    pub styles: usize,
    pub base_resolution: usize,
    /// Channel width of each resolution stage (`⌈k/2⌉` entries).
    pub widths: Vec<usize>,
    pub image_channels: usize,
    pub leaky_slope: f64,
}

impl GeneratorConfig {
    /// Small configuration for CPU experiments: `d = 64`, `k = 6`, 32×32 grayscale.
    pub fn desk() -> Self {
        GeneratorConfig {
            latent_dim: 64,
            styles: 6,
            base_resolution: 8,
            widths: vec![16, 12, 8],
            image_channels: 1,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    /// The full-size shape: `d = 512`, `k = 18`, 1024×1024 colour output.
    pub fn full_scale() -> Self {
        GeneratorConfig {
            latent_dim: 512,
            styles: 18,
            base_resolution: 4,
            widths: vec![512, 512, 512, 512, 256, 128, 64, 32, 16],
            image_channels: 3,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn stages(&self) -> usize {
        self.styles.div_ceil(2)
    }

    pub fn output_resolution(&self) -> usize {
        self.base_resolution << (self.stages().saturating_sub(1))
    }

    pub fn layer_resolution(&self, layer: usize) -> usize {
        self.base_resolution << (layer / 2)
    }

    pub fn layer_width(&self, layer: usize) -> usize {
        self.widths[layer / 2]
    }

    pub fn layer_upsamples(&self, layer: usize) -> bool {
        layer > 0 && layer.is_multiple_of(2)
    }

    /// Default number of leading noise layers that take gradient steps: `⌈k/3⌉`.
    pub fn default_trainable_noise(&self) -> usize {
        self.styles.div_ceil(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.styles == 0 || self.base_resolution == 0 {
            return Err(Error::invalid("latent dim, style count and base resolution must be non-zero"));
        }
        if self.widths.len() != self.stages() {
            return Err(Error::invalid(format!(
                "{} styles need {} stage widths, got {}",
                self.styles,
                self.stages(),
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("channel widths must be non-zero"));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(Error::invalid("generator output must have 1 or 3 channels"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid("leaky slope must lie in (0, 1) for the mapping to be invertible"));
        }
        Ok(())
    }
}

/// Weights of one synthesis layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    /// `[C_out, C_in, 3, 3]`
    pub conv: Arc<Tensor>,
    pub conv_bias: Arc<Tensor>,
    /// `[C_out, d]` affine producing the per-channel scale.
    pub style_scale: Arc<Tensor>,
    pub style_scale_bias: Arc<Tensor>,
    /// `[C_out, d]` affine producing the per-channel shift.
    pub style_shift: Arc<Tensor>,
    pub style_shift_bias: Arc<Tensor>,
    pub noise_gain: Arc<Tensor>,
}

/// Architecture plus immutable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    config: GeneratorConfig,
    pub(crate) mapping_matrix: Arc<Tensor>,
    pub(crate) mapping_bias: Arc<Tensor>,
    pub(crate) constant: Arc<Tensor>,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) to_image: Arc<Tensor>,
    pub(crate) to_image_bias: Arc<Tensor>,
}

pub fn style_input(layer: usize) -> String {
    format!("style.{layer}")
}

pub fn noise_input(layer: usize) -> String {
    format!("noise.{layer}")
}

/// Node handles of a synthesis network inside a larger graph.
#[derive(Clone, Debug)]
pub struct SynthesisNodes {
    pub styles: Vec<NodeId>,
    pub noise: Vec<NodeId>,
    pub image: NodeId,
}

impl GeneratorSpec {
    /// Assembles a spec from named tensors, checking every shape and the
    /// conditioning of the mapping matrix.
    pub fn from_named(config: GeneratorConfig, mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut take = |name: &str, dims: &[usize]| -> Result<Arc<Tensor>> {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::invalid(format!("missing weight tensor `{name}`")))?;
            let (_, t) = tensors.swap_remove(pos);
            if t.dims() != dims {
                return Err(Error::shape(format!("weight `{name}`"), dims, t.dims()));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("weight `{name}`")));
            }
            Ok(Arc::new(t))
        };
        let d = config.latent_dim;
        let r0 = config.base_resolution;
        let mapping_matrix = take("mapping.matrix", &[d, d])?;
        let mapping_bias = take("mapping.bias", &[d])?;
        let constant = take("synthesis.constant", &[config.widths[0], r0, r0])?;
        let mut layers = Vec::with_capacity(config.styles);
        for i in 0..config.styles {
            let c_in = if i == 0 { config.widths[0] } else { config.layer_width(i - 1) };
            let c = config.layer_width(i);
            layers.push(LayerWeights {
                conv: take(&format!("layer.{i}.conv"), &[c, c_in, 3, 3])?,
                conv_bias: take(&format!("layer.{i}.conv_bias"), &[c])?,
                style_scale: take(&format!("layer.{i}.style_scale"), &[c, d])?,
                style_scale_bias: take(&format!("layer.{i}.style_scale_bias"), &[c])?,
                style_shift: take(&format!("layer.{i}.style_shift"), &[c, d])?,
                style_shift_bias: take(&format!("layer.{i}.style_shift_bias"), &[c])?,
                noise_gain: take(&format!("layer.{i}.noise_gain"), &[c])?,
            });
        }
        let last = config.layer_width(config.styles - 1);
        let to_image = take("to_image.weight", &[config.image_channels, last, 1, 1])?;
        let to_image_bias = take("to_image.bias", &[config.image_channels])?;
        if let Some((name, _)) = tensors.first() {
            return Err(Error::invalid(format!("unexpected weight tensor `{name}`")));
        }
        let spec = GeneratorSpec {
            config,
            mapping_matrix,
            mapping_bias,
            constant,
            layers,
            to_image,
            to_image_bias,
        };
        let cond = spec.mapping_condition_number();
        if !(cond < MAX_CONDITION_NUMBER) {
            return Err(Error::Singular(cond));
        }
        Ok(spec)
    }

    /// Named weight tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("mapping.matrix".into(), &self.mapping_matrix),
            ("mapping.bias".into(), &self.mapping_bias),
            ("synthesis.constant".into(), &self.constant),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer.{i}.conv"), &l.conv));
            out.push((format!("layer.{i}.conv_bias"), &l.conv_bias));
            out.push((format!("layer.{i}.style_scale"), &l.style_scale));
            out.push((format!("layer.{i}.style_scale_bias"), &l.style_scale_bias));
            out.push((format!("layer.{i}.style_shift"), &l.style_shift));
            out.push((format!("layer.{i}.style_shift_bias"), &l.style_shift_bias));
            out.push((format!("layer.{i}.noise_gain"), &l.noise_gain));
        }
        out.push(("to_image.weight".into(), &self.to_image));
        out.push(("to_image.bias".into(), &self.to_image_bias));
        out
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn style_count(&self) -> usize {
        self.config.styles
    }

    pub fn output_dims(&self) -> (usize, usize) {
        let r = self.config.output_resolution();
        (r, r)
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    fn mapping_dmatrix(&self) -> DMatrix<f64> {
        let d = self.config.latent_dim;
        DMatrix::from_row_slice(d, d, self.mapping_matrix.data())
    }

    pub fn mapping_condition_number(&self) -> f64 {
        let sv = self.mapping_dmatrix().singular_values();
        let max = sv.max();
        let min = sv.min();
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// `w = leaky_relu(A·z + b)`.
    pub fn map_latent(&self, z: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.latent_dim;
        if z.len() != d {
            return Err(Error::shape("map_latent", &[d], &[z.len()]));
        }
        let a = self.mapping_matrix.data();
        let slope = self.config.leaky_slope;
        Ok(self
            .mapping_bias
            .data()
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let pre = b + crate::autodiff::kernels::dot(&a[i * d..(i + 1) * d], z);
                if pre > 0.0 {
                    pre
                } else {
                    slope * pre
                }
            })
            .collect())
    }

    /// Exact inverse of [`map_latent`](Self::map_latent).
    pub fn inverse_map(&self, w: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.latent_dim;
        if w.len() != d {
            return Err(Error::shape("inverse_map", &[d], &[w.len()]));
        }
        let slope = self.config.leaky_slope;
        let rhs = nalgebra::DVector::from_iterator(
            d,
            w.iter()
                .zip(self.mapping_bias.data())
                .map(|(&v, &b)| if v > 0.0 { v } else { v / slope } - b),
        );
        let z = self
            .mapping_dmatrix()
            .lu()
            .solve(&rhs)
            .ok_or(Error::Singular(f64::INFINITY))?;
        Ok(z.iter().copied().collect())
    }

    /// Appends the mapping and synthesis networks to `graph`.
    ///
    /// Style inputs `style.{i}` are latent vectors; each passes through the
    /// mapping layer before modulating its synthesis layer. Noise inputs
    /// `noise.{i}` are `[r_i, r_i]` planes; the first `trainable_noise` are
    /// declared trainable.
    pub fn build_synthesis(&self, graph: &mut Graph, trainable_noise: usize) -> Result<SynthesisNodes> {
        let cfg = &self.config;
        let d = cfg.latent_dim;
        let slope = cfg.leaky_slope;
        let a = graph.constant(self.mapping_matrix.clone());
        let b = graph.constant(self.mapping_bias.clone());
        let mut styles = Vec::with_capacity(cfg.styles);
        let mut noise = Vec::with_capacity(cfg.styles);
        let mut x = graph.constant(self.constant.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = graph.trainable(&style_input(i), &[d])?;
            let r = cfg.layer_resolution(i);
            let eta = if i < trainable_noise {
                graph.trainable(&noise_input(i), &[r, r])?
            } else {
                graph.input(&noise_input(i), &[r, r])?
            };
            styles.push(z);
            noise.push(eta);

            let az = graph.matmul(a, z)?;
            let pre = graph.add(az, b)?;
            let w = graph.leaky_relu(pre, slope)?;

            if cfg.layer_upsamples(i) {
                x = graph.upsample2x(x)?;
            }
            let k = graph.constant(layer.conv.clone());
            x = graph.conv2d(x, k)?;
            let cb = graph.constant(layer.conv_bias.clone());
            x = graph.channel_bias(x, cb)?;

            let sm = graph.constant(layer.style_scale.clone());
            let sb = graph.constant(layer.style_scale_bias.clone());
            let tm = graph.constant(layer.style_shift.clone());
            let tb = graph.constant(layer.style_shift_bias.clone());
            let s = graph.matmul(sm, w)?;
            let s = graph.add(s, sb)?;
            let t = graph.matmul(tm, w)?;
            let t = graph.add(t, tb)?;
            x = graph.channel_affine(x, s, t)?;

            let gain = graph.constant(layer.noise_gain.clone());
            x = graph.noise_inject(x, eta, gain)?;
            x = graph.leaky_relu(x, slope)?;
        }
        let k = graph.constant(self.to_image.clone());
        x = graph.conv2d(x, k)?;
        let ob = graph.constant(self.to_image_bias.clone());
        x = graph.channel_bias(x, ob)?;
        let image = graph.sigmoid(x)?;
        graph.label(image, "image");
        Ok(SynthesisNodes { styles, noise, image })
    }

    /// Forward pass `S(styles, noise)` for a latent state.
    pub fn synthesize(&self, state: &LatentState) -> Result<Image> {
        let mut graph = Graph::new();
        let nodes = self.build_synthesis(&mut graph, 0)?;
        let bindings = state.bindings(self)?;
        let ev = graph.evaluate(&bindings)?;
        Image::from_tensor(ev.value(nodes.image))
    }

    pub(crate) fn check_state(&self, state: &LatentState) -> Result<()> {
        let cfg = &self.config;
        if state.styles.len() != cfg.styles || state.noise.len() != cfg.styles {
            return Err(Error::shape(
                "latent state",
                &[cfg.styles, cfg.styles],
                &[state.styles.len(), state.noise.len()],
            ));
        }
        for (i, (s, n)) in state.styles.iter().zip(&state.noise).enumerate() {
            if s.len() != cfg.latent_dim {
                return Err(Error::shape(format!("style {i}"), &[cfg.latent_dim], &[s.len()]));
            }
            let r = cfg.layer_resolution(i);
            if n.dims() != [r, r] {
                return Err(Error::shape(format!("noise {i}"), &[r, r], n.dims()));
            }
        }
        Ok(())
    }
}

impl LatentState {
    /// Graph bindings for [`GeneratorSpec::build_synthesis`].
    pub fn bindings(&self, spec: &GeneratorSpec) -> Result<Bindings> {
        spec.check_state(self)?;
        let mut b = Bindings::with_capacity(2 * self.styles.len());
        for (i, (s, n)) in self.styles.iter().zip(&self.noise).enumerate() {
            b.insert(style_input(i), Tensor::vector(s.clone()));
            b.insert(noise_input(i), n.clone());
        }
        Ok(b)
    }
}
