use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{GeneratorConfig, GeneratorSpec, LayerWeights};
use crate::autodiff::kernels::{conv2d, ConvGeometry};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::rng;

/// Magnitudes used when drawing random weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitScales {
    pub mapping_bias_std: f64,
    /// Std of a style-scale response for a unit-variance mapped latent.
    pub style_scale: f64,
    pub style_shift: f64,
    pub noise_gain: f64,
    pub output_gain: f64,
}

impl Default for InitScales {
    fn default() -> Self {
        InitScales {
            mapping_bias_std: 0.1,
            style_scale: 0.5,
            style_shift: 0.5,
            noise_gain: 0.05,
            output_gain: 2.0,
        }
    }
}
/// Accepted band for the standard deviation of a conv layer's response to unit Gaussian input.
const CONV_STD_BAND: (f64, f64) = (0.1, 10.0);

/// Weights are drawn in `f64` and rounded to `f32` so they survive the weight
/// file unchanged.
fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn gaussian(r: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(r);
            f32_round(g * std)
        })
        .collect()
}

/// `rows × cols` matrix (row-major) with orthonormal rows, or orthonormal
/// columns when `rows > cols`.
fn orthogonal(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::<f64>::from_fn(tall, short, |_, _| StandardNormal.sample(r));
    let qr = g.qr();
    let mut q = qr.q();
    let rdiag = qr.r().diagonal();
    for j in 0..short {
        if rdiag[j] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows >= cols { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn tensor(dims: &[usize], data: Vec<f64>) -> Arc<Tensor> {
    Arc::new(Tensor::new(dims.to_vec(), data).expect("init dims"))
}

/// Deterministic seeded random weights for `config`.
///
/// The mapping matrix is a random orthogonal matrix; convolutions are
/// orthogonally initialized with a leaky-ReLU gain and each is checked to
/// respond to unit Gaussian input with a standard deviation inside
/// `[0.1, 10]`.
pub fn init_random_generator(config: &GeneratorConfig, seed: u64) -> Result<GeneratorSpec> {
    init_random_generator_with(config, &InitScales::default(), seed)
}

pub fn init_random_generator_with(config: &GeneratorConfig, scales: &InitScales, seed: u64) -> Result<GeneratorSpec> {
    config.validate()?;
    let mut r = rng(seed);
    let d = config.latent_dim;
    let slope = config.leaky_slope;
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();

    let mapping: Vec<f64> = orthogonal(&mut r, d, d).into_iter().map(f32_round).collect();
    let mapping_bias = gaussian(&mut r, d, scales.mapping_bias_std);
    let r0 = config.base_resolution;
    let constant = gaussian(&mut r, config.widths[0] * r0 * r0, 1.0);

    let mut layers = Vec::with_capacity(config.styles);
    for i in 0..config.styles {
        let c_in = if i == 0 { config.widths[0] } else { config.layer_width(i - 1) };
        let c = config.layer_width(i);
        let conv: Vec<f64> = orthogonal(&mut r, c, c_in * 9)
            .into_iter()
            .map(|v| f32_round(v * gain))
            .collect();
        let res = config.layer_resolution(i);
        check_conv_response(&mut r, &conv, c_in, c, res, i)?;
        let scale_std = scales.style_scale / (d as f64).sqrt();
        let shift_std = scales.style_shift / (d as f64).sqrt();
        let noise_gain = (0..c)
            .map(|_| f32_round(scales.noise_gain * (0.5 + r.random::<f64>())))
            .collect();
        layers.push(LayerWeights {
            conv: tensor(&[c, c_in, 3, 3], conv),
            conv_bias: tensor(&[c], vec![0.0; c]),
            style_scale: tensor(&[c, d], gaussian(&mut r, c * d, scale_std)),
            style_scale_bias: tensor(&[c], vec![1.0; c]),
            style_shift: tensor(&[c, d], gaussian(&mut r, c * d, shift_std)),
            style_shift_bias: tensor(&[c], vec![0.0; c]),
            noise_gain: tensor(&[c], noise_gain),
        });
    }
    let last = config.layer_width(config.styles - 1);
    let out_c = config.image_channels;
    let to_image = gaussian(&mut r, out_c * last, scales.output_gain / (last as f64).sqrt());

    let spec = GeneratorSpec {
        config: GeneratorConfig {
            leaky_slope: f32_round(config.leaky_slope),
            ..config.clone()
        },
        mapping_matrix: tensor(&[d, d], mapping),
        mapping_bias: tensor(&[d], mapping_bias),
        constant: tensor(&[config.widths[0], r0, r0], constant),
        layers,
        to_image: tensor(&[out_c, last, 1, 1], to_image),
        to_image_bias: tensor(&[out_c], vec![0.0; out_c]),
    };
    let cond = spec.mapping_condition_number();
    if !(cond < super::MAX_CONDITION_NUMBER) {
        return Err(Error::Singular(cond));
    }
    Ok(spec)
}

fn check_conv_response(
    r: &mut ChaCha8Rng,
    kernel: &[f64],
    c_in: usize,
    c_out: usize,
    res: usize,
    layer: usize,
) -> Result<()> {
    let geo = ConvGeometry {
        c_in,
        c_out,
        height: res,
        width: res,
        kh: 3,
        kw: 3,
    };
    let input: Vec<f64> = (0..c_in * res * res).map(|_| StandardNormal.sample(r)).collect();
    let out = conv2d(&geo, &input, kernel);
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < CONV_STD_BAND.0 || std > CONV_STD_BAND.1 {
        return Err(Error::invalid(format!(
            "layer {layer} convolution responds with std {std:.3}, outside {CONV_STD_BAND:?}"
        )));
    }
    Ok(())
}
