use rand_distr::{Distribution, StandardNormal};

use super::GeneratorSpec;
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::rng::{derive_seed, rng};
use crate::sphere::sample_sphere;

const STYLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Per-layer latent vectors and noise planes fed to the synthesis network.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    /// One latent vector per synthesis layer, kept on the `√d` sphere by the optimizer.
    pub styles: Vec<Vec<f64>>,
    /// One `[r_i, r_i]` plane per layer.
    pub noise: Vec<Tensor>,
    /// Leading noise layers that receive gradient steps.
    pub trainable_noise: usize,
}

impl LatentState {
    /// All `k` styles set to the same latent `z`.
    pub fn tiled(z: Vec<f64>, styles: usize, noise: Vec<Tensor>, trainable_noise: usize) -> Self {
        LatentState {
            styles: vec![z; styles],
            noise,
            trainable_noise,
        }
    }

    /// Tiled latent drawn uniformly from the `√d` sphere plus fresh noise.
    pub fn sample(spec: &GeneratorSpec, seed: u64, trainable_noise: usize) -> Self {
        let z = sample_sphere(spec.latent_dim(), derive_seed(seed, STYLE_STREAM));
        let noise = sample_noise(spec, derive_seed(seed, NOISE_STREAM));
        LatentState::tiled(z, spec.style_count(), noise, trainable_noise)
    }

    /// Same styles, noise redrawn from `seed`.
    pub fn with_noise(&self, spec: &GeneratorSpec, seed: u64) -> Self {
        LatentState {
            styles: self.styles.clone(),
            noise: sample_noise(spec, derive_seed(seed, NOISE_STREAM)),
            trainable_noise: self.trainable_noise,
        }
    }

    pub fn style_norms(&self) -> Vec<f64> {
        self.styles
            .iter()
            .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

/// Draws `z` uniformly from `√d·S^{d−1}` and pushes it through the mapping layer.
pub fn sample_latent_pushforward(spec: &GeneratorSpec, seed: u64) -> Result<Vec<f64>> {
    spec.map_latent(&sample_sphere(spec.latent_dim(), seed))
}

/// i.i.d. standard Gaussian noise planes, one per synthesis layer.
pub fn sample_noise(spec: &GeneratorSpec, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    let cfg = spec.config();
    (0..cfg.styles)
        .map(|i| {
            let res = cfg.layer_resolution(i);
            let data = (0..res * res).map(|_| StandardNormal.sample(&mut r)).collect();
            Tensor::new(vec![res, res], data).expect("noise plane dims")
        })
        .collect()
}
