use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Image;
use crate::error::{Error, Result};

/// A corruption applied to an image before super-resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// Additive Gaussian noise, std given on the 0..=255 scale.
    Gaussian { std: f64 },
    /// Line blur; the length is expressed for a 1024-pixel-tall image.
    MotionBlur { length_1024: usize },
    SaltPepper { density: f64 },
}

impl Degradation {
    pub fn apply(&self, image: &Image, seed: u64) -> Result<Image> {
        match *self {
            Degradation::Gaussian { std } => degrade_gaussian(image, std, seed),
            Degradation::MotionBlur { length_1024 } => degrade_motion_blur(image, length_1024, seed),
            Degradation::SaltPepper { density } => degrade_salt_pepper(image, density, seed),
        }
    }

    /// Builds a degradation from a CLI-style name and its single parameter.
    pub fn from_name(name: &str, param: f64) -> Result<Self> {
        match name {
            "gaussian" => Ok(Degradation::Gaussian { std: param }),
            "blur" | "motion" => {
                if param < 0.0 || param.fract() != 0.0 {
                    return Err(Error::invalid(format!(
                        "blur length must be a non-negative integer, got {param}"
                    )));
                }
                Ok(Degradation::MotionBlur {
                    length_1024: param as usize,
                })
            }
            "saltpepper" | "salt-pepper" => Ok(Degradation::SaltPepper { density: param }),
            other => Err(Error::invalid(format!("unknown degradation `{other}`"))),
        }
    }
}

/// Adds i.i.d. `N(0, (std/255)²)` noise. The result is not clamped.
pub fn degrade_gaussian(image: &Image, std: f64, seed: u64) -> Result<Image> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::invalid(format!("noise std must be >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, std / 255.0).expect("std is positive and finite");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = image.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
    Image::from_planes(image.height(), image.width(), image.channels(), data)
}

/// Kernel length in pixels for an image of `height` rows.
pub fn motion_kernel_length(length_1024: usize, height: usize) -> usize {
    ((length_1024 as f64 * height as f64 / 1024.0).round() as usize).max(1)
}

/// Normalized line kernel as `(dy, dx, weight)` taps: `length` unit samples
/// spaced one pixel apart along direction `angle`, splatted bilinearly.
pub fn motion_blur_kernel(length: usize, angle: f64) -> Vec<(i64, i64, f64)> {
    let (sin, cos) = angle.sin_cos();
    let mut taps: Vec<(i64, i64, f64)> = Vec::new();
    let mut add = |dy: i64, dx: i64, w: f64| {
        if w <= 0.0 {
            return;
        }
        match taps.iter_mut().find(|t| t.0 == dy && t.1 == dx) {
            Some(t) => t.2 += w,
            None => taps.push((dy, dx, w)),
        }
    };
    let half = (length as f64 - 1.0) / 2.0;
    for i in 0..length {
        let t = i as f64 - half;
        let (py, px) = (t * sin, t * cos);
        let (y0, x0) = (py.floor(), px.floor());
        let (fy, fx) = (py - y0, px - x0);
        let (y0, x0) = (y0 as i64, x0 as i64);
        add(y0, x0, (1.0 - fy) * (1.0 - fx));
        add(y0, x0 + 1, (1.0 - fy) * fx);
        add(y0 + 1, x0, fy * (1.0 - fx));
        add(y0 + 1, x0 + 1, fy * fx);
    }
    let total: f64 = taps.iter().map(|t| t.2).sum();
    taps.iter_mut().for_each(|t| t.2 /= total);
    taps
}

/// Convolves with a line kernel at a seeded uniformly random angle.
pub fn degrade_motion_blur(image: &Image, length_1024: usize, seed: u64) -> Result<Image> {
    if length_1024 == 0 {
        return Err(Error::invalid("motion blur length must be at least 1"));
    }
    let length = motion_kernel_length(length_1024, image.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.random_range(0.0..PI);
    let taps = motion_blur_kernel(length, angle);
    let (h, w) = image.dims();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut out = Image::filled(h, w, image.channels(), 0.0);
    for c in 0..image.channels() {
        for y in 0..h {
            for x in 0..w {
                let v = taps
                    .iter()
                    .map(|&(dy, dx, wt)| wt * image.get(c, clamp(y as i64 + dy, h), clamp(x as i64 + dx, w)))
                    .sum();
                out.set(c, y, x, v);
            }
        }
    }
    Ok(out)
}

/// Replaces each pixel (all channels) by black or white with probability `density`.
pub fn degrade_salt_pepper(image: &Image, density: f64, seed: u64) -> Result<Image> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::invalid(format!("density must lie in [0, 1], got {density}")));
    }
    let mut out = image.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for y in 0..image.height() {
        for x in 0..image.width() {
            if rng.random::<f64>() < density {
                let v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                for c in 0..image.channels() {
                    out.set(c, y, x, v);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..h * w).map(|i| (i % 17) as f64 / 17.0).collect();
        Image::from_planes(h, w, 1, data).unwrap()
    }

    #[test]
    fn gaussian_zero_std_is_identity() {
        let img = ramp(8, 8);
        assert_eq!(degrade_gaussian(&img, 0.0, 3).unwrap(), img);
        assert!(degrade_gaussian(&img, -1.0, 3).is_err());
    }

    #[test]
    fn gaussian_sample_std_matches_target() {
        let img = Image::filled(100, 100, 1, 0.5);
        let noisy = degrade_gaussian(&img, 25.0, 11).unwrap();
        let n = noisy.data().len() as f64;
        let mean = noisy.data().iter().map(|v| v - 0.5).sum::<f64>() / n;
        let var = noisy.data().iter().map(|v| (v - 0.5 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 25.0 / 255.0;
        assert!((var.sqrt() - target).abs() < 0.05 * target);
        assert_eq!(noisy, degrade_gaussian(&img, 25.0, 11).unwrap());
        assert!(noisy.data().iter().any(|&v| v > 0.75), "noise must not be clamped away");
    }

    #[test]
    fn motion_kernel_length_scales_with_height() {
        assert_eq!(motion_kernel_length(100, 1024), 100);
        assert_eq!(motion_kernel_length(100, 64), 6);
        assert_eq!(motion_kernel_length(100, 4), 1);
    }

    #[test]
    fn motion_blur_preserves_constants() {
        let img = Image::filled(64, 64, 1, 0.3);
        let out = degrade_motion_blur(&img, 100, 5).unwrap();
        for v in out.data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
        let kernel = motion_blur_kernel(6, 0.7);
        assert!((kernel.iter().map(|t| t.2).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn salt_pepper_density_bounds() {
        let img = Image::filled(100, 100, 1, 0.5);
        assert_eq!(degrade_salt_pepper(&img, 0.0, 1).unwrap(), img);
        let out = degrade_salt_pepper(&img, 0.05, 1).unwrap();
        let corrupted = out.data().iter().filter(|&&v| v != 0.5).count() as f64 / 1e4;
        assert!((0.04..=0.06).contains(&corrupted), "fraction {corrupted}");
        let all = degrade_salt_pepper(&img, 1.0, 1).unwrap();
        assert!(all.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(degrade_salt_pepper(&img, 1.5, 1).is_err());
    }
}
