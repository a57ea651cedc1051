//! Full-reference image quality metrics on `[0, 1]` intensities.

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "mse")?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// `10·log10(1 / mse)` in dB for unit peak; `+∞` for identical images.
///
/// On the 0..=255 convention the value is the same, since the peak and the
/// error scale together.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Mean SSIM and mean contrast-structure term over all windows and channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimScore {
    pub ssim: f64,
    pub contrast_structure: f64,
}

/// Single-scale SSIM with a uniform 8×8 window moved one pixel at a time
/// (shrunk to the image size when the image is smaller).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_score(a, b)?.ssim)
}

pub fn ssim_score(a: &Image, b: &Image) -> Result<SsimScore> {
    a.check_same_shape(b, "ssim")?;
    let (h, w) = a.dims();
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let n = (wh * ww) as f64;
    let (mut total, mut total_cs, mut count) = (0.0, 0.0, 0usize);
    for c in 0..a.channels() {
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let (p, q) = (a.get(c, y, x), b.get(c, y, x));
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                let luminance = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
                let cs = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
                total += luminance * cs;
                total_cs += cs;
                count += 1;
            }
        }
    }
    Ok(SsimScore {
        ssim: total / count as f64,
        contrast_structure: total_cs / count as f64,
    })
}

/// Pixelwise arithmetic mean, the minimizer of `Σ_j ‖I_j − I‖²`.
pub fn pixelwise_mean_minimizer(images: &[Image]) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("need at least one image"))?;
    let mut acc = vec![0.0; first.data().len()];
    for img in images {
        first.check_same_shape(img, "pixelwise mean")?;
        for (a, v) in acc.iter_mut().zip(img.data()) {
            *a += v;
        }
    }
    let k = images.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Image::from_planes(first.height(), first.width(), first.channels(), acc)
}

/// `Σ_j ‖I_j − candidate‖²`.
pub fn sum_squared_distance(images: &[Image], candidate: &Image) -> Result<f64> {
    images
        .iter()
        .map(|img| Ok(img.l2_distance(candidate)?.powi(2)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(n: usize) -> Image {
        let data = (0..n * n).map(|i| ((i / n + i % n) % 2) as f64).collect();
        Image::from_planes(n, n, 1, data).unwrap()
    }

    #[test]
    fn mse_and_psnr_examples() {
        let a = Image::filled(4, 4, 1, 0.2);
        let b = Image::filled(4, 4, 1, 0.7);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!((mse(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let c = Image::filled(4, 4, 1, 0.2 + 16.0 / 255.0);
        let expected = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
        assert!((psnr(&a, &c).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 24.05).abs() < 0.01);
    }

    #[test]
    fn ssim_examples() {
        let a = checkerboard(12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = Image::from_planes(12, 12, 1, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim(&a, &inv).unwrap();
        assert!((-1.0..0.0).contains(&s), "{s}");
    }

    #[test]
    fn mean_minimizer_examples() {
        let zero = Image::filled(2, 2, 1, 0.0);
        let one = Image::filled(2, 2, 1, 1.0);
        let m = pixelwise_mean_minimizer(&[zero.clone(), one]).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.5));
        assert_eq!(pixelwise_mean_minimizer(std::slice::from_ref(&zero)).unwrap(), zero);
        assert!(pixelwise_mean_minimizer(&[]).is_err());
    }
}
