//! Linear downscaling operators and their adjoints.
//!
//! A [`LinearResampler`] is separable: one [`AxisResampler`] per image axis,
//! each storing the sparse taps of every output sample. Out-of-range taps are
//! folded onto the nearest edge sample and every output's weights are
//! renormalized to sum to one, so constants are preserved exactly at borders.

use std::fmt;
use std::str::FromStr;

use super::Image;
use crate::error::{Error, Result};

/// Catmull-Rom parameter of the cubic convolution kernel.
pub const CATMULL_ROM_A: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kernel {
    /// Catmull-Rom cubic, support stretched by the scale factor.
    Bicubic,
    /// Mean over each `s × s` block.
    Box,
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Bicubic => "bicubic",
            Kernel::Box => "box",
        })
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bicubic" => Ok(Kernel::Bicubic),
            "box" => Ok(Kernel::Box),
            other => Err(Error::invalid(format!("unknown kernel `{other}`"))),
        }
    }
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn catmull_rom(x: f64) -> f64 {
    let a = CATMULL_ROM_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// One-dimensional downscaling operator stored as compressed rows of taps.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisResampler {
    in_len: usize,
    out_len: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl AxisResampler {
    pub fn new(kernel: Kernel, in_len: usize, factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::invalid(format!(
                "downscale factor must be at least 2, got {factor}"
            )));
        }
        if in_len == 0 || !in_len.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "axis length {in_len} is not a positive multiple of factor {factor}"
            )));
        }
        let out_len = in_len / factor;
        let mut offsets = Vec::with_capacity(out_len + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        let mut row = vec![0.0; in_len];
        for out in 0..out_len {
            row.iter_mut().for_each(|w| *w = 0.0);
            match kernel {
                Kernel::Box => {
                    for j in out * factor..(out + 1) * factor {
                        row[j] = 1.0;
                    }
                }
                Kernel::Bicubic => {
                    let s = factor as f64;
                    let center = (out as f64 + 0.5) * s - 0.5;
                    let lo = (center - 2.0 * s).floor() as i64;
                    let hi = (center + 2.0 * s).ceil() as i64;
                    for j in lo..=hi {
                        let w = catmull_rom((j as f64 - center) / s);
                        if w != 0.0 {
                            let clamped = j.clamp(0, in_len as i64 - 1) as usize;
                            row[clamped] += w;
                        }
                    }
                }
            }
            let total: f64 = row.iter().sum();
            for (j, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    indices.push(j);
                    weights.push(w / total);
                }
            }
            offsets.push(indices.len());
        }
        Ok(AxisResampler {
            in_len,
            out_len,
            offsets,
            indices,
            weights,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    /// `(input index, weight)` pairs contributing to output sample `out`.
    pub fn taps(&self, out: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[out]..self.offsets[out + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.weights[range].iter().copied())
    }

    pub fn apply(&self, signal: &[f64]) -> Result<Vec<f64>> {
        if signal.len() != self.in_len {
            return Err(Error::shape("axis resample", &[self.in_len], &[signal.len()]));
        }
        Ok((0..self.out_len)
            .map(|o| self.taps(o).map(|(j, w)| w * signal[j]).sum())
            .collect())
    }

    pub fn adjoint(&self, signal: &[f64]) -> Result<Vec<f64>> {
        if signal.len() != self.out_len {
            return Err(Error::shape("axis adjoint", &[self.out_len], &[signal.len()]));
        }
        let mut out = vec![0.0; self.in_len];
        for (o, &v) in signal.iter().enumerate() {
            for (j, w) in self.taps(o) {
                out[j] += w * v;
            }
        }
        Ok(out)
    }

    /// Dense `out_len × in_len` matrix, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.out_len * self.in_len];
        for o in 0..self.out_len {
            for (j, w) in self.taps(o) {
                dense[o * self.in_len + j] = w;
            }
        }
        dense
    }
}

/// Separable linear downscaler from `hr_dims` to `lr_dims` (height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearResampler {
    kernel: Kernel,
    factor: usize,
    rows: AxisResampler,
    cols: AxisResampler,
}

/// Builds the downscaling operator for an image of `hr_dims = (height, width)`.
pub fn build_downscaler(
    kernel: Kernel,
    hr_dims: (usize, usize),
    factor: usize,
) -> Result<LinearResampler> {
    Ok(LinearResampler {
        kernel,
        factor,
        rows: AxisResampler::new(kernel, hr_dims.0, factor)?,
        cols: AxisResampler::new(kernel, hr_dims.1, factor)?,
    })
}

impl LinearResampler {
    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn hr_dims(&self) -> (usize, usize) {
        (self.rows.in_len, self.cols.in_len)
    }

    pub fn lr_dims(&self) -> (usize, usize) {
        (self.rows.out_len, self.cols.out_len)
    }

    pub fn rows(&self) -> &AxisResampler {
        &self.rows
    }

    pub fn cols(&self) -> &AxisResampler {
        &self.cols
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        let (m, n) = self.lr_dims();
        let data = self.apply_planes(image.channels(), image.data())?;
        Image::from_planes(m, n, image.channels(), data)
    }

    pub fn adjoint_apply(&self, image: &Image) -> Result<Image> {
        let (big_m, big_n) = self.hr_dims();
        let data = self.adjoint_planes(image.channels(), image.data())?;
        Image::from_planes(big_m, big_n, image.channels(), data)
    }

    /// Downscales `planes` stacked channel-major planes of size `hr_dims`.
    pub fn apply_planes(&self, planes: usize, data: &[f64]) -> Result<Vec<f64>> {
        let (big_m, big_n) = self.hr_dims();
        let (m, n) = self.lr_dims();
        if data.len() != planes * big_m * big_n {
            return Err(Error::shape(
                "downscale",
                &[planes, big_m, big_n],
                &[data.len()],
            ));
        }
        let mut narrow = vec![0.0; planes * big_m * n];
        for (src, dst) in data.chunks_exact(big_n).zip(narrow.chunks_exact_mut(n)) {
            for (x, d) in dst.iter_mut().enumerate() {
                *d = self.cols.taps(x).map(|(j, w)| w * src[j]).sum();
            }
        }
        let mut out = vec![0.0; planes * m * n];
        for (src, dst) in narrow
            .chunks_exact(big_m * n)
            .zip(out.chunks_exact_mut(m * n))
        {
            for (y, dst_row) in dst.chunks_exact_mut(n).enumerate() {
                for (j, w) in self.rows.taps(y) {
                    let src_row = &src[j * n..(j + 1) * n];
                    for (d, s) in dst_row.iter_mut().zip(src_row) {
                        *d += w * s;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Transpose of [`apply_planes`](Self::apply_planes).
    pub fn adjoint_planes(&self, planes: usize, data: &[f64]) -> Result<Vec<f64>> {
        let (big_m, big_n) = self.hr_dims();
        let (m, n) = self.lr_dims();
        if data.len() != planes * m * n {
            return Err(Error::shape("downscale adjoint", &[planes, m, n], &[data.len()]));
        }
        let mut tall = vec![0.0; planes * big_m * n];
        for (src, dst) in data.chunks_exact(m * n).zip(tall.chunks_exact_mut(big_m * n)) {
            for (y, src_row) in src.chunks_exact(n).enumerate() {
                for (j, w) in self.rows.taps(y) {
                    let dst_row = &mut dst[j * n..(j + 1) * n];
                    for (d, s) in dst_row.iter_mut().zip(src_row) {
                        *d += w * s;
                    }
                }
            }
        }
        let mut out = vec![0.0; planes * big_m * big_n];
        for (src, dst) in tall.chunks_exact(n).zip(out.chunks_exact_mut(big_n)) {
            for (x, &v) in src.iter().enumerate() {
                for (j, w) in self.cols.taps(x) {
                    dst[j] += w * v;
                }
            }
        }
        Ok(out)
    }

    /// Materializes the operator as a dense `(m·n) × (M·N)` row-major matrix.
    pub fn to_dense(&self) -> Vec<f64> {
        let (big_m, big_n) = self.hr_dims();
        let (m, n) = self.lr_dims();
        let cols = big_m * big_n;
        let mut dense = vec![0.0; m * n * cols];
        for y in 0..m {
            for (jy, wy) in self.rows.taps(y) {
                for x in 0..n {
                    for (jx, wx) in self.cols.taps(x) {
                        dense[(y * n + x) * cols + jy * big_n + jx] += wy * wx;
                    }
                }
            }
        }
        dense
    }
}
