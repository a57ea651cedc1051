//! Images, exact downscaling operators, and the degradations used for
//! robustness experiments.

mod degrade;
mod resample;

pub use degrade::{
    degrade_gaussian, degrade_motion_blur, degrade_salt_pepper, motion_blur_kernel,
    motion_kernel_length, Degradation,
};
pub use resample::{build_downscaler, catmull_rom, AxisResampler, Kernel, LinearResampler, CATMULL_ROM_A};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Channel-major image with real intensities, nominally in `[0, 1]`.
///
/// Values are never clamped here; clamping happens only when writing files.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from `channels` stacked `height × width` planes.
    pub fn from_planes(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be non-zero"));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape("image", &[channels, height, width], &[data.len()]));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image intensity at index {bad}")));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Interprets a `[C, H, W]` or `[H, W]` tensor as an image.
    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        match *tensor.dims() {
            [c, h, w] => Image::from_planes(h, w, c, tensor.data().to_vec()),
            [h, w] => Image::from_planes(h, w, 1, tensor.data().to_vec()),
            ref other => Err(Error::invalid(format!("tensor dims {other:?} are not an image"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone())
            .expect("image data length matches its dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &Image, context: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                context,
                &[self.channels, self.height, self.width],
                &[other.channels, other.height, other.width],
            ))
        }
    }

    /// Euclidean distance between two images of the same shape.
    pub fn l2_distance(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other, "l2 distance")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Largest absolute pixel difference.
    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other, "max abs diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}
