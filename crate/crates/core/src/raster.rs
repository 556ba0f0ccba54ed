//! Interleaved float images and conversion to channel-major tensors.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Row-major, channel-interleaved image with values nominally in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: &[f32]) -> Self {
        let data = value.iter().copied().cycle().take(width * height * value.len()).collect();
        Self {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_extent(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// `[C,H,W]` tensor.
    pub fn to_chw<T: Real>(&self) -> Tensor<T> {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn([c, h, w], |i| {
            let ch = i / (h * w);
            let rem = i % (h * w);
            T::lit(self.data[rem * c + ch] as f64)
        })
    }

    pub fn from_chw<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::invalid(format!("expected [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = t.data();
        Ok(Self::from_fn(w, h, c, |x, y, ch| d[(ch * h + y) * w + x].to_f32().unwrap_or(f32::NAN)))
    }

    /// Rectangular crop.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(w, h, self.channels, |x, y, c| self.pixel(x0 + x, y0 + y)[c]))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_round_trip() {
        let img = Image::from_fn(3, 2, 3, |x, y, c| (x * 100 + y * 10 + c) as f32);
        let t = img.to_chw::<f32>();
        assert_eq!(t.shape(), &[3, 2, 3]);
        // channel 1, row 1, column 2
        assert_eq!(t.data()[(2 + 1) * 3 + 2], 211.0);
        assert_eq!(Image::from_chw(&t).unwrap(), img);
    }

    #[test]
    fn crop_bounds() {
        let img = Image::from_fn(4, 4, 1, |x, y, _| (x + 4 * y) as f32);
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.data(), &[9.0, 10.0, 13.0, 14.0]);
        assert!(img.crop(3, 0, 2, 1).is_err());
    }
}
