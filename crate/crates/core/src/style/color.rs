//! Full-range BT.601 YUV conversion and separable Gaussian smoothing.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Graph, NumericsError, Padding, Real, Tensor, Var};
use crate::raster::Image;

const KR: f64 = 0.299;
const KB: f64 = 0.114;

/// RGB to YUV, U and V centered on zero. Row-major 3x3.
pub fn rgb_to_yuv_matrix() -> [[f64; 3]; 3] {
    let kg = 1.0 - KR - KB;
    let su = 2.0 * (1.0 - KB);
    let sv = 2.0 * (1.0 - KR);
    [
        [KR, kg, KB],
        [-KR / su, -kg / su, (1.0 - KB) / su],
        [(1.0 - KR) / sv, -kg / sv, -KB / sv],
    ]
}

/// Exact inverse of [`rgb_to_yuv_matrix`].
pub fn yuv_to_rgb_matrix() -> [[f64; 3]; 3] {
    let kg = 1.0 - KR - KB;
    let su = 2.0 * (1.0 - KB);
    let sv = 2.0 * (1.0 - KR);
    [
        [1.0, 0.0, sv],
        [1.0, -KB * su / kg, -KR * sv / kg],
        [1.0, su, 0.0],
    ]
}

fn apply_matrix(img: &Image, m: [[f64; 3]; 3]) -> Result<Image> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!("color conversion needs 3 channels, got {}", img.channels())));
    }
    let data = img
        .data()
        .chunks(3)
        .flat_map(|p| {
            let p = [p[0] as f64, p[1] as f64, p[2] as f64];
            m.map(|row| (row[0] * p[0] + row[1] * p[1] + row[2] * p[2]) as f32)
        })
        .collect();
    Image::new(img.width(), img.height(), 3, data)
}

pub fn rgb_to_yuv(img: &Image) -> Result<Image> {
    apply_matrix(img, rgb_to_yuv_matrix())
}

pub fn yuv_to_rgb(img: &Image) -> Result<Image> {
    apply_matrix(img, yuv_to_rgb_matrix())
}

/// Per-pixel color transform of a `[3,H,W]` node.
pub fn color_transform_graph<T: Real>(g: &mut Graph<T>, x: Var, m: [[f64; 3]; 3]) -> Result<Var, NumericsError> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(NumericsError::ShapeMismatch {
            op: "color_transform",
            detail: format!("expected [3,H,W], got {s:?}"),
        });
    }
    let flat = g.reshape(x, &[3, s[1] * s[2]])?;
    let mv = g.constant(Tensor::new([3, 3], m.iter().flatten().map(|&v| T::lit(v)).collect())?)?;
    let out = g.matmul(mv, flat)?;
    g.reshape(out, &s)
}

/// Normalized sampled Gaussian of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size % 2 == 0 {
        return Err(Error::invalid(format!("Gaussian kernel size {size} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("Gaussian sigma {sigma} must be positive")));
    }
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    Ok(k.into_iter().map(|v| v / s).collect())
}

/// Kernel length and sigma for smoothing an image whose long side is
/// `long_side`: sigma 5 at 512 pixels, scaled linearly, kernel spanning
/// about two sigma each way.
pub fn blur_params_for(long_side: usize) -> (usize, f64) {
    let sigma = 5.0 * long_side as f64 / 512.0;
    let size = 2 * (2.0 * sigma).round() as usize + 1;
    (size, sigma)
}

/// Separable blur of a `[C,H,W]` node with mirrored borders.
pub fn gaussian_blur_graph<T: Real>(g: &mut Graph<T>, x: Var, kernel: &[f64]) -> Result<Var, NumericsError> {
    let k: Arc<[T]> = kernel.iter().map(|&v| T::lit(v)).collect();
    let rows = g.conv1d_axis(x, k.clone(), 1, Padding::Reflect)?;
    g.conv1d_axis(rows, k, 2, Padding::Reflect)
}

pub fn gaussian_blur(img: &Image, size: usize, sigma: f64) -> Result<Image> {
    let k = gaussian_kernel(size, sigma)?;
    let mut g = Graph::<f64>::new();
    let x = g.constant(img.to_chw())?;
    let y = gaussian_blur_graph(&mut g, x, &k)?;
    Image::from_chw(g.value(y))
}
