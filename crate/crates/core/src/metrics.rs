//! Image quality scores and the depth-warped multi-view consistency protocol.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NumericsError, Padding, Real, Var};
use crate::raster::Image;
use crate::render::Camera;
use crate::style::gaussian_kernel;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Occlusion tolerance as a fraction of the camera depth range.
pub const OCCLUSION_FRACTION: f64 = 0.05;
pub const SHORT_RANGE_GAP: usize = 1;
pub const LONG_RANGE_GAP: usize = 5;

fn same_extent(a: &Image, b: &Image) -> Result<()> {
    if !a.same_extent(b) {
        return Err(Error::invalid(format!(
            "extent mismatch: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_extent(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.data().len().max(1) as f64)
}

/// Peak signal-to-noise ratio for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Mean local SSIM over all channels of `[C,H,W]` nodes, Gaussian window,
/// windows fully inside the image only.
pub fn ssim_graph<T: Real>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var, NumericsError> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] < SSIM_WINDOW || s[2] < SSIM_WINDOW {
        return Err(NumericsError::InvalidArgument(format!(
            "ssim needs [C,H,W] with H,W >= {SSIM_WINDOW}, got {s:?}"
        )));
    }
    let k: Arc<[T]> = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
        .expect("odd window")
        .into_iter()
        .map(T::lit)
        .collect();
    let blur = |g: &mut Graph<T>, v: Var| -> Result<Var, NumericsError> {
        let r = g.conv1d_axis(v, k.clone(), 1, Padding::Valid)?;
        g.conv1d_axis(r, k.clone(), 2, Padding::Valid)
    };
    let c1 = T::lit(SSIM_K1 * SSIM_K1);
    let c2 = T::lit(SSIM_K2 * SSIM_K2);
    let mx = blur(g, x)?;
    let my = blur(g, y)?;
    let xx = g.square(x)?;
    let yy = g.square(y)?;
    let xy = g.mul(x, y)?;
    let exx = blur(g, xx)?;
    let eyy = blur(g, yy)?;
    let exy = blur(g, xy)?;
    let mx2 = g.square(mx)?;
    let my2 = g.square(my)?;
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vy = g.sub(eyy, my2)?;
    let cov = g.sub(exy, mxy)?;
    let a = g.scale(mxy, T::lit(2.0))?;
    let a = g.add_scalar(a, c1)?;
    let b = g.scale(cov, T::lit(2.0))?;
    let b = g.add_scalar(b, c2)?;
    let num = g.mul(a, b)?;
    let c = g.add(mx2, my2)?;
    let c = g.add_scalar(c, c1)?;
    let d = g.add(vx, vy)?;
    let d = g.add_scalar(d, c2)?;
    let den = g.mul(c, d)?;
    let map = g.div(num, den)?;
    g.mean(map)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_extent(a, b)?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    let mut g = Graph::<f64>::new();
    let x = g.constant(a.to_chw())?;
    let y = g.constant(b.to_chw())?;
    let s = ssim_graph(&mut g, x, y)?;
    Ok(g.value(s).item())
}

/// Source view resampled into the target view.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub image: Image,
    /// Row-major, one flag per target pixel.
    pub mask: Vec<bool>,
    pub valid: usize,
}

struct Pinhole {
    rot: Matrix3<f64>,
    origin: Vector3<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl Pinhole {
    fn new(c: &Camera) -> Self {
        Self {
            rot: c.rotation().cast(),
            origin: c.origin().cast(),
            fx: c.fx as f64,
            fy: c.fy as f64,
            cx: c.cx as f64,
            cy: c.cy as f64,
        }
    }

    fn point_at(&self, u: usize, v: usize, dist: f64) -> Vector3<f64> {
        let local = Vector3::new((u as f64 + 0.5 - self.cx) / self.fx, -(v as f64 + 0.5 - self.cy) / self.fy, -1.0);
        self.origin + (self.rot * local).normalize() * dist
    }

    /// Continuous pixel coordinates and distance from the camera centre.
    fn project(&self, p: Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.rot.transpose() * (p - self.origin);
        let z = -c.z;
        if z <= 1e-9 {
            return None;
        }
        Some((self.fx * c.x / z + self.cx, -self.fy * c.y / z + self.cy, c.norm()))
    }
}

/// Sub-pixel slack when deciding whether a coordinate hits a pixel centre.
const SNAP: f64 = 1e-4;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= SNAP {
        r
    } else {
        v
    }
}

/// Resample `source` (seen by `source_cam`) into `target_cam` using the
/// target's per-pixel ray distance `target_depth`. A pixel is valid when its
/// reprojection lands inside the source and every contributing bilinear tap
/// of `source_depth` agrees with the reprojected distance within
/// `0.05 * (far - near)` of the target camera.
pub fn warp(source: &Image, source_depth: &Image, source_cam: &Camera, target_depth: &Image, target_cam: &Camera) -> Result<WarpResult> {
    if source_depth.channels() != 1 || target_depth.channels() != 1 {
        return Err(Error::invalid("depth maps must have one channel"));
    }
    if (source.width(), source.height()) != (source_cam.width, source_cam.height)
        || (source_depth.width(), source_depth.height()) != (source_cam.width, source_cam.height)
        || (target_depth.width(), target_depth.height()) != (target_cam.width, target_cam.height)
    {
        return Err(Error::invalid("image and camera extents disagree"));
    }
    let (src, dst) = (Pinhole::new(source_cam), Pinhole::new(target_cam));
    let tau = OCCLUSION_FRACTION * (target_cam.far - target_cam.near) as f64;
    let (tw, th) = (target_cam.width, target_cam.height);
    let (sw, sh, ch) = (source.width(), source.height(), source.channels());
    let mut data = vec![0.0f32; tw * th * ch];
    let mut mask = vec![false; tw * th];
    for v in 0..th {
        for u in 0..tw {
            let d = target_depth.pixel(u, v)[0] as f64;
            if !d.is_finite() || d <= 0.0 {
                continue;
            }
            let Some((x, y, dist)) = src.project(dst.point_at(u, v, d)) else {
                continue;
            };
            let (fx, fy) = (snap(x - 0.5), snap(y - 0.5));
            if fx < 0.0 || fy < 0.0 || fx > (sw - 1) as f64 || fy > (sh - 1) as f64 {
                continue;
            }
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            let taps = [
                (x0, y0, (1.0 - ax) * (1.0 - ay)),
                (x0 + 1, y0, ax * (1.0 - ay)),
                (x0, y0 + 1, (1.0 - ax) * ay),
                (x0 + 1, y0 + 1, ax * ay),
            ];
            let mut acc = vec![0.0f64; ch];
            let mut ok = true;
            for &(tx, ty, w) in &taps {
                if w <= 0.0 {
                    continue;
                }
                if (source_depth.pixel(tx, ty)[0] as f64 - dist).abs() > tau {
                    ok = false;
                    break;
                }
                for (a, &s) in acc.iter_mut().zip(source.pixel(tx, ty)) {
                    *a += w * s as f64;
                }
            }
            if !ok {
                continue;
            }
            mask[v * tw + u] = true;
            let o = (v * tw + u) * ch;
            for c in 0..ch {
                data[o + c] = acc[c] as f32;
            }
        }
    }
    let valid = mask.iter().filter(|&&m| m).count();
    Ok(WarpResult {
        image: Image::new(tw, th, ch, data)?,
        mask,
        valid,
    })
}

/// Pluggable masked image distance.
pub trait ImageDistance {
    fn distance(&self, a: &Image, b: &Image, mask: &[bool]) -> Result<f64>;
}

/// Root mean squared difference over masked pixels and all channels.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaskedRmse;

impl ImageDistance for MaskedRmse {
    fn distance(&self, a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
        same_extent(a, b)?;
        if mask.len() != a.width() * a.height() {
            return Err(Error::invalid("mask length differs from pixel count"));
        }
        let ch = a.channels();
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for c in 0..ch {
                let d = a.data()[i * ch + c] as f64 - b.data()[i * ch + c] as f64;
                sum += d * d;
            }
            n += ch;
        }
        if n == 0 {
            return Err(Error::invalid("empty mask"));
        }
        Ok((sum / n as f64).sqrt())
    }
}

/// One view with its depth and camera.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub image: &'a Image,
    pub depth: &'a Image,
    pub camera: &'a Camera,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PairError {
    Measured { error: f64, valid: usize },
    NoOverlap,
}

impl PairError {
    pub fn value(&self) -> Option<f64> {
        match self {
            PairError::Measured { error, .. } => Some(*error),
            PairError::NoOverlap => None,
        }
    }
}

/// Distance between view `i` and view `j` warped into `i`.
pub fn consistency_error(target: View, source: View, dist: &dyn ImageDistance) -> Result<PairError> {
    let w = warp(source.image, source.depth, source.camera, target.depth, target.camera)?;
    if w.valid == 0 {
        return Ok(PairError::NoOverlap);
    }
    Ok(PairError::Measured {
        error: dist.distance(target.image, &w.image, &w.mask)?,
        valid: w.valid,
    })
}

/// Mean of both warp directions, so a pair's score does not depend on order.
pub fn symmetric_pair_error(a: View, b: View, dist: &dyn ImageDistance) -> Result<PairError> {
    let ab = consistency_error(a, b, dist)?;
    let ba = consistency_error(b, a, dist)?;
    Ok(match (ab, ba) {
        (PairError::Measured { error: e1, valid: v1 }, PairError::Measured { error: e2, valid: v2 }) => PairError::Measured {
            error: 0.5 * (e1 + e2),
            valid: v1 + v2,
        },
        (m @ PairError::Measured { .. }, PairError::NoOverlap) | (PairError::NoOverlap, m @ PairError::Measured { .. }) => m,
        _ => PairError::NoOverlap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeStats {
    pub gap: usize,
    /// Mean over pairs with overlap; NaN when there are none.
    pub mean: f64,
    pub count: usize,
    pub no_overlap: usize,
    pub pairs: Vec<PairError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub short_range: RangeStats,
    pub long_range: RangeStats,
}

fn range_stats(views: &[View], gap: usize, dist: &dyn ImageDistance) -> Result<RangeStats> {
    let pairs: Vec<PairError> = (0..views.len() - gap)
        .map(|i| symmetric_pair_error(views[i], views[i + gap], dist))
        .collect::<Result<_>>()?;
    let mut vals: Vec<f64> = pairs.iter().filter_map(PairError::value).collect();
    // summation order independent of frame order
    vals.sort_by(f64::total_cmp);
    let count = vals.len();
    let mean = if count == 0 { f64::NAN } else { vals.iter().sum::<f64>() / count as f64 };
    Ok(RangeStats {
        gap,
        mean,
        count,
        no_overlap: pairs.len() - count,
        pairs,
    })
}

/// Adjacent-pair and gap-5 consistency averages over a frame sequence.
pub fn consistency_protocol(views: &[View], dist: &dyn ImageDistance) -> Result<ProtocolResult> {
    if views.len() <= LONG_RANGE_GAP {
        return Err(Error::invalid(format!(
            "consistency protocol needs at least {} frames, got {}",
            LONG_RANGE_GAP + 1,
            views.len()
        )));
    }
    Ok(ProtocolResult {
        short_range: range_stats(views, SHORT_RANGE_GAP, dist)?,
        long_range: range_stats(views, LONG_RANGE_GAP, dist)?,
    })
}

pub const PROTOCOL_CSV_HEADER: &str = "scene,pair_type,mean,count";

/// `scene,pair_type,mean,count` rows, one per range.
pub fn protocol_csv(rows: &[(&str, &ProtocolResult)]) -> String {
    let mut s = String::from(PROTOCOL_CSV_HEADER);
    s.push('\n');
    for (scene, r) in rows {
        for (kind, st) in [("short", &r.short_range), ("long", &r.long_range)] {
            let _ = writeln!(s, "{scene},{kind},{:.8},{}", st.mean, st.count);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, c, |_, _, _| rng.random())
    }

    #[test]
    fn psnr_values() {
        let a = noise(8, 8, 3, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &noise(8, 7, 3, 1)).is_err());
    }

    /// Per-window formula with explicit loops.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA).unwrap();
        let (c1, c2) = ((SSIM_K1 * SSIM_K1), (SSIM_K2 * SSIM_K2));
        let (w, h, ch) = (a.width(), a.height(), a.channels());
        let mut total = 0.0;
        let mut n = 0;
        for c in 0..ch {
            for y0 in 0..=h - SSIM_WINDOW {
                for x0 in 0..=w - SSIM_WINDOW {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let wt = k[i] * k[j];
                            let p = a.pixel(x0 + j, y0 + i)[c] as f64;
                            let q = b.pixel(x0 + j, y0 + i)[c] as f64;
                            mx += wt * p;
                            my += wt * q;
                            sxx += wt * p * p;
                            syy += wt * q * q;
                            sxy += wt * p * q;
                        }
                    }
                    let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let a = noise(17, 14, 3, 2);
        let b = Image::from_fn(17, 14, 3, |x, y, c| 0.5 * a.pixel(x, y)[c] + 0.02 * (x + y) as f32);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-5);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg).unwrap() < 1.0);
        assert!(ssim(&noise(10, 20, 1, 1), &noise(10, 20, 1, 2)).is_err());
    }

    fn cam(eye: [f32; 3], w: usize, h: usize) -> Camera {
        let e = Vector3::from(eye);
        Camera::look_at(e, e - Vector3::new(0.0, 0.0, 1.0), Vector3::y(), w, h, 60f32.to_radians(), 0.5, 5.0).unwrap()
    }

    /// Ray distances to the plane `z = plane_z` seen by a camera looking down -z.
    fn plane_depth(c: &Camera, plane_z: f32) -> Image {
        let z = c.origin().z - plane_z;
        Image::from_fn(c.width, c.height, 1, |u, v, _| {
            let r = c.pixel_ray(u, v);
            z / -r.dir.z
        })
    }

    #[test]
    fn identity_warp() {
        let c = Camera::orbit(30.0, 20.0, 2.0, Vector3::zeros(), 50.0, 24, 20, 1.0, 3.0).unwrap();
        let img = noise(24, 20, 3, 3);
        let mut depth = noise(24, 20, 1, 4).map(|v| 1.5 + v);
        depth.pixel_mut(3, 3)[0] = 2.9;
        let w = warp(&img, &depth, &c, &depth, &c).unwrap();
        assert!(w.mask.iter().all(|&m| m));
        assert_eq!(w.valid, 24 * 20);
        for (a, b) in w.image.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn translation_over_plane_is_uniform_shift() {
        let (w, h) = (40, 30);
        let a = cam([0.0, 0.0, 2.0], w, h);
        let t = 0.1f32;
        let b = cam([t, 0.0, 2.0], w, h);
        let plane = 0.0;
        // expected disparity fx * t / z
        let shift = a.fx * t / 2.0;
        let img = Image::from_fn(w, h, 3, |x, y, c| ((x * 7 + y * 3 + c * 11) % 17) as f32 / 16.0);
        let res = warp(&img, &plane_depth(&b, plane), &b, &plane_depth(&a, plane), &a).unwrap();
        for v in 0..h {
            for u in 0..w {
                let sx = u as f32 - shift;
                if sx < 0.0 || sx > (w - 1) as f32 {
                    assert!(!res.mask[v * w + u]);
                    continue;
                }
                assert!(res.mask[v * w + u], "({u},{v})");
                let x0 = sx.floor() as usize;
                let f = sx - x0 as f32;
                for c in 0..3 {
                    let want = if f < 1e-4 {
                        img.pixel(x0, v)[c]
                    } else {
                        (1.0 - f) * img.pixel(x0, v)[c] + f * img.pixel(x0 + 1, v)[c]
                    };
                    assert!((res.image.pixel(u, v)[c] - want).abs() < 1e-3, "({u},{v},{c})");
                }
            }
        }
    }

    #[test]
    fn points_behind_source_are_masked() {
        let a = cam([0.0, 0.0, 2.0], 16, 16);
        // source camera sits between the target and the plane, facing away
        let mut m = Matrix4::identity();
        m[(0, 0)] = -1.0;
        m[(2, 2)] = -1.0;
        m[(2, 3)] = 1.0;
        let b = Camera::new(16, 16, a.fx, a.fy, a.cx, a.cy, m, 0.5, 5.0).unwrap();
        let img = noise(16, 16, 3, 5);
        let res = warp(&img, &Image::filled(16, 16, &[1.0]), &b, &plane_depth(&a, 0.0), &a).unwrap();
        assert_eq!(res.valid, 0);
        assert!(matches!(
            consistency_error(
                View { image: &img, depth: &plane_depth(&a, 0.0), camera: &a },
                View { image: &img, depth: &Image::filled(16, 16, &[1.0]), camera: &b },
                &MaskedRmse
            )
            .unwrap(),
            PairError::NoOverlap
        ));
    }

    #[test]
    fn occluders_fail_depth_test() {
        let a = cam([0.0, 0.0, 2.0], 16, 16);
        let img = noise(16, 16, 3, 6);
        let d = plane_depth(&a, 0.0);
        let mut src_d = d.clone();
        src_d.pixel_mut(8, 8)[0] = 0.6;
        let res = warp(&img, &src_d, &a, &d, &a).unwrap();
        assert!(!res.mask[8 * 16 + 8]);
        assert_eq!(res.valid, 255);
    }

    #[test]
    fn masked_rmse_matches_loop() {
        let a = noise(9, 7, 3, 7);
        let b = noise(9, 7, 3, 8);
        let mask: Vec<bool> = (0..63).map(|i| i % 3 != 0).collect();
        let got = MaskedRmse.distance(&a, &b, &mask).unwrap();
        let mut s = 0.0f64;
        let mut n = 0;
        for y in 0..7 {
            for x in 0..9 {
                if mask[y * 9 + x] {
                    for c in 0..3 {
                        s += ((a.pixel(x, y)[c] - b.pixel(x, y)[c]) as f64).powi(2);
                        n += 1;
                    }
                }
            }
        }
        assert!((got - (s / n as f64).sqrt()).abs() < 1e-12);
        assert!(MaskedRmse.distance(&a, &b, &[false; 63]).is_err());
    }

    fn orbit_views(n: usize) -> (Vec<Camera>, Vec<Image>, Vec<Image>) {
        // a textured plane through the origin facing +z, seen from a small arc
        let cams: Vec<Camera> = (0..n)
            .map(|i| Camera::orbit(-10.0 + 2.0 * i as f32, 0.0, 2.0, Vector3::zeros(), 50.0, 32, 32, 1.0, 3.0).unwrap())
            .collect();
        let tex = |p: Vector3<f32>, c: usize| 0.5 + 0.4 * ((p.x * 9.0 + c as f32).sin() * (p.y * 7.0).cos());
        let mut imgs = Vec::new();
        let mut depths = Vec::new();
        for c in &cams {
            let mut img = Image::filled(32, 32, &[0.0; 3]);
            let mut dep = Image::filled(32, 32, &[0.0]);
            for v in 0..32 {
                for u in 0..32 {
                    let r = c.pixel_ray(u, v);
                    let t = -r.origin.z / r.dir.z;
                    dep.pixel_mut(u, v)[0] = t;
                    let p = r.at(t);
                    for ch in 0..3 {
                        img.pixel_mut(u, v)[ch] = tex(p, ch);
                    }
                }
            }
            imgs.push(img);
            depths.push(dep);
        }
        (cams, imgs, depths)
    }

    #[test]
    fn protocol_pair_counts_and_reversal() {
        let (cams, imgs, depths) = orbit_views(20);
        let views: Vec<View> = (0..20)
            .map(|i| View {
                image: &imgs[i],
                depth: &depths[i],
                camera: &cams[i],
            })
            .collect();
        let r = consistency_protocol(&views, &MaskedRmse).unwrap();
        assert_eq!(r.short_range.pairs.len(), 19);
        assert_eq!(r.long_range.pairs.len(), 15);
        assert_eq!(r.short_range.count, 19);
        assert!(r.short_range.mean < 0.02, "{}", r.short_range.mean);
        let rev: Vec<View> = views.iter().rev().copied().collect();
        let r2 = consistency_protocol(&rev, &MaskedRmse).unwrap();
        assert_eq!(r.short_range.mean, r2.short_range.mean);
        assert_eq!(r.long_range.mean, r2.long_range.mean);
        assert!(consistency_protocol(&views[..5], &MaskedRmse).is_err());
        let csv = protocol_csv(&[("plane", &r)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], PROTOCOL_CSV_HEADER);
        assert!(lines[1].starts_with("plane,short,") && lines[1].ends_with(",19"));
        assert!(lines[2].starts_with("plane,long,") && lines[2].ends_with(",15"));
    }

    #[test]
    fn noise_source_scores_worse() {
        let (cams, imgs, depths) = orbit_views(2);
        let v0 = View { image: &imgs[0], depth: &depths[0], camera: &cams[0] };
        let v1 = View { image: &imgs[1], depth: &depths[1], camera: &cams[1] };
        let good = consistency_error(v0, v1, &MaskedRmse).unwrap().value().unwrap();
        let n = noise(32, 32, 3, 9);
        let bad = consistency_error(v0, View { image: &n, ..v1 }, &MaskedRmse).unwrap().value().unwrap();
        assert!(bad > 10.0 * good, "{bad} vs {good}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn error_is_non_negative(seed in 0u64..1000) {
            let (cams, imgs, depths) = orbit_views(2);
            let n = noise(32, 32, 3, seed);
            let e = consistency_error(
                View { image: &imgs[0], depth: &depths[0], camera: &cams[0] },
                View { image: &n, depth: &depths[1], camera: &cams[1] },
                &MaskedRmse,
            ).unwrap().value().unwrap();
            prop_assert!(e >= 0.0);
        }

        #[test]
        fn psnr_is_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let (a, b) = (noise(6, 5, 3, s1), noise(6, 5, 3, s2));
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }
}
