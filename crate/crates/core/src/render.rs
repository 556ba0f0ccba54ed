//! Cameras, ray marching through the voxel box, and alpha compositing.
//!
//! Cameras follow the OpenGL convention: the camera looks down its local
//! `-z` axis with `+y` up, while pixel rows grow downwards. Pixel `(u, v)`
//! covers `[u, u+1) x [v, v+1)` and its center is at `(u + 0.5, v + 0.5)`.
//! Depth everywhere means distance along the unit-length ray.

use std::sync::Arc;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::field::{alpha_graph, direction_embedding_len, embed_direction_into, VoxelField, DEFAULT_DIR_FREQS};
use crate::numerics::{Graph, NumericsError, Real, Tensor, Var};
use crate::raster::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f32>,
    pub dir: Vector3<f32>,
}

impl Ray {
    pub fn at(&self, t: f32) -> Vector3<f32> {
        self.origin + self.dir * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub cam_to_world: Matrix4<f32>,
    pub near: f32,
    pub far: f32,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: usize,
        height: usize,
        fx: f32,
        fy: f32,
        cx: f32,
        cy: f32,
        cam_to_world: Matrix4<f32>,
        near: f32,
        far: f32,
    ) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            cam_to_world,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera with empty image"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invalid("camera intrinsics must be finite with positive focal length"));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::invalid(format!("need 0 < near < far, got {} / {}", self.near, self.far)));
        }
        if self.cam_to_world.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite camera pose"));
        }
        let r = self.rotation();
        let gram = r.transpose() * r;
        if (gram - Matrix3::identity()).abs().max() > 1e-5 || (r.determinant() - 1.0).abs() > 1e-4 {
            return Err(Error::invalid("camera rotation is not orthonormal"));
        }
        Ok(())
    }

    /// Pinhole camera at `eye` looking at `target`; `fov_y` in radians.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f32>,
        target: Vector3<f32>,
        up: Vector3<f32>,
        width: usize,
        height: usize,
        fov_y: f32,
        near: f32,
        far: f32,
    ) -> Result<Self> {
        let back = (eye - target).try_normalize(1e-8).ok_or_else(|| Error::invalid("eye equals target"))?;
        let right = up
            .cross(&back)
            .try_normalize(1e-8)
            .ok_or_else(|| Error::invalid("up vector parallel to view direction"))?;
        let true_up = back.cross(&right);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        m.fixed_view_mut::<3, 1>(0, 1).copy_from(&true_up);
        m.fixed_view_mut::<3, 1>(0, 2).copy_from(&back);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        if !(fov_y > 0.0 && fov_y < std::f32::consts::PI) {
            return Err(Error::invalid(format!("field of view {fov_y} rad out of range")));
        }
        let f = 0.5 * height as f32 / (0.5 * fov_y).tan();
        Self::new(width, height, f, f, 0.5 * width as f32, 0.5 * height as f32, m, near, far)
    }

    /// Camera on a sphere around `target`, `+y` up. Yaw turns about `y`
    /// starting from `+z`; pitch lifts towards `+y`. Angles in degrees.
    #[allow(clippy::too_many_arguments)]
    pub fn orbit(
        yaw_deg: f32,
        pitch_deg: f32,
        radius: f32,
        target: Vector3<f32>,
        fov_y_deg: f32,
        width: usize,
        height: usize,
        near: f32,
        far: f32,
    ) -> Result<Self> {
        if !(pitch_deg.abs() < 90.0) || !(radius > 0.0) || !yaw_deg.is_finite() {
            return Err(Error::invalid(format!(
                "orbit yaw {yaw_deg} pitch {pitch_deg} radius {radius} out of range"
            )));
        }
        let (yaw, pitch) = ((yaw_deg as f64).to_radians(), (pitch_deg as f64).to_radians());
        let offset = Vector3::new(
            (pitch.cos() * yaw.sin()) as f32,
            pitch.sin() as f32,
            (pitch.cos() * yaw.cos()) as f32,
        ) * radius;
        Self::look_at(
            target + offset,
            target,
            Vector3::y(),
            width,
            height,
            fov_y_deg.to_radians(),
            near,
            far,
        )
    }

    pub fn rotation(&self) -> Matrix3<f32> {
        self.cam_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn origin(&self) -> Vector3<f32> {
        self.cam_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Ray through continuous image coordinates `(x, y)`.
    pub fn ray_through(&self, x: f32, y: f32) -> Ray {
        let local = Vector3::new((x - self.cx) / self.fx, -(y - self.cy) / self.fy, -1.0);
        Ray {
            origin: self.origin(),
            dir: (self.rotation() * local).normalize(),
        }
    }

    pub fn pixel_ray(&self, u: usize, v: usize) -> Ray {
        self.ray_through(u as f32 + 0.5, v as f32 + 0.5)
    }

    /// World point into camera coordinates.
    pub fn to_camera(&self, p: Vector3<f32>) -> Vector3<f32> {
        self.rotation().transpose() * (p - self.origin())
    }

    /// Continuous image coordinates and distance from the camera center, or
    /// `None` for points on or behind the image plane.
    pub fn project(&self, p: Vector3<f32>) -> Option<(f32, f32, f32)> {
        let c = self.to_camera(p);
        let z = -c.z;
        if z <= 1e-6 {
            return None;
        }
        Some((self.fx * c.x / z + self.cx, -self.fy * c.y / z + self.cy, c.norm()))
    }
}

/// Rays for a set of `(u, v)` pixels, row-major order preserved.
pub fn gen_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|&(u, v)| {
            if u >= camera.width || v >= camera.height {
                Err(Error::invalid(format!(
                    "pixel ({u},{v}) outside {}x{} image",
                    camera.width, camera.height
                )))
            } else {
                Ok(camera.pixel_ray(u, v))
            }
        })
        .collect()
}

/// Slab test: parametric entry and exit of `ray` through the box.
pub fn ray_box(ray: &Ray, bbox_min: [f32; 3], bbox_max: [f32; 3]) -> Option<(f32, f32)> {
    let (mut t0, mut t1) = (f32::NEG_INFINITY, f32::INFINITY);
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.dir[a]);
        if d.abs() < 1e-12 {
            if o < bbox_min[a] || o > bbox_max[a] {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((bbox_min[a] - o) / d, (bbox_max[a] - o) / d);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Sample depths along one ray: uniform `step` spacing starting at the
/// entry of `[near, far]` clipped to the box. Every interval is `step` long.
pub fn sample_points(ray: &Ray, near: f32, far: f32, bbox_min: [f32; 3], bbox_max: [f32; 3], step: f32) -> Result<Vec<f32>> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("sampling step {step} must be positive")));
    }
    let Some((a, b)) = ray_box(ray, bbox_min, bbox_max) else {
        return Ok(Vec::new());
    };
    let (t0, t1) = (a.max(near), b.min(far));
    if t1 <= t0 {
        return Ok(Vec::new());
    }
    let count = ((t1 - t0) / step).ceil() as usize;
    Ok((0..count).map(|i| t0 + i as f32 * step).collect())
}

/// Samples for a batch of rays, flattened; ray `r` owns
/// `offsets[r]..offsets[r+1]`.
#[derive(Clone, Debug, Default)]
pub struct RaySamples {
    pub dirs: Vec<[f32; 3]>,
    pub offsets: Vec<usize>,
    pub points: Vec<[f32; 3]>,
    pub t: Vec<f32>,
    pub delta: Vec<f32>,
}

impl RaySamples {
    pub fn build(rays: &[Ray], near: f32, far: f32, field: &VoxelField) -> Result<Self> {
        let step = field.step_size();
        let mut s = RaySamples {
            offsets: vec![0],
            ..Default::default()
        };
        for ray in rays {
            let ts = sample_points(ray, near, far, field.bbox_min(), field.bbox_max(), step)?;
            for &t in &ts {
                let p = ray.at(t);
                s.points.push([p.x, p.y, p.z]);
                s.t.push(t);
                s.delta.push(step);
            }
            s.dirs.push([ray.dir.x, ray.dir.y, ray.dir.z]);
            s.offsets.push(s.points.len());
        }
        Ok(s)
    }

    pub fn num_rays(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_samples(&self) -> usize {
        self.points.len()
    }

    /// Ray index of every sample.
    pub fn ray_index(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_samples());
        for (r, w) in self.offsets.windows(2).enumerate() {
            out.extend(std::iter::repeat_n(r, w[1] - w[0]));
        }
        out
    }
}

/// Result of compositing one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub rgb: [f32; 3],
    pub t_last: f32,
    pub weights: Vec<f32>,
}

/// `C = sum_i T_i a_i c_i + T_{K+1} c_bg`, `T_i = prod_{j<i} (1 - a_j)`.
pub fn composite(colors: &[[f32; 3]], alphas: &[f32], background: [f32; 3]) -> Result<Composite> {
    if colors.len() != alphas.len() {
        return Err(Error::invalid(format!("{} colors vs {} alphas", colors.len(), alphas.len())));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::invalid(format!("alpha {a} outside [0,1]")));
    }
    let mut trans = 1.0f32;
    let mut rgb = [0.0f32; 3];
    let mut weights = Vec::with_capacity(alphas.len());
    for (c, &a) in colors.iter().zip(alphas) {
        let w = trans * a;
        for k in 0..3 {
            rgb[k] += w * c[k];
        }
        weights.push(w);
        trans *= 1.0 - a;
    }
    for k in 0..3 {
        rgb[k] += trans * background[k];
    }
    Ok(Composite {
        rgb,
        t_last: trans,
        weights,
    })
}

pub const DEPTH_EPS: f32 = 1e-6;

/// Weight-normalized expected depth; `far` when the ray hits nothing.
pub fn expected_depth(weights: &[f32], t: &[f32], far: f32) -> f32 {
    let total: f32 = weights.iter().sum();
    if total < DEPTH_EPS {
        return far;
    }
    weights.iter().zip(t).map(|(w, t)| w * t).sum::<f32>() / total.max(DEPTH_EPS)
}

/// A color head on the graph: `[M, in_dim]` shading inputs to `[M, 3]`.
pub trait ColorHead {
    fn in_dim(&self) -> usize;
    fn shade(&self, g: &mut Graph<f32>, x: Var) -> Result<Var, NumericsError>;
}

impl ColorHead for crate::field::RgbNet<f32> {
    fn in_dim(&self) -> usize {
        crate::field::RgbNet::in_dim(self)
    }

    fn shade(&self, g: &mut Graph<f32>, x: Var) -> Result<Var, NumericsError> {
        let layers = self.mlp.bind(g, false)?;
        crate::field::RgbNet::forward(g, &layers, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub background: [f32; 3],
    /// Samples whose compositing weight is below this are not shaded.
    pub weight_threshold: f32,
    pub dir_freqs: usize,
    /// Rays per graph during inference.
    pub chunk: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [1.0; 3],
            weight_threshold: 1e-4,
            dir_freqs: DEFAULT_DIR_FREQS,
            chunk: 2048,
        }
    }
}

/// Graph nodes produced by [`render_graph`].
pub struct RenderVars {
    /// `[R, 3]` composited colors.
    pub rgb: Var,
    /// `[R]` background transmittance.
    pub t_last: Var,
    /// `[N]` compositing weights of every sample.
    pub weights: Var,
    /// `[N]` opacities.
    pub alpha: Var,
    /// Indices of the shaded samples.
    pub shaded: Arc<[usize]>,
    /// Ray segments over the shaded samples.
    pub shaded_offsets: Arc<[usize]>,
    /// `[M, 3]` colors of the shaded samples.
    pub colors: Var,
    /// `[M]` weights of the shaded samples.
    pub shaded_weights: Var,
}

/// Differentiable volume rendering of `samples` through grids bound on `g`.
/// `head` maps `[M, D + embed]` shading inputs to `[M, 3]` colors.
#[allow(clippy::too_many_arguments)]
pub fn render_graph<T: Real>(
    g: &mut Graph<T>,
    field: &VoxelField,
    density: Var,
    feature: Var,
    samples: &RaySamples,
    opts: &RenderOptions,
    head: &mut dyn FnMut(&mut Graph<T>, Var) -> Result<Var, NumericsError>,
) -> Result<RenderVars, NumericsError> {
    let n = samples.num_samples();
    let r = samples.num_rays();
    let offsets: Arc<[usize]> = samples.offsets.clone().into();
    let taps = Arc::new(field.taps::<T>(&samples.points));
    let raw = g.grid_sample(density, taps)?;
    let raw = g.reshape(raw, &[n])?;
    let delta = g.constant(Tensor::new([n], samples.delta.iter().map(|&d| T::lit(d as f64)).collect())?)?;
    let alpha = alpha_graph(g, raw, T::lit(field.act_shift() as f64), delta)?;
    let weights = g.ray_weights(alpha, offsets.clone())?;
    let t_last = g.ray_residual(alpha, offsets.clone())?;

    let threshold = T::lit(opts.weight_threshold as f64);
    let wv = g.value(weights).data();
    let mut shaded = Vec::new();
    let mut shaded_offsets = vec![0usize];
    for seg in samples.offsets.windows(2) {
        shaded.extend((seg[0]..seg[1]).filter(|&i| wv[i] >= threshold));
        shaded_offsets.push(shaded.len());
    }
    let m = shaded.len();
    let shaded: Arc<[usize]> = shaded.into();
    let shaded_offsets: Arc<[usize]> = shaded_offsets.into();

    let pts: Vec<[f32; 3]> = shaded.iter().map(|&i| samples.points[i]).collect();
    let ftaps = Arc::new(field.taps::<T>(&pts));
    let feat = g.grid_sample(feature, ftaps)?;
    let elen = direction_embedding_len(opts.dir_freqs);
    let mut emb = Vec::with_capacity(m * elen);
    let mut buf = Vec::with_capacity(elen);
    for (ri, seg) in shaded_offsets.windows(2).enumerate() {
        buf.clear();
        embed_direction_into(samples.dirs[ri], opts.dir_freqs, &mut buf);
        for _ in seg[0]..seg[1] {
            emb.extend(buf.iter().map(|&v| T::lit(v as f64)));
        }
    }
    let emb = g.constant(Tensor::new([m, elen], emb)?)?;
    let inputs = g.concat(&[feat, emb], 1)?;
    let colors = head(g, inputs)?;
    if g.shape(colors) != [m, 3] {
        return Err(NumericsError::ShapeMismatch {
            op: "render_graph",
            detail: format!("color head returned {:?}, wanted [{m}, 3]", g.shape(colors)),
        });
    }

    let w_s = g.gather_rows(weights, shaded.clone())?;
    let w_col = g.reshape(w_s, &[m, 1])?;
    let w_b = g.broadcast_to(w_col, &[m, 3])?;
    let weighted = g.mul(w_b, colors)?;
    let fg = g.segment_sum(weighted, shaded_offsets.clone())?;
    let bg = g.constant(Tensor::new([1, 3], opts.background.iter().map(|&v| T::lit(v as f64)).collect())?)?;
    let bg = g.broadcast_to(bg, &[r, 3])?;
    let tl = g.reshape(t_last, &[r, 1])?;
    let tl = g.broadcast_to(tl, &[r, 3])?;
    let bg_term = g.mul(tl, bg)?;
    let rgb = g.add(fg, bg_term)?;
    Ok(RenderVars {
        rgb,
        t_last,
        weights,
        alpha,
        shaded,
        shaded_offsets,
        colors,
        shaded_weights: w_s,
    })
}

/// Per-sample and per-ray render results. Samples that were not shaded
/// (weight below the threshold) carry color `[0, 0, 0]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderBundle {
    pub offsets: Vec<usize>,
    pub points: Vec<[f32; 3]>,
    pub t: Vec<f32>,
    pub delta: Vec<f32>,
    pub raw: Vec<f32>,
    pub alpha: Vec<f32>,
    pub trans: Vec<f32>,
    pub colors: Vec<[f32; 3]>,
    pub weights: Vec<f32>,
    pub rgb: Vec<[f32; 3]>,
    pub depth: Vec<f32>,
    pub weight_sum: Vec<f32>,
    pub t_last: Vec<f32>,
}

impl RenderBundle {
    fn append(&mut self, other: RenderBundle) {
        let base = self.points.len();
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        self.offsets.extend(other.offsets[1..].iter().map(|o| o + base));
        self.points.extend(other.points);
        self.t.extend(other.t);
        self.delta.extend(other.delta);
        self.raw.extend(other.raw);
        self.alpha.extend(other.alpha);
        self.trans.extend(other.trans);
        self.colors.extend(other.colors);
        self.weights.extend(other.weights);
        self.rgb.extend(other.rgb);
        self.depth.extend(other.depth);
        self.weight_sum.extend(other.weight_sum);
        self.t_last.extend(other.t_last);
    }
}

fn render_chunk(field: &VoxelField, head: &dyn ColorHead, rays: &[Ray], near: f32, far: f32, opts: &RenderOptions) -> Result<RenderBundle> {
    let samples = RaySamples::build(rays, near, far, field)?;
    let mut g = Graph::<f32>::new();
    let density = g.constant(field.density().clone())?;
    let feature = g.constant(field.feature().clone())?;
    let out = render_graph(&mut g, field, density, feature, &samples, opts, &mut |g, x| head.shade(g, x))?;
    let n = samples.num_samples();
    let alpha = g.value(out.alpha).data().to_vec();
    let weights = g.value(out.weights).data().to_vec();
    let mut colors = vec![[0.0f32; 3]; n];
    let cv = g.value(out.colors).data();
    for (k, &i) in out.shaded.iter().enumerate() {
        colors[i] = [cv[3 * k], cv[3 * k + 1], cv[3 * k + 2]];
    }
    let taps = field.taps::<f32>(&samples.points);
    let raw = taps
        .index
        .iter()
        .zip(&taps.weight)
        .map(|(idx, w)| (0..8).map(|k| w[k] * field.density().data()[idx[k] as usize]).sum())
        .collect();
    let mut trans = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(rays.len());
    let mut weight_sum = Vec::with_capacity(rays.len());
    for seg in samples.offsets.windows(2) {
        let mut tr = 1.0f32;
        for &a in &alpha[seg[0]..seg[1]] {
            trans.push(tr);
            tr *= 1.0 - a;
        }
        let w = &weights[seg[0]..seg[1]];
        depth.push(expected_depth(w, &samples.t[seg[0]..seg[1]], far));
        weight_sum.push(w.iter().sum());
    }
    let rgb = g.value(out.rgb).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(RenderBundle {
        offsets: samples.offsets,
        points: samples.points,
        t: samples.t,
        delta: samples.delta,
        raw,
        alpha,
        trans,
        colors,
        weights,
        rgb,
        depth,
        weight_sum,
        t_last: g.value(out.t_last).data().to_vec(),
    })
}

fn check_head(field: &VoxelField, head: &dyn ColorHead, opts: &RenderOptions) -> Result<()> {
    let want = field.feature_dim() + direction_embedding_len(opts.dir_freqs);
    if head.in_dim() != want {
        return Err(Error::invalid(format!(
            "color head takes {} inputs but the field provides {want}",
            head.in_dim()
        )));
    }
    Ok(())
}

/// Non-differentiable render of arbitrary rays, processed in chunks.
pub fn render_rays(field: &VoxelField, head: &dyn ColorHead, rays: &[Ray], near: f32, far: f32, opts: &RenderOptions) -> Result<RenderBundle> {
    check_head(field, head, opts)?;
    let mut bundle = RenderBundle {
        offsets: vec![0],
        ..Default::default()
    };
    for chunk in rays.chunks(opts.chunk.max(1)) {
        bundle.append(render_chunk(field, head, chunk, near, far, opts)?);
    }
    Ok(bundle)
}

/// Axis-aligned square patch of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRect {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl PatchRect {
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        (self.y..self.y + self.size)
            .flat_map(|v| (self.x..self.x + self.size).map(move |u| (u, v)))
            .collect()
    }

    pub fn check(&self, camera: &Camera) -> Result<()> {
        if self.size == 0 || self.x + self.size > camera.width || self.y + self.size > camera.height {
            return Err(Error::invalid(format!(
                "patch {}x{} at ({},{}) outside {}x{} image",
                self.size, self.size, self.x, self.y, camera.width, camera.height
            )));
        }
        Ok(())
    }
}

/// Rendered color and depth images.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub rgb: Image,
    pub depth: Image,
}

fn to_images(bundle: &RenderBundle, w: usize, h: usize) -> Result<Rendered> {
    let rgb = bundle.rgb.iter().flatten().copied().collect();
    Ok(Rendered {
        rgb: Image::new(w, h, 3, rgb)?,
        depth: Image::new(w, h, 1, bundle.depth.clone())?,
    })
}

pub fn render_patch(field: &VoxelField, head: &dyn ColorHead, camera: &Camera, rect: PatchRect, opts: &RenderOptions) -> Result<Rendered> {
    rect.check(camera)?;
    let rays = gen_rays(camera, &rect.pixels())?;
    let bundle = render_rays(field, head, &rays, camera.near, camera.far, opts)?;
    to_images(&bundle, rect.size, rect.size)
}

pub fn render_image(field: &VoxelField, head: &dyn ColorHead, camera: &Camera, opts: &RenderOptions) -> Result<Rendered> {
    let pixels: Vec<_> = (0..camera.height)
        .flat_map(|v| (0..camera.width).map(move |u| (u, v)))
        .collect();
    let rays = gen_rays(camera, &pixels)?;
    let bundle = render_rays(field, head, &rays, camera.near, camera.far, opts)?;
    to_images(&bundle, camera.width, camera.height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::RgbNet;
    use crate::numerics::gradcheck;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_camera() -> Camera {
        Camera::new(64, 48, 50.0, 55.0, 32.0, 24.0, Matrix4::identity(), 0.1, 10.0).unwrap()
    }

    fn random_field(res: usize, seed: u64) -> VoxelField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Tensor::from_fn([1, res, res, res], |_| rng.random_range(-4.0..6.0));
        let f = Tensor::from_fn([12, res, res, res], |_| rng.random_range(-1.0..1.0));
        VoxelField::from_parts([-0.5; 3], [0.5; 3], d, f, -1.0).unwrap()
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let cam = identity_camera();
        let r = cam.ray_through(cam.cx, cam.cy);
        assert!((r.dir - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-7);
    }

    #[test]
    fn adjacent_pixels_differ_in_x_only() {
        let cam = identity_camera();
        let local = |u: usize| {
            let r = cam.pixel_ray(u, 10);
            r.dir / -r.dir.z
        };
        let (a, b) = (local(5), local(6));
        assert!(((b.x - a.x) - 1.0 / cam.fx).abs() < 1e-6);
        assert!((b.y - a.y).abs() < 1e-7);
    }

    #[test]
    fn unproject_project_round_trip() {
        let cam = Camera::orbit(35.0, 20.0, 2.5, Vector3::zeros(), 50.0, 80, 60, 0.5, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (x, y) = (rng.random_range(0.0..80.0f32), rng.random_range(0.0..60.0f32));
            let t = rng.random_range(0.6..4.0f32);
            let ray = cam.ray_through(x, y);
            let (px, py, dist) = cam.project(ray.at(t)).unwrap();
            assert!((px - x).abs() < 1e-4 && (py - y).abs() < 1e-4, "{px},{py} vs {x},{y}");
            assert!((dist - t).abs() < 1e-5);
        }
        assert!(cam.project(cam.origin() - cam.rotation() * Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn camera_validation() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(Camera::new(4, 4, 1.0, 1.0, 2.0, 2.0, m, 0.1, 1.0).is_err());
        assert!(Camera::new(4, 4, 1.0, 1.0, 2.0, 2.0, Matrix4::identity(), 1.0, 1.0).is_err());
        assert!(gen_rays(&identity_camera(), &[(64, 0)]).is_err());
    }

    #[test]
    fn missing_ray_has_no_samples() {
        let ray = Ray {
            origin: Vector3::new(0.0, 5.0, 0.0),
            dir: Vector3::new(1.0, 0.0, 0.0),
        };
        assert!(sample_points(&ray, 0.0, 10.0, [-0.5; 3], [0.5; 3], 0.1).unwrap().is_empty());
        let c = composite(&[], &[], [1.0, 0.5, 0.25]).unwrap();
        assert_eq!(c.rgb, [1.0, 0.5, 0.25]);
        assert_eq!(c.t_last, 1.0);
        assert!(sample_points(&ray, 0.0, 1.0, [-0.5; 3], [0.5; 3], 0.0).is_err());
    }

    #[test]
    fn axis_aligned_uniform_steps() {
        let ray = Ray {
            origin: Vector3::new(0.0, 0.0, -2.0),
            dir: Vector3::new(0.0, 0.0, 1.0),
        };
        let ts = sample_points(&ray, 0.1, 10.0, [-0.5; 3], [0.5; 3], 0.25).unwrap();
        assert_eq!(ts, vec![1.5, 1.75, 2.0, 2.25]);
    }

    #[test]
    fn composite_special_cases() {
        let cols = [[0.2, 0.4, 0.6], [0.9, 0.1, 0.3], [0.5, 0.5, 0.5]];
        let c = composite(&cols, &[0.0; 3], [1.0; 3]).unwrap();
        assert_eq!((c.rgb, c.t_last), ([1.0; 3], 1.0));
        let c = composite(&cols, &[1.0, 0.7, 0.3], [1.0; 3]).unwrap();
        assert_eq!(c.rgb, cols[0]);
        assert!(composite(&cols, &[0.1, 1.2, 0.0], [0.0; 3]).is_err());
        assert!(composite(&cols, &[0.1], [0.0; 3]).is_err());
    }

    #[test]
    fn composite_matches_literal_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let cols: Vec<[f32; 3]> = (0..8).map(|_| std::array::from_fn(|_| rng.random())).collect();
            let alphas: Vec<f32> = (0..8).map(|_| rng.random()).collect();
            let bg = [0.3f32, 0.6, 0.9];
            let c = composite(&cols, &alphas, bg).unwrap();
            for k in 0..3 {
                let mut sum = 0.0f64;
                for i in 0..8 {
                    let ti: f64 = (0..i).map(|j| 1.0 - alphas[j] as f64).product();
                    sum += ti * alphas[i] as f64 * cols[i][k] as f64;
                }
                let tk: f64 = alphas.iter().map(|&a| 1.0 - a as f64).product();
                sum += tk * bg[k] as f64;
                assert!((c.rgb[k] as f64 - sum).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn depth_expectation() {
        assert_eq!(expected_depth(&composite(&[[0.0; 3]], &[1.0], [0.0; 3]).unwrap().weights, &[2.0], 9.0), 2.0);
        let w = composite(&[[0.0; 3]; 2], &[0.5, 1.0], [0.0; 3]).unwrap().weights;
        assert_eq!(w, vec![0.5, 0.5]);
        assert_eq!(expected_depth(&w, &[1.0, 3.0], 9.0), 2.0);
        assert_eq!(expected_depth(&[0.0, 0.0], &[1.0, 3.0], 9.0), 9.0);
    }

    #[test]
    fn graph_render_matches_direct_composite() {
        let field = random_field(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = RgbNet::<f32>::uniform(39, &mut rng);
        let cam = Camera::orbit(20.0, 15.0, 2.0, Vector3::zeros(), 45.0, 8, 8, 1.0, 3.0).unwrap();
        let opts = RenderOptions {
            weight_threshold: 0.0,
            ..Default::default()
        };
        let rays = gen_rays(&cam, &PatchRect { x: 0, y: 0, size: 8 }.pixels()).unwrap();
        let b = render_rays(&field, &head, &rays, cam.near, cam.far, &opts).unwrap();
        for (r, seg) in b.offsets.windows(2).enumerate() {
            let alphas: Vec<f32> = (seg[0]..seg[1])
                .map(|i| crate::field::density_to_alpha(b.raw[i], field.act_shift(), b.delta[i]))
                .collect();
            let c = composite(&b.colors[seg[0]..seg[1]], &alphas, opts.background).unwrap();
            for k in 0..3 {
                assert!((c.rgb[k] - b.rgb[r][k]).abs() <= 1e-5);
            }
            assert!((b.t_last[r] + b.weight_sum[r] - 1.0).abs() <= 1e-5);
            assert_eq!(b.trans.get(seg[0]).copied().unwrap_or(1.0), 1.0);
            for i in seg[0]..seg[1] {
                let mut feat = field.interp_feature(b.points[i]);
                feat.extend(crate::field::embed_direction(rays[r].dir.into(), 4).unwrap());
                let want = head.query_color(&feat).unwrap();
                for k in 0..3 {
                    assert!((want[k] - b.colors[i][k]).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn patch_equals_per_ray_renders() {
        let field = random_field(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let head = RgbNet::<f32>::uniform(39, &mut rng);
        let cam = Camera::orbit(-30.0, 10.0, 2.0, Vector3::zeros(), 45.0, 16, 16, 1.0, 3.0).unwrap();
        let opts = RenderOptions::default();
        let rect = PatchRect { x: 3, y: 5, size: 10 };
        let patch = render_patch(&field, &head, &cam, rect, &opts).unwrap();
        assert_eq!(patch.rgb.data().len(), 100 * 3);
        for (i, (u, v)) in rect.pixels().into_iter().enumerate() {
            let single = render_patch(&field, &head, &cam, PatchRect { x: u, y: v, size: 1 }, &opts).unwrap();
            assert_eq!(single.rgb.data(), &patch.rgb.data()[3 * i..3 * i + 3]);
            assert_eq!(single.depth.data()[0], patch.depth.data()[i]);
        }
        assert!(render_patch(&field, &head, &cam, PatchRect { x: 10, y: 0, size: 7 }, &opts).is_err());
    }

    #[test]
    fn render_is_bit_deterministic() {
        let field = random_field(5, 7);
        let head = RgbNet::<f32>::uniform(39, &mut ChaCha8Rng::seed_from_u64(8));
        let cam = Camera::orbit(10.0, 5.0, 2.0, Vector3::zeros(), 45.0, 12, 9, 1.0, 3.0).unwrap();
        let opts = RenderOptions {
            chunk: 17,
            ..Default::default()
        };
        let a = render_image(&field, &head, &cam, &opts).unwrap();
        let b = render_image(&field, &head, &cam, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn compositing_gradients_match_finite_differences() {
        let res = 4;
        let field = random_field(res, 9);
        let cam = Camera::orbit(25.0, 20.0, 2.0, Vector3::zeros(), 40.0, 4, 4, 1.0, 3.0).unwrap();
        let rays = gen_rays(&cam, &PatchRect { x: 0, y: 0, size: 4 }.pixels()).unwrap();
        let samples = RaySamples::build(&rays, cam.near, cam.far, &field).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mlp = crate::field::Mlp::<f64>::uniform(&[39, 6, 3], false, &mut rng);
        let mut params = vec![
            field.density().cast::<f64>().map(|v| v * 0.3),
            field.feature().cast::<f64>(),
        ];
        params.extend(mlp.tensors().into_iter().cloned());
        let opts = RenderOptions {
            weight_threshold: 0.0,
            ..Default::default()
        };
        let err = gradcheck::max_rel_error(&params, 1e-6, |g, v| {
            let layers: Vec<(Var, Var)> = v[2..].chunks(2).map(|c| (c[0], c[1])).collect();
            let out = render_graph(g, &field, v[0], v[1], &samples, &opts, &mut |g, x| RgbNet::forward(g, &layers, x))?;
            let a = gradcheck::project(g, out.rgb, 11)?;
            let b = gradcheck::project(g, out.t_last, 12)?;
            g.add(a, b)
        });
        assert!(err <= 1e-3, "{err}");
    }

    proptest! {
        #[test]
        fn weights_partition_unity(seed in 0u64..500, yaw in -180.0f32..180.0, pitch in -60.0f32..60.0) {
            let field = random_field(4, seed);
            let cam = Camera::orbit(yaw, pitch, 1.8, Vector3::zeros(), 60.0, 6, 6, 0.5, 4.0).unwrap();
            let head = RgbNet::<f32>::zeros(39);
            let rays = gen_rays(&cam, &PatchRect { x: 0, y: 0, size: 6 }.pixels()).unwrap();
            let b = render_rays(&field, &head, &rays, cam.near, cam.far, &RenderOptions::default()).unwrap();
            for (r, seg) in b.offsets.windows(2).enumerate() {
                prop_assert!((b.weight_sum[r] + b.t_last[r] - 1.0).abs() <= 1e-5);
                for i in seg[0]..seg[1] {
                    if i > seg[0] {
                        prop_assert!(b.trans[i] <= b.trans[i - 1]);
                    }
                }
            }
        }

        #[test]
        fn sample_count_matches_slab_length(ox in -3.0f32..3.0, oy in -3.0f32..3.0, dx in -1.0f32..1.0, dy in -1.0f32..1.0, dz in 0.2f32..1.0) {
            let ray = Ray { origin: Vector3::new(ox, oy, -3.0), dir: Vector3::new(dx, dy, dz).normalize() };
            let step = 0.05;
            let ts = sample_points(&ray, 0.0, 100.0, [-0.5; 3], [0.5; 3], step).unwrap();
            let len = ray_box(&ray, [-0.5; 3], [0.5; 3]).map_or(0.0, |(a, b)| (b - a).max(0.0));
            prop_assert!((ts.len() as f32 - len / step).abs() <= 1.0);
            prop_assert!(ts.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
