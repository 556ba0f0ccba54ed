//! Density and feature voxel grids, direction encoding, and the color head.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, GridTaps, NumericsError, Real, Tensor, Var};

pub const DEFAULT_FEATURE_DIM: usize = 12;
pub const DEFAULT_DIR_FREQS: usize = 4;
pub const DEFAULT_INIT_ALPHA: f32 = 1e-3;
pub const RGBNET_HIDDEN: usize = 128;

/// Length of [`embed_direction`]'s output for `freqs` frequencies.
pub fn direction_embedding_len(freqs: usize) -> usize {
    3 + 6 * freqs
}

/// Paired density and feature grids over an axis-aligned box. Grid nodes sit
/// on the box corners, so node `i` along an axis of `n` nodes lies at
/// `min + i * (max - min) / (n - 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    bbox_min: [f32; 3],
    bbox_max: [f32; 3],
    density: Tensor,
    feature: Tensor,
    act_shift: f32,
}

impl VoxelField {
    /// Zero-initialized grids. Raw density 0 maps to `init_alpha` per step.
    pub fn new(
        bbox_min: [f32; 3],
        bbox_max: [f32; 3],
        resolution: [usize; 3],
        feature_dim: usize,
        init_alpha: f32,
    ) -> Result<Self> {
        let [x, y, z] = resolution;
        let mut field = Self::from_parts(
            bbox_min,
            bbox_max,
            Tensor::zeros([1, x, y, z]),
            Tensor::zeros([feature_dim, x, y, z]),
            0.0,
        )?;
        if !(init_alpha > 0.0 && init_alpha < 1.0) {
            return Err(Error::invalid(format!("initial alpha {init_alpha} not in (0,1)")));
        }
        field.act_shift = act_shift_for(init_alpha, field.step_size());
        Ok(field)
    }

    pub fn from_parts(
        bbox_min: [f32; 3],
        bbox_max: [f32; 3],
        density: Tensor,
        feature: Tensor,
        act_shift: f32,
    ) -> Result<Self> {
        validate_bbox(bbox_min, bbox_max)?;
        let ds = density.shape();
        let fs = feature.shape();
        if ds.len() != 4 || ds[0] != 1 || ds[1..].iter().any(|&n| n < 2) {
            return Err(Error::invalid(format!("density grid must be [1,X,Y,Z] with X,Y,Z >= 2, got {ds:?}")));
        }
        if fs.len() != 4 || fs[0] == 0 || fs[1..] != ds[1..] {
            return Err(Error::invalid(format!("feature grid {fs:?} does not match density {ds:?}")));
        }
        if !act_shift.is_finite() {
            return Err(Error::invalid("non-finite activation shift"));
        }
        Ok(Self {
            bbox_min,
            bbox_max,
            density,
            feature,
            act_shift,
        })
    }

    pub fn bbox_min(&self) -> [f32; 3] {
        self.bbox_min
    }

    pub fn bbox_max(&self) -> [f32; 3] {
        self.bbox_max
    }

    pub fn density(&self) -> &Tensor {
        &self.density
    }

    pub fn feature(&self) -> &Tensor {
        &self.feature
    }

    pub fn density_mut(&mut self) -> &mut Tensor {
        &mut self.density
    }

    pub fn feature_mut(&mut self) -> &mut Tensor {
        &mut self.feature
    }

    /// Both grids at once, for optimizers that update them together.
    pub fn grids_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.density, &mut self.feature)
    }

    pub fn act_shift(&self) -> f32 {
        self.act_shift
    }

    pub fn resolution(&self) -> [usize; 3] {
        let s = self.density.shape();
        [s[1], s[2], s[3]]
    }

    pub fn feature_dim(&self) -> usize {
        self.feature.shape()[0]
    }

    /// Spacing between adjacent nodes per axis.
    pub fn cell_size(&self) -> [f32; 3] {
        let r = self.resolution();
        std::array::from_fn(|a| (self.bbox_max[a] - self.bbox_min[a]) / (r[a] - 1) as f32)
    }

    pub fn voxel_size(&self) -> f32 {
        let c = self.cell_size();
        c[0].min(c[1]).min(c[2])
    }

    /// Ray marching step: half a voxel.
    pub fn step_size(&self) -> f32 {
        0.5 * self.voxel_size()
    }

    pub fn taps<T: Real>(&self, points: &[[f32; 3]]) -> GridTaps<T> {
        trilinear_taps(self.bbox_min, self.bbox_max, self.resolution(), points)
    }

    pub fn interp_density(&self, p: [f32; 3]) -> f32 {
        self.interp(&self.density, p)[0]
    }

    pub fn interp_feature(&self, p: [f32; 3]) -> Vec<f32> {
        self.interp(&self.feature, p)
    }

    /// Trilinear blend of the 8 nodes around `p` for every channel of a
    /// `[C,X,Y,Z]` grid sharing this field's frame.
    pub fn interp(&self, grid: &Tensor, p: [f32; 3]) -> Vec<f32> {
        let taps: GridTaps<f32> = self.taps(&[p]);
        let c = grid.shape()[0];
        let plane = grid.numel() / c;
        let (idx, w) = (&taps.index[0], &taps.weight[0]);
        (0..c)
            .map(|ci| {
                let g = &grid.data()[ci * plane..(ci + 1) * plane];
                (0..8).map(|k| w[k] * g[idx[k] as usize]).sum()
            })
            .collect()
    }

    pub fn alpha_at(&self, p: [f32; 3], delta: f32) -> f32 {
        density_to_alpha(self.interp_density(p), self.act_shift, delta)
    }
}

fn validate_bbox(min: [f32; 3], max: [f32; 3]) -> Result<()> {
    let ok = (0..3).all(|a| min[a].is_finite() && max[a].is_finite() && min[a] < max[a]);
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("degenerate bounding box {min:?} .. {max:?}")))
    }
}

/// Corner indices and weights for trilinear lookups. Points outside the box
/// are clamped onto it.
pub fn trilinear_taps<T: Real>(
    bbox_min: [f32; 3],
    bbox_max: [f32; 3],
    resolution: [usize; 3],
    points: &[[f32; 3]],
) -> GridTaps<T> {
    let [_, ny, nz] = resolution;
    let mut index = Vec::with_capacity(points.len());
    let mut weight = Vec::with_capacity(points.len());
    for p in points {
        let mut i0 = [0usize; 3];
        let mut f = [0f64; 3];
        for a in 0..3 {
            let n = resolution[a];
            let lo = bbox_min[a] as f64;
            let hi = bbox_max[a] as f64;
            let u = ((p[a] as f64 - lo) / (hi - lo) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n - 2);
            i0[a] = i;
            f[a] = u - i as f64;
        }
        let mut idx = [0u32; 8];
        let mut wt = [T::zero(); 8];
        for k in 0..8 {
            let (dx, dy, dz) = ((k >> 2) & 1, (k >> 1) & 1, k & 1);
            let flat = ((i0[0] + dx) * ny + (i0[1] + dy)) * nz + (i0[2] + dz);
            idx[k] = flat as u32;
            let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
            let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
            let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
            wt[k] = T::lit(wx * wy * wz);
        }
        index.push(idx);
        weight.push(wt);
    }
    GridTaps {
        spatial: resolution,
        index,
        weight,
    }
}

pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f32) -> f32 {
    let y = y as f64;
    (y + (-(-y).exp_m1()).ln()) as f32
}

/// Bias added to raw density so that raw 0 yields opacity `alpha0` over one
/// step of length `delta`.
pub fn act_shift_for(alpha0: f32, delta: f32) -> f32 {
    let sigma = -((1.0 - alpha0 as f64).ln()) / delta as f64;
    softplus_inverse(sigma as f32)
}

/// `1 - exp(-softplus(raw + shift) * delta)`.
pub fn density_to_alpha(raw: f32, shift: f32, delta: f32) -> f32 {
    -(-softplus(raw + shift) * delta).exp_m1()
}

/// Graph form of [`density_to_alpha`] with per-sample step lengths.
pub fn alpha_graph<T: Real>(g: &mut Graph<T>, raw: Var, shift: T, delta: Var) -> Result<Var, NumericsError> {
    let shifted = g.add_scalar(raw, shift)?;
    let sigma = g.softplus(shifted)?;
    let tau = g.mul(sigma, delta)?;
    let neg = g.scale(tau, -T::one())?;
    let trans = g.exp(neg)?;
    let flipped = g.scale(trans, -T::one())?;
    g.add_scalar(flipped, T::one())
}

/// `[d, sin(2^k pi d), cos(2^k pi d)]`, each trig block ordered by axis then
/// frequency.
pub fn embed_direction(d: [f32; 3], freqs: usize) -> Result<Vec<f32>> {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if !((norm - 1.0).abs() <= 1e-4) {
        return Err(Error::invalid(format!("direction {d:?} has norm {norm}, expected 1")));
    }
    let mut out = Vec::with_capacity(direction_embedding_len(freqs));
    embed_direction_into(d, freqs, &mut out);
    Ok(out)
}

pub(crate) fn embed_direction_into(d: [f32; 3], freqs: usize, out: &mut Vec<f32>) {
    out.extend_from_slice(&d);
    for trig in [f64::sin, f64::cos] {
        for &c in &d {
            for k in 0..freqs {
                out.push(trig((1u64 << k) as f64 * PI * c as f64) as f32);
            }
        }
    }
}

/// A dense layer `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros([fan_in, fan_out]),
            bias: Tensor::zeros([fan_out]),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |_| T::lit(rng.random_range(-bound..bound));
        Self {
            weight: Tensor::from_fn([fan_in, fan_out], &mut draw),
            bias: Tensor::from_fn([fan_out], &mut draw),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Stack of [`Linear`] layers with ReLU between them and optionally after
/// the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Real = f32> {
    pub layers: Vec<Linear<T>>,
    pub final_relu: bool,
}

/// Graph handles for an [`Mlp`]'s parameters, `(weight, bias)` per layer.
pub type BoundLayers = Vec<(Var, Var)>;

impl<T: Real> Mlp<T> {
    pub fn uniform(dims: &[usize], final_relu: bool, rng: &mut impl Rng) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Linear::uniform(w[0], w[1], rng)).collect(),
            final_relu,
        }
    }

    pub fn zeros(dims: &[usize], final_relu: bool) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
            final_relu,
        }
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].fan_in()];
        d.extend(self.layers.iter().map(Linear::fan_out));
        d
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            final_relu: self.final_relu,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Puts the parameters on `g`, differentiable when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundLayers, NumericsError> {
        self.layers
            .iter()
            .map(|l| {
                let w = g.input(l.weight.clone().with_requires_grad(trainable))?;
                let b = g.input(l.bias.clone().with_requires_grad(trainable))?;
                Ok((w, b))
            })
            .collect()
    }

    /// `x: [N, in] -> [N, out]`.
    pub fn forward(g: &mut Graph<T>, layers: &[(Var, Var)], final_relu: bool, x: Var) -> Result<Var, NumericsError> {
        let mut h = x;
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = g.affine(h, w, b)?;
            if i + 1 < layers.len() || final_relu {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Direct evaluation on `n` rows of `x`, bypassing the graph.
    pub fn eval(&self, x: &[T], n: usize) -> Vec<T> {
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let (k, m) = (l.fan_in(), l.fan_out());
            let mut out = Vec::with_capacity(n * m);
            for _ in 0..n {
                out.extend_from_slice(l.bias.data());
            }
            crate::numerics::gemm(false, false, n, m, k, &h, l.weight.data(), true, &mut out);
            if i + 1 < self.layers.len() || self.final_relu {
                out.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            h = out;
        }
        h
    }
}

/// The view-dependent color head: `in -> 128 -> 128 -> 3`, sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbNet<T: Real = f32> {
    pub mlp: Mlp<T>,
}

impl<T: Real> RgbNet<T> {
    pub fn uniform(in_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::uniform(&[in_dim, RGBNET_HIDDEN, RGBNET_HIDDEN, 3], false, rng),
        }
    }

    pub fn zeros(in_dim: usize) -> Self {
        Self {
            mlp: Mlp::zeros(&[in_dim, RGBNET_HIDDEN, RGBNET_HIDDEN, 3], false),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.mlp.layers[0].fan_in()
    }

    pub fn cast<U: Real>(&self) -> RgbNet<U> {
        RgbNet { mlp: self.mlp.cast() }
    }

    /// `x: [N, in] -> [N, 3]` colors in (0,1).
    pub fn forward(g: &mut Graph<T>, layers: &[(Var, Var)], x: Var) -> Result<Var, NumericsError> {
        let logits = Mlp::forward(g, layers, false, x)?;
        g.sigmoid(logits)
    }

    pub fn query_color(&self, feat_in: &[T]) -> Result<[T; 3]> {
        if feat_in.len() != self.in_dim() {
            return Err(Error::invalid(format!(
                "color head expects {} inputs, got {}",
                self.in_dim(),
                feat_in.len()
            )));
        }
        let out = self.eval_batch(feat_in, 1);
        Ok([out[0], out[1], out[2]])
    }

    /// Direct evaluation of `n` input rows.
    pub fn eval_batch(&self, x: &[T], n: usize) -> Vec<T> {
        self.mlp
            .eval(x, n)
            .into_iter()
            .map(|v| T::one() / (T::one() + (-v).exp()))
            .collect()
    }
}
