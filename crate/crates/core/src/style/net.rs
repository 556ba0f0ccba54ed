//! Convolutional pieces of the 2D stylizer: encoder pyramid, splatting
//! blocks, decoder blocks, and feature statistic matching.

use rand::Rng;

use crate::numerics::{Graph, NumericsError, Real, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const ADAIN_EPS: f64 = 1e-5;

/// 3x3 convolution, weights `[out, in, 3, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv<T> {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Tensor::zeros([c_out, c_in, 3, 3]),
            bias: Tensor::zeros([c_out]),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn uniform(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((c_in * 9) as f64).sqrt();
        let mut draw = |_| T::lit(rng.random_range(-bound..bound));
        Self {
            weight: Tensor::from_fn([c_out, c_in, 3, 3], &mut draw),
            bias: Tensor::from_fn([c_out], &mut draw),
        }
    }

    /// He-uniform weights for ReLU stacks, zero bias.
    pub fn he(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (c_in * 9) as f64).sqrt();
        Self {
            weight: Tensor::from_fn([c_out, c_in, 3, 3], |_| T::lit(rng.random_range(-bound..bound))),
            bias: Tensor::zeros([c_out]),
        }
    }

    /// Identity kernel plus small noise; channel preserving.
    pub fn near_identity(c: usize, noise: f64, rng: &mut impl Rng) -> Self {
        let mut weight = if noise > 0.0 {
            Tensor::from_fn([c, c, 3, 3], |_| T::lit(rng.random_range(-noise..noise)))
        } else {
            Tensor::zeros([c, c, 3, 3])
        };
        for i in 0..c {
            weight.data_mut()[(i * c + i) * 9 + 4] += T::one();
        }
        Self {
            weight,
            bias: Tensor::zeros([c]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn cast<U: Real>(&self) -> Conv<U> {
        Conv {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundConv, NumericsError> {
        Ok(BoundConv {
            weight: g.input(self.weight.clone().with_requires_grad(trainable))?,
            bias: g.input(self.bias.clone().with_requires_grad(trainable))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
}

/// Mirror-padded 3x3 convolution preserving spatial extent.
pub fn conv3x3<T: Real>(g: &mut Graph<T>, x: Var, c: BoundConv) -> Result<Var, NumericsError> {
    let p = g.reflect_pad(x, 1)?;
    g.conv2d(p, c.weight, c.bias)
}

/// Per-channel statistic matching of `c` to `s` (both `[C,...]`, spatial
/// extents may differ).
pub fn adain_graph<T: Real>(g: &mut Graph<T>, c: Var, s: Var) -> Result<Var, NumericsError> {
    let shape = g.shape(c).to_vec();
    let ch = shape[0];
    if g.shape(s).first() != Some(&ch) {
        return Err(NumericsError::ShapeMismatch {
            op: "adain",
            detail: format!("content {shape:?} vs style {:?}", g.shape(s)),
        });
    }
    let mut col = vec![ch];
    col.resize(shape.len(), 1);
    let expand = |g: &mut Graph<T>, v: Var| -> Result<Var, NumericsError> {
        let r = g.reshape(v, &col)?;
        g.broadcast_to(r, &shape)
    };
    let mu_c = g.channel_mean(c)?;
    let sd_c = g.channel_std(c)?;
    let sd_c = g.clamp(sd_c, T::lit(ADAIN_EPS), T::infinity())?;
    let mu_s = g.channel_mean(s)?;
    let sd_s = g.channel_std(s)?;
    let ratio = g.div(sd_s, sd_c)?;
    let mu_c = expand(g, mu_c)?;
    let ratio = expand(g, ratio)?;
    let mu_s = expand(g, mu_s)?;
    let centered = g.sub(c, mu_c)?;
    let scaled = g.mul(centered, ratio)?;
    g.add(scaled, mu_s)
}

/// Direct form of [`adain_graph`] on `[C,...]` tensors.
pub fn adain<T: Real>(c: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let mut g = Graph::new();
    let cv = g.constant(c.clone())?;
    let sv = g.constant(s.clone())?;
    let out = adain_graph(&mut g, cv, sv)?;
    Ok(g.value(out).clone())
}

/// Channel widths of the stylizer. The default is the full-size network;
/// narrower instances share every code path and keep tests fast.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StylizerDims {
    /// Pyramid channels from the full-resolution tier down to 1/8.
    pub tiers: [usize; 4],
    /// Width of the hidden layer in every decoder block.
    pub hidden: usize,
}

impl Default for StylizerDims {
    fn default() -> Self {
        Self {
            tiers: [64, 128, 256, 512],
            hidden: 16,
        }
    }
}

impl StylizerDims {
    /// `(in, hidden, out)` of decoder blocks Conv1..Conv5.
    pub fn decoder_extents(&self) -> [(usize, usize, usize); 5] {
        let [t4, t3, t2, t1] = self.tiers;
        let h = self.hidden;
        [(6, h, 3), (2 * t4, h, 3), (2 * t3, h, t4), (2 * t2, h, t3), (t1, h, t2)]
    }

    /// Channels entering splatting blocks SB1..SB5.
    pub fn splat_channels(&self) -> [usize; 5] {
        let [t4, t3, t2, t1] = self.tiers;
        [3, t4, t3, t2, t1]
    }
}

/// Two mirrored 3x3 convs: leaky ReLU after the first, sigmoid after the second.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T: Real = f32> {
    pub first: Conv<T>,
    pub second: Conv<T>,
}

/// Separate convolutions for the style and content inputs of one tier.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatBlock<T: Real = f32> {
    pub style: Conv<T>,
    pub content: Conv<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StylizerParams<T: Real = f32> {
    pub dims: StylizerDims,
    /// Full resolution, 1/2, 1/4, 1/8.
    pub encoder: Vec<Conv<T>>,
    /// SB1..SB5.
    pub splat: Vec<SplatBlock<T>>,
    /// Conv1..Conv5.
    pub decoder: Vec<ConvBlock<T>>,
}

impl<T: Real> StylizerParams<T> {
    pub fn new(dims: StylizerDims, rng: &mut impl Rng) -> Self {
        let [t4, t3, t2, t1] = dims.tiers;
        let encoder = vec![
            Conv::he(3, t4, rng),
            Conv::he(t4, t3, rng),
            Conv::he(t3, t2, rng),
            Conv::he(t2, t1, rng),
        ];
        let splat = dims
            .splat_channels()
            .iter()
            .map(|&c| SplatBlock {
                style: Conv::near_identity(c, 0.01 / ((c * 9) as f64).sqrt(), rng),
                content: Conv::near_identity(c, 0.01 / ((c * 9) as f64).sqrt(), rng),
            })
            .collect();
        let decoder = dims
            .decoder_extents()
            .iter()
            .map(|&(i, h, o)| ConvBlock {
                first: Conv::uniform(i, h, rng),
                second: Conv::uniform(h, o, rng),
            })
            .collect();
        Self {
            dims,
            encoder,
            splat,
            decoder,
        }
    }

    pub fn cast<U: Real>(&self) -> StylizerParams<U> {
        StylizerParams {
            dims: self.dims,
            encoder: self.encoder.iter().map(Conv::cast).collect(),
            splat: self
                .splat
                .iter()
                .map(|b| SplatBlock {
                    style: b.style.cast(),
                    content: b.content.cast(),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|b| ConvBlock {
                    first: b.first.cast(),
                    second: b.second.cast(),
                })
                .collect(),
        }
    }

    /// Named parameters in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &c.weight));
            out.push((format!("encoder.{i}.bias"), &c.bias));
        }
        for (i, b) in self.splat.iter().enumerate() {
            for (part, c) in [("style", &b.style), ("content", &b.content)] {
                out.push((format!("splat.{}.{part}.weight", i + 1), &c.weight));
                out.push((format!("splat.{}.{part}.bias", i + 1), &c.bias));
            }
        }
        for (i, b) in self.decoder.iter().enumerate() {
            for (part, c) in [("first", &b.first), ("second", &b.second)] {
                out.push((format!("decoder.{}.{part}.weight", i + 1), &c.weight));
                out.push((format!("decoder.{}.{part}.bias", i + 1), &c.bias));
            }
        }
        out
    }

    /// Mutable view in the order of [`StylizerParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for c in &mut self.encoder {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for b in &mut self.splat {
            for c in [&mut b.style, &mut b.content] {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
        }
        for b in &mut self.decoder {
            for c in [&mut b.first, &mut b.second] {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
        }
        out
    }

    /// Number of leading tensors in [`StylizerParams::named`] that belong to
    /// the encoder.
    pub fn encoder_tensor_count(&self) -> usize {
        2 * self.encoder.len()
    }

    pub fn bind(&self, g: &mut Graph<T>, train_encoder: bool, train_rest: bool) -> Result<BoundStylizer, NumericsError> {
        Ok(BoundStylizer {
            encoder: self.encoder.iter().map(|c| c.bind(g, train_encoder)).collect::<Result<_, _>>()?,
            splat: self
                .splat
                .iter()
                .map(|b| Ok((b.style.bind(g, train_rest)?, b.content.bind(g, train_rest)?)))
                .collect::<Result<_, NumericsError>>()?,
            decoder: self
                .decoder
                .iter()
                .map(|b| Ok((b.first.bind(g, train_rest)?, b.second.bind(g, train_rest)?)))
                .collect::<Result<_, NumericsError>>()?,
        })
    }
}

/// Graph handles for [`StylizerParams`], in the same order.
#[derive(Clone, Debug)]
pub struct BoundStylizer {
    pub encoder: Vec<BoundConv>,
    pub splat: Vec<(BoundConv, BoundConv)>,
    pub decoder: Vec<(BoundConv, BoundConv)>,
}

impl BoundStylizer {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for c in &self.encoder {
            v.extend([c.weight, c.bias]);
        }
        for (a, b) in self.splat.iter().chain(&self.decoder) {
            v.extend([a.weight, a.bias, b.weight, b.bias]);
        }
        v
    }
}

/// Feature maps from the 1/8 tier (`levels[0]`) to full resolution (`levels[3]`).
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub levels: [Var; 4],
}

pub const MIN_ENCODER_SIZE: usize = 16;

/// Spatial extents of the pyramid for an `h x w` input, 1/8 tier first.
pub fn pyramid_extents(h: usize, w: usize) -> [(usize, usize); 4] {
    let half = |(a, b): (usize, usize)| ((a / 2).max(1), (b / 2).max(1));
    let e4 = (h, w);
    let e3 = half(e4);
    let e2 = half(e3);
    let e1 = half(e2);
    [e1, e2, e3, e4]
}

/// Encoder pyramid of a `[3,H,W]` image.
pub fn extract_pyramid_graph<T: Real>(g: &mut Graph<T>, enc: &[BoundConv], img: Var) -> Result<PyramidVars, NumericsError> {
    let s = g.shape(img).to_vec();
    if s.len() != 3 || s[0] != 3 || s[1] < MIN_ENCODER_SIZE || s[2] < MIN_ENCODER_SIZE {
        return Err(NumericsError::InvalidArgument(format!(
            "encoder needs a [3,H,W] image with H,W >= {MIN_ENCODER_SIZE}, got {s:?}"
        )));
    }
    let ext = pyramid_extents(s[1], s[2]);
    let c = conv3x3(g, img, enc[0])?;
    let f4 = g.relu(c)?;
    let mut levels = [f4; 4];
    let mut prev = f4;
    for tier in 1..4 {
        let (h, w) = ext[3 - tier];
        let down = g.resize_bilinear(prev, h, w)?;
        let c = conv3x3(g, down, enc[tier])?;
        prev = g.relu(c)?;
        levels[3 - tier] = prev;
    }
    Ok(PyramidVars { levels })
}

/// `adain(conv(c), conv(s))` for one tier.
pub fn splatting_block_graph<T: Real>(
    g: &mut Graph<T>,
    block: (BoundConv, BoundConv),
    content: Var,
    style: Var,
) -> Result<Var, NumericsError> {
    let (sconv, cconv) = block;
    let s = conv3x3(g, style, sconv)?;
    let c = conv3x3(g, content, cconv)?;
    adain_graph(g, c, s)
}

pub fn conv_block_graph<T: Real>(g: &mut Graph<T>, block: (BoundConv, BoundConv), x: Var) -> Result<Var, NumericsError> {
    let h = conv3x3(g, x, block.0)?;
    let h = g.leaky_relu(h, T::lit(LEAKY_SLOPE))?;
    let o = conv3x3(g, h, block.1)?;
    g.sigmoid(o)
}

/// Decoder over splatting outputs SB1..SB5 (`sb[0]` is SB1).
pub fn decode_graph<T: Real>(g: &mut Graph<T>, dec: &[(BoundConv, BoundConv)], sb: &[Var; 5]) -> Result<Var, NumericsError> {
    let mut d = conv_block_graph(g, dec[4], sb[4])?;
    for k in (1..4).rev() {
        let (h, w) = {
            let s = g.shape(sb[k]);
            (s[1], s[2])
        };
        let up = g.resize_bilinear(d, h, w)?;
        let cat = g.concat(&[up, sb[k]], 0)?;
        d = conv_block_graph(g, dec[k], cat)?;
    }
    let cat = g.concat(&[d, sb[0]], 0)?;
    conv_block_graph(g, dec[0], cat)
}
