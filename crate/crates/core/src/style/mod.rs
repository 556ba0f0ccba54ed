//! Photorealistic 2D stylization that transfers chroma while keeping the
//! content's luminance structure, plus the style code used for
//! conditioning the scene's color head.
//!
//! Pipeline: both images are resized to a low working resolution and
//! encoded into four-tier pyramids; five splatting blocks match content to
//! style statistics per tier; a decoder merges the tiers back into a
//! low-resolution image, which is upsampled and smoothed. In YUV the
//! content is statistic-matched to the smoothed result, and the final image
//! takes luminance from that match and chroma from the smoothed result.

pub mod color;
pub mod net;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ssim_graph, PSNR_CAP};
use crate::numerics::{AdamConfig, AdamState, Graph, NumericsError, Real, Tensor, Var};
use crate::raster::Image;

pub use color::{blur_params_for, gaussian_blur, gaussian_kernel, rgb_to_yuv, yuv_to_rgb};
pub use net::{adain, StylizerDims, StylizerParams};
use net::{adain_graph, decode_graph, extract_pyramid_graph, splatting_block_graph, BoundConv, BoundStylizer, PyramidVars};

pub const MIN_STYLIZE_SIZE: usize = 32;


#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleConfig {
    /// Long side of the working resolution.
    pub low_res: usize,
    /// Kernel length and sigma of the chroma smoothing; derived from the
    /// output size when absent.
    pub blur: Option<(usize, f64)>,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            low_res: 512,
            blur: None,
        }
    }
}

/// Extent with long side `long`, aspect preserved.
pub fn low_res_extent(h: usize, w: usize, long: usize) -> (usize, usize) {
    let s = long as f64 / h.max(w) as f64;
    let r = |v: usize| ((v as f64 * s).round() as usize).max(1);
    (r(h), r(w))
}

/// Graph nodes of every pipeline stage.
#[derive(Clone, Debug)]
pub struct TraceVars {
    pub content_low: Var,
    pub style_low: Var,
    pub content_pyramid: PyramidVars,
    pub style_pyramid: PyramidVars,
    /// SB1..SB5.
    pub splat: [Var; 5],
    pub low_stylized: Var,
    pub full_stylized: Var,
    pub smoothed: Var,
    pub content_yuv: Var,
    pub smoothed_yuv: Var,
    pub matched_yuv: Var,
    pub combined_yuv: Var,
    pub output: Var,
}

/// Every intermediate image of one stylization.
#[derive(Clone, Debug, PartialEq)]
pub struct StylePipelineTrace {
    pub content_low: Image,
    pub style_low: Image,
    /// SB1..SB5 outputs as `[C,H,W]`.
    pub splat: Vec<Tensor<f32>>,
    pub low_stylized: Image,
    pub full_stylized: Image,
    pub smoothed: Image,
    pub content_yuv: Image,
    pub smoothed_yuv: Image,
    pub matched_yuv: Image,
    pub combined_yuv: Image,
    pub output: Image,
}

fn check_image(what: &str, img: &Image) -> Result<()> {
    if img.channels() != 3 || img.width() < MIN_STYLIZE_SIZE || img.height() < MIN_STYLIZE_SIZE {
        return Err(Error::invalid(format!(
            "{what} must be a 3-channel image of at least {MIN_STYLIZE_SIZE}x{MIN_STYLIZE_SIZE}, got {}x{}x{}",
            img.width(),
            img.height(),
            img.channels()
        )));
    }
    Ok(())
}

fn resize_to<T: Real>(g: &mut Graph<T>, x: Var, ext: (usize, usize)) -> Result<Var, NumericsError> {
    let s = g.shape(x);
    if (s[1], s[2]) == ext {
        Ok(x)
    } else {
        g.resize_bilinear(x, ext.0, ext.1)
    }
}

/// The full pipeline on `[3,H,W]` content and style nodes.
pub fn stylize_graph<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundStylizer,
    content: Var,
    style: Var,
    cfg: &StyleConfig,
) -> Result<TraceVars, NumericsError> {
    let (cs, ss) = (g.shape(content).to_vec(), g.shape(style).to_vec());
    let (h, w) = (cs[1], cs[2]);
    let content_low = resize_to(g, content, low_res_extent(h, w, cfg.low_res))?;
    let style_low = resize_to(g, style, low_res_extent(ss[1], ss[2], cfg.low_res))?;
    let content_pyramid = extract_pyramid_graph(g, &bound.encoder, content_low)?;
    let style_pyramid = extract_pyramid_graph(g, &bound.encoder, style_low)?;
    let mut splat = [content_low; 5];
    splat[0] = splatting_block_graph(g, bound.splat[0], content_low, style_low)?;
    for k in 1..5 {
        // SB2 works on the full-resolution tier, SB5 on the 1/8 tier
        let lvl = 4 - k;
        splat[k] = splatting_block_graph(g, bound.splat[k], content_pyramid.levels[lvl], style_pyramid.levels[lvl])?;
    }
    let low_stylized = decode_graph(g, &bound.decoder, &splat)?;
    let full_stylized = resize_to(g, low_stylized, (h, w))?;
    let (ksize, sigma) = cfg.blur.unwrap_or_else(|| blur_params_for(h.max(w)));
    let kernel = gaussian_kernel(ksize, sigma).map_err(|e| NumericsError::InvalidArgument(e.to_string()))?;
    let smoothed = color::gaussian_blur_graph(g, full_stylized, &kernel)?;
    let content_yuv = color::color_transform_graph(g, content, color::rgb_to_yuv_matrix())?;
    let smoothed_yuv = color::color_transform_graph(g, smoothed, color::rgb_to_yuv_matrix())?;
    let matched_yuv = adain_graph(g, content_yuv, smoothed_yuv)?;
    let luma = g.narrow(matched_yuv, 0, 0, 1)?;
    let chroma = g.narrow(smoothed_yuv, 0, 1, 2)?;
    let combined_yuv = g.concat(&[luma, chroma], 0)?;
    let rgb = color::color_transform_graph(g, combined_yuv, color::yuv_to_rgb_matrix())?;
    let output = g.clamp(rgb, T::zero(), T::one())?;
    Ok(TraceVars {
        content_low,
        style_low,
        content_pyramid,
        style_pyramid,
        splat,
        low_stylized,
        full_stylized,
        smoothed,
        content_yuv,
        smoothed_yuv,
        matched_yuv,
        combined_yuv,
        output,
    })
}

pub fn stylize(content: &Image, style: &Image, params: &StylizerParams, cfg: &StyleConfig) -> Result<StylePipelineTrace> {
    check_image("content", content)?;
    check_image("style", style)?;
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g, false, false)?;
    let c = g.constant(content.to_chw())?;
    let s = g.constant(style.to_chw())?;
    let t = stylize_graph(&mut g, &bound, c, s, cfg)?;
    let img = |v: Var| Image::from_chw(g.value(v));
    Ok(StylePipelineTrace {
        content_low: img(t.content_low)?,
        style_low: img(t.style_low)?,
        splat: t.splat.iter().map(|&v| g.value(v).clone()).collect(),
        low_stylized: img(t.low_stylized)?,
        full_stylized: img(t.full_stylized)?,
        smoothed: img(t.smoothed)?,
        content_yuv: img(t.content_yuv)?,
        smoothed_yuv: img(t.smoothed_yuv)?,
        matched_yuv: img(t.matched_yuv)?,
        combined_yuv: img(t.combined_yuv)?,
        output: img(t.output)?,
    })
}

/// Weights of the stylizer objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct YuvLossWeights {
    pub content: f64,
    pub style: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl Default for YuvLossWeights {
    fn default() -> Self {
        Self {
            content: 1.0,
            style: 10.0,
            psnr: 1.0,
            ssim: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub content: Var,
    pub style: Var,
    pub psnr: Var,
    pub ssim: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct YuvLosses {
    pub content: f64,
    pub style: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub total: f64,
}

impl YuvLosses {
    fn read<T: Real>(g: &Graph<T>, v: &LossVars) -> Self {
        let f = |x: Var| g.value(x).item().to_f64().unwrap_or(f64::NAN);
        Self {
            content: f(v.content),
            style: f(v.style),
            psnr: f(v.psnr),
            ssim: f(v.ssim),
            total: f(v.total),
        }
    }
}

fn mse_graph<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var, NumericsError> {
    let d = g.sub(a, b)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// `-PSNR / 50`, with PSNR capped at [`PSNR_CAP`] decibels.
pub fn psnr_loss_graph<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var, NumericsError> {
    let mse = mse_graph(g, a, b)?;
    let floor = T::lit(10f64.powf(-PSNR_CAP / 10.0));
    let mse = g.clamp(mse, floor, T::infinity())?;
    let ln = g.log(mse)?;
    g.scale(ln, T::lit(10.0 / (50.0 * std::f64::consts::LN_10)))
}

/// Content, style, PSNR and SSIM terms for a stylized `output`.
/// Features of `output` are taken at the content's working resolution.
pub fn stylizer_loss_graph<T: Real>(
    g: &mut Graph<T>,
    encoder: &[BoundConv],
    output: Var,
    content: Var,
    content_pyramid: &PyramidVars,
    style_pyramid: &PyramidVars,
    weights: &YuvLossWeights,
) -> Result<LossVars, NumericsError> {
    let ext = {
        let s = g.shape(content_pyramid.levels[3]);
        (s[1], s[2])
    };
    let out_low = resize_to(g, output, ext)?;
    let out_pyr = extract_pyramid_graph(g, encoder, out_low)?;
    let content_term = mse_graph(g, out_pyr.levels[0], content_pyramid.levels[0])?;
    let mut style_term = None;
    for k in 0..4 {
        let (o, s) = (out_pyr.levels[k], style_pyramid.levels[k]);
        let (mo, ms) = (g.channel_mean(o)?, g.channel_mean(s)?);
        let (so, ss) = (g.channel_std(o)?, g.channel_std(s)?);
        let dm = mse_graph(g, mo, ms)?;
        let ds = mse_graph(g, so, ss)?;
        let tier = g.add(dm, ds)?;
        style_term = Some(match style_term {
            None => tier,
            Some(acc) => g.add(acc, tier)?,
        });
    }
    let style_term = style_term.expect("four tiers");
    let psnr = psnr_loss_graph(g, output, content)?;
    let sim = ssim_graph(g, output, content)?;
    let neg = g.scale(sim, -T::one())?;
    let ssim = g.add_scalar(neg, T::one())?;
    let parts = [
        (content_term, weights.content),
        (style_term, weights.style),
        (psnr, weights.psnr),
        (ssim, weights.ssim),
    ];
    let mut total = g.scale(parts[0].0, T::lit(parts[0].1))?;
    for &(v, w) in &parts[1..] {
        let s = g.scale(v, T::lit(w))?;
        total = g.add(total, s)?;
    }
    Ok(LossVars {
        content: content_term,
        style: style_term,
        psnr,
        ssim,
        total,
    })
}

/// Loss terms of a finished stylization against its inputs.
pub fn stylizer_losses(
    params: &StylizerParams,
    trace: &StylePipelineTrace,
    content: &Image,
    style: &Image,
    weights: &YuvLossWeights,
    cfg: &StyleConfig,
) -> Result<YuvLosses> {
    losses_for_output(params, &trace.output, content, style, weights, cfg)
}

/// Loss terms for an arbitrary candidate `output` of `(content, style)`.
pub fn losses_for_output(
    params: &StylizerParams,
    output: &Image,
    content: &Image,
    style: &Image,
    weights: &YuvLossWeights,
    cfg: &StyleConfig,
) -> Result<YuvLosses> {
    if !output.same_extent(content) {
        return Err(Error::invalid("stylized output and content differ in extent"));
    }
    let mut g = Graph::<f64>::new();
    let p = params.cast::<f64>();
    let bound = p.bind(&mut g, false, false)?;
    let c = g.constant(content.to_chw())?;
    let s = g.constant(style.to_chw())?;
    let o = g.constant(output.to_chw())?;
    let cl = resize_to(&mut g, c, low_res_extent(content.height(), content.width(), cfg.low_res))?;
    let sl = resize_to(&mut g, s, low_res_extent(style.height(), style.width(), cfg.low_res))?;
    let cp = extract_pyramid_graph(&mut g, &bound.encoder, cl)?;
    let sp = extract_pyramid_graph(&mut g, &bound.encoder, sl)?;
    let v = stylizer_loss_graph(&mut g, &bound.encoder, o, c, &cp, &sp, weights)?;
    Ok(YuvLosses::read(&g, &v))
}

/// Pooled 512-d (top tier width) descriptor of a style image.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode(pub Vec<f32>);

pub fn style_code(style: &Image, params: &StylizerParams, cfg: &StyleConfig) -> Result<StyleCode> {
    if style.channels() != 3 {
        return Err(Error::invalid("style image must have 3 channels"));
    }
    let mut g = Graph::<f32>::new();
    let enc: Vec<BoundConv> = params
        .encoder
        .iter()
        .map(|c| c.bind(&mut g, false))
        .collect::<Result<_, _>>()?;
    let s = g.constant(style.to_chw())?;
    let sl = resize_to(&mut g, s, low_res_extent(style.height(), style.width(), cfg.low_res))?;
    let pyr = extract_pyramid_graph(&mut g, &enc, sl)?;
    let m = g.channel_mean(pyr.levels[0])?;
    let code = g.value(m).data().to_vec();
    if code.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite style code"));
    }
    Ok(StyleCode(code))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylizerTrainConfig {
    pub iterations: usize,
    pub lr: f32,
    pub seed: u64,
    /// Random square crops of this size from both images; whole images when absent.
    pub crop: Option<usize>,
    /// Always train on this `(content, style)` index pair.
    pub pair: Option<(usize, usize)>,
    pub weights: YuvLossWeights,
    pub style: StyleConfig,
    pub train_encoder: bool,
}

impl Default for StylizerTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 1e-3,
            seed: 0,
            crop: None,
            pair: None,
            weights: YuvLossWeights::default(),
            style: StyleConfig::default(),
            train_encoder: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylizerLogRow {
    pub iteration: usize,
    pub content_index: usize,
    pub style_index: usize,
    pub losses: YuvLosses,
}

fn random_crop(img: &Image, size: usize, rng: &mut impl Rng) -> Result<Image> {
    let s = size.min(img.width()).min(img.height());
    let x = rng.random_range(0..=img.width() - s);
    let y = rng.random_range(0..=img.height() - s);
    img.crop(x, y, s, s)
}

/// Optimizes splatting and decoder convolutions (and the encoder when
/// `train_encoder` is set) on random `(content, style)` pairs.
pub fn train_stylizer(
    corpus: &[Image],
    mut params: StylizerParams,
    cfg: &StylizerTrainConfig,
) -> Result<(StylizerParams, Vec<StylizerLogRow>)> {
    if corpus.len() < 2 {
        return Err(Error::invalid(format!("stylizer corpus needs at least 2 images, got {}", corpus.len())));
    }
    if cfg.iterations == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("stylizer training needs iterations > 0 and lr > 0"));
    }
    if let Some((c, s)) = cfg.pair {
        if c >= corpus.len() || s >= corpus.len() {
            return Err(Error::invalid(format!("pair ({c},{s}) outside corpus of {}", corpus.len())));
        }
    }
    for img in corpus {
        check_image("corpus image", img)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let skip = if cfg.train_encoder { 0 } else { params.encoder_tensor_count() };
    let mut adam = AdamState::<f32>::new(AdamConfig::with_lr(cfg.lr));
    let indices: Vec<usize> = (0..corpus.len()).collect();
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (ci, si) = match cfg.pair {
            Some(p) => p,
            None => {
                let ci = *indices.choose(&mut rng).unwrap();
                let others: Vec<usize> = indices.iter().copied().filter(|&i| i != ci).collect();
                (ci, *others.choose(&mut rng).unwrap())
            }
        };
        let (content, style) = match cfg.crop {
            Some(s) => (random_crop(&corpus[ci], s, &mut rng)?, random_crop(&corpus[si], s, &mut rng)?),
            None => (corpus[ci].clone(), corpus[si].clone()),
        };
        let mut g = Graph::<f32>::new();
        let bound = params.bind(&mut g, cfg.train_encoder, true)?;
        let c = g.constant(content.to_chw())?;
        let s = g.constant(style.to_chw())?;
        let t = stylize_graph(&mut g, &bound, c, s, &cfg.style)?;
        let lv = stylizer_loss_graph(&mut g, &bound.encoder, t.output, c, &t.content_pyramid, &t.style_pyramid, &cfg.weights)?;
        let losses = YuvLosses::read(&g, &lv);
        if !losses.total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                reason: "non-finite stylizer loss".into(),
            });
        }
        let mut grads = g.backward(lv.total).map_err(|e| Error::Diverged {
            iteration: it,
            reason: e.to_string(),
        })?;
        let vars = bound.vars();
        let gs: Vec<Tensor<f32>> = vars[skip..]
            .iter()
            .zip(params.tensors_mut().into_iter().skip(skip))
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        let mut ps: Vec<&mut Tensor<f32>> = params.tensors_mut().into_iter().skip(skip).collect();
        let grefs: Vec<&Tensor<f32>> = gs.iter().collect();
        adam.step(&mut ps, &grefs)?;
        log.push(StylizerLogRow {
            iteration: it,
            content_index: ci,
            style_index: si,
            losses,
        });
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use rand::Rng;

    fn tiny_dims() -> StylizerDims {
        StylizerDims {
            tiers: [3, 3, 4, 4],
            hidden: 2,
        }
    }

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, 3, |_, _, _| rng.random())
    }

    fn smooth_image(w: usize, h: usize, phase: f32) -> Image {
        Image::from_fn(w, h, 3, |x, y, c| {
            0.5 + 0.4 * ((x as f32 * 0.2 + phase + c as f32).sin() * (y as f32 * 0.15 - phase).cos())
        })
    }

    #[test]
    fn trace_extents_and_channel_provenance() {
        let p = StylizerParams::<f32>::new(tiny_dims(), &mut ChaCha8Rng::seed_from_u64(1));
        let content = random_image(40, 36, 2);
        let style = random_image(50, 33, 3);
        let cfg = StyleConfig {
            low_res: 32,
            blur: None,
        };
        let t = stylize(&content, &style, &p, &cfg).unwrap();
        assert_eq!((t.output.width(), t.output.height()), (40, 36));
        assert_eq!((t.content_low.width(), t.content_low.height()), (32, 29));
        assert_eq!(t.style_low.width(), 32);
        assert_eq!(t.splat[0].shape()[0], 3);
        assert_eq!(t.splat[4].shape()[0], 4);
        for img in [&t.output, &t.low_stylized, &t.full_stylized, &t.smoothed] {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for (comb, sm) in t.combined_yuv.data().chunks(3).zip(t.smoothed_yuv.data().chunks(3)) {
            assert_eq!(comb[1].to_bits(), sm[1].to_bits());
            assert_eq!(comb[2].to_bits(), sm[2].to_bits());
        }
        for (comb, m) in t.combined_yuv.data().chunks(3).zip(t.matched_yuv.data().chunks(3)) {
            assert_eq!(comb[0].to_bits(), m[0].to_bits());
        }
        assert!(stylize(&random_image(31, 40, 1), &style, &p, &cfg).is_err());
    }

    #[test]
    fn decoder_concat_widths_follow_table() {
        let d = StylizerDims::default();
        let e = d.decoder_extents();
        // Conv4 eats up-sampled Conv5 output (256) plus SB4 (256)
        assert_eq!(e[3].0, e[4].2 + d.splat_channels()[3]);
        assert_eq!(e[3].0, 512);
        assert_eq!(e[0].0, e[1].2 + d.splat_channels()[0]);
        assert_eq!(e[0].0, 6);
    }

    #[test]
    fn full_size_pyramid_on_512_image() {
        let p = StylizerParams::<f32>::new(StylizerDims::default(), &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::<f32>::new();
        let enc: Vec<BoundConv> = p.encoder.iter().map(|c| c.bind(&mut g, false).unwrap()).collect();
        let img = g.constant(smooth_image(512, 512, 0.3).to_chw()).unwrap();
        let pyr = extract_pyramid_graph(&mut g, &enc, img).unwrap();
        let shapes: Vec<Vec<usize>> = pyr.levels.iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![512, 64, 64], vec![256, 128, 128], vec![128, 256, 256], vec![64, 512, 512]]
        );
    }

    #[test]
    fn fixed_point_losses_vanish() {
        let p = StylizerParams::<f32>::new(tiny_dims(), &mut ChaCha8Rng::seed_from_u64(5));
        let img = smooth_image(36, 32, 0.7);
        let cfg = StyleConfig {
            low_res: 32,
            blur: None,
        };
        let l = losses_for_output(&p, &img, &img, &img, &YuvLossWeights::default(), &cfg).unwrap();
        assert!(l.content.abs() < 1e-12 && l.style.abs() < 1e-12 && l.ssim.abs() < 1e-9, "{l:?}");
        assert!((l.psnr + PSNR_CAP / 50.0).abs() < 1e-9);
    }

    #[test]
    fn weight_isolation_and_sum() {
        let p = StylizerParams::<f32>::new(tiny_dims(), &mut ChaCha8Rng::seed_from_u64(6));
        let (c, s) = (random_image(32, 32, 7), random_image(32, 32, 8));
        let cfg = StyleConfig {
            low_res: 32,
            blur: None,
        };
        let t = stylize(&c, &s, &p, &cfg).unwrap();
        let only_c = YuvLossWeights {
            content: 1.0,
            style: 0.0,
            psnr: 0.0,
            ssim: 0.0,
        };
        let l = stylizer_losses(&p, &t, &c, &s, &only_c, &cfg).unwrap();
        assert_eq!(l.total, l.content);
        let w = YuvLossWeights::default();
        let l = stylizer_losses(&p, &t, &c, &s, &w, &cfg).unwrap();
        let sum = w.content * l.content + w.style * l.style + w.psnr * l.psnr + w.ssim * l.ssim;
        assert!((l.total - sum).abs() <= 1e-12 * sum.abs().max(1.0));
    }

    #[test]
    fn psnr_loss_reference_value() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full([1, 4, 4], 0.5)).unwrap();
        let b = g.constant(Tensor::full([1, 4, 4], 0.6)).unwrap();
        let l = psnr_loss_graph(&mut g, a, b).unwrap();
        assert!((g.value(l).item() + 0.4).abs() < 1e-9);
    }

    #[test]
    fn style_code_properties() {
        let p = StylizerParams::<f32>::new(StylizerDims::default(), &mut ChaCha8Rng::seed_from_u64(9));
        let cfg = StyleConfig {
            low_res: 32,
            blur: None,
        };
        let code = style_code(&Image::filled(40, 40, &[0.2, 0.5, 0.9]), &p, &cfg).unwrap();
        assert_eq!(code.0.len(), 512);
        // a constant image gives spatially constant features; the code is
        // any single position of the top tier
        let mut g = Graph::<f32>::new();
        let enc: Vec<BoundConv> = p.encoder.iter().map(|c| c.bind(&mut g, false).unwrap()).collect();
        let img = g.constant(Image::filled(32, 32, &[0.2, 0.5, 0.9]).to_chw()).unwrap();
        let pyr = extract_pyramid_graph(&mut g, &enc, img).unwrap();
        let top = g.value(pyr.levels[0]);
        let n = top.numel() / 512;
        for (c, &v) in code.0.iter().enumerate() {
            assert!((top.data()[c * n] - v).abs() <= 1e-5);
        }
    }

    #[test]
    fn style_code_is_permutation_invariant_for_pointwise_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = StylizerParams::<f32>::new(
            StylizerDims {
                tiers: [4, 4, 5, 6],
                hidden: 2,
            },
            &mut rng,
        );
        // centre-tap, non-negative weights and zero bias: every layer is a
        // per-pixel linear map on non-negative input, so pooling commutes
        for conv in &mut p.encoder {
            let (o, i) = (conv.c_out(), conv.c_in());
            for oc in 0..o {
                for ic in 0..i {
                    for k in 0..9 {
                        conv.weight.data_mut()[(oc * i + ic) * 9 + k] = if k == 4 { rng.random_range(0.0..1.0) } else { 0.0 };
                    }
                }
            }
            conv.bias = Tensor::zeros([o]);
        }
        let img = random_image(32, 32, 11);
        let mut perm: Vec<usize> = (0..32 * 32).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let shuffled = Image::from_fn(32, 32, 3, |x, y, c| {
            let src = perm[y * 32 + x];
            img.pixel(src % 32, src / 32)[c]
        });
        let cfg = StyleConfig {
            low_res: 32,
            blur: None,
        };
        let a = style_code(&img, &p, &cfg).unwrap();
        let b = style_code(&shuffled, &p, &cfg).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }

    #[test]
    fn pipeline_gradients_match_finite_differences() {
        // every trainable tensor of a narrow stylizer on 16x16 images
        let p = StylizerParams::<f64>::new(
            StylizerDims {
                tiers: [2, 2, 2, 2],
                hidden: 2,
            },
            &mut ChaCha8Rng::seed_from_u64(12),
        );
        let named = p.named();
        // zero biases behind a dead channel sit exactly on a ReLU kink,
        // where central differences average the one-sided slopes
        let params: Vec<Tensor<f64>> = named
            .iter()
            .enumerate()
            .map(|(i, (name, t))| {
                if name.ends_with("bias") {
                    gradcheck::random(t.shape(), 100 + i as u64, 0.05, 0.2)
                } else {
                    (*t).clone()
                }
            })
            .collect();
        let content = gradcheck::random(&[3, 16, 16], 13, 0.1, 0.9);
        let style = gradcheck::random(&[3, 16, 16], 14, 0.1, 0.9);
        let cfg = StyleConfig {
            low_res: 16,
            blur: Some((3, 0.8)),
        };
        let structure = p.clone();
        let err = gradcheck::max_rel_error(&params, 1e-6, |g, v| {
            let bound = rebind(&structure, v);
            let c = g.constant(content.clone())?;
            let s = g.constant(style.clone())?;
            let t = stylize_graph(g, &bound, c, s, &cfg)?;
            let l = stylizer_loss_graph(g, &bound.encoder, t.output, c, &t.content_pyramid, &t.style_pyramid, &YuvLossWeights::default())?;
            let proj = gradcheck::project(g, t.output, 15)?;
            g.add(l.total, proj)
        });
        assert!(err <= 1e-3, "{err}");
    }

    fn rebind(p: &StylizerParams<f64>, v: &[Var]) -> BoundStylizer {
        let conv = |i: usize| BoundConv {
            weight: v[2 * i],
            bias: v[2 * i + 1],
        };
        let ne = p.encoder.len();
        BoundStylizer {
            encoder: (0..ne).map(conv).collect(),
            splat: (0..5).map(|k| (conv(ne + 2 * k), conv(ne + 2 * k + 1))).collect(),
            decoder: (0..5).map(|k| (conv(ne + 10 + 2 * k), conv(ne + 10 + 2 * k + 1))).collect(),
        }
    }

    #[test]
    fn training_is_deterministic_and_rejects_tiny_corpus() {
        let corpus = vec![smooth_image(32, 32, 0.1), smooth_image(32, 32, 2.0), random_image(32, 32, 3)];
        let cfg = StylizerTrainConfig {
            iterations: 3,
            seed: 4,
            style: StyleConfig {
                low_res: 32,
                blur: None,
            },
            ..Default::default()
        };
        let init = StylizerParams::<f32>::new(tiny_dims(), &mut ChaCha8Rng::seed_from_u64(5));
        let (pa, la) = train_stylizer(&corpus, init.clone(), &cfg).unwrap();
        let (pb, lb) = train_stylizer(&corpus, init.clone(), &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(pa, pb);
        assert_eq!(pa.encoder, init.encoder);
        assert!(la.iter().all(|r| r.content_index != r.style_index));
        assert!(train_stylizer(&corpus[..1], init, &cfg).is_err());
    }
}
