//! Geometry and style training stages.
//!
//! Geometry fits the density and feature grids plus the color head to posed
//! photographs. Style keeps the grids fixed and fits the hypernetwork (and,
//! unless frozen, the color head) so that rendered patches match the 2D
//! stylizer's output for the same patch and a corpus style.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{direction_embedding_len, RgbNet, VoxelField, DEFAULT_DIR_FREQS, DEFAULT_FEATURE_DIM, DEFAULT_INIT_ALPHA};
use crate::hyper::{hyper_linear_dims, hyper_linear_graph, HyperNet, HYPERNET_HIDDEN};
use crate::io::dataset::{SceneDataset, SceneView, Split};
use crate::metrics::psnr_from_mse;
use crate::numerics::{AdamConfig, AdamState, Graph, NumericsError, Real, Tensor, Var};
use crate::raster::Image;
use crate::render::{render_graph, render_image, PatchRect, RaySamples, Ray, RenderBundle, RenderOptions, RenderVars};
use crate::style::{style_code, stylize, StyleCode, StyleConfig, StylizerParams};

/// Clamp applied to background transmittance before taking logs.
pub const BG_ENTROPY_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub photo: f64,
    pub pt_rgb: f64,
    pub bg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            photo: 1.0,
            pt_rgb: 0.01,
            bg: 0.001,
        }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<()> {
        if [self.photo, self.pt_rgb, self.bg].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Mean over rays of the squared color error summed over channels.
pub fn photometric_loss_graph<T: Real>(g: &mut Graph<T>, rgb: Var, target: Var) -> Result<Var, NumericsError> {
    let r = g.shape(rgb)[0];
    let d = g.sub(rgb, target)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    g.scale(s, T::one() / T::lit(r.max(1) as f64))
}

/// Compositing-weighted squared error of each shaded sample's color against
/// its ray's target, summed per ray and averaged over rays.
pub fn per_point_rgb_loss_graph<T: Real>(g: &mut Graph<T>, vars: &RenderVars, target: Var) -> Result<Var, NumericsError> {
    let r = g.shape(target)[0];
    let owner: Arc<[usize]> = vars
        .shaded_offsets
        .windows(2)
        .enumerate()
        .flat_map(|(ri, s)| std::iter::repeat_n(ri, s[1] - s[0]))
        .collect();
    let tgt = g.gather_rows(target, owner)?;
    let d = g.sub(vars.colors, tgt)?;
    let sq = g.square(d)?;
    let per = g.sum_axis(sq, 1)?;
    let w = g.mul(per, vars.shaded_weights)?;
    let s = g.sum(w)?;
    g.scale(s, T::one() / T::lit(r.max(1) as f64))
}

/// Mean binary entropy of the background transmittance.
pub fn background_entropy_graph<T: Real>(g: &mut Graph<T>, t_last: Var) -> Result<Var, NumericsError> {
    let eps = T::lit(BG_ENTROPY_EPS);
    let t = g.clamp(t_last, eps, T::one() - eps)?;
    let lt = g.log(t)?;
    let a = g.mul(t, lt)?;
    let neg = g.scale(t, -T::one())?;
    let u = g.add_scalar(neg, T::one())?;
    let lu = g.log(u)?;
    let b = g.mul(u, lu)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    g.scale(m, -T::one())
}

pub fn photometric_loss(rgb: &[[f32; 3]], target: &[[f32; 3]]) -> Result<f64> {
    if rgb.is_empty() || rgb.len() != target.len() {
        return Err(Error::invalid(format!("photometric loss over {} vs {} rays", rgb.len(), target.len())));
    }
    let s: f64 = rgb
        .iter()
        .zip(target)
        .map(|(a, b)| (0..3).map(|c| (a[c] as f64 - b[c] as f64).powi(2)).sum::<f64>())
        .sum();
    Ok(s / rgb.len() as f64)
}

/// Over every sample of the bundle, shaded or not.
pub fn per_point_rgb_loss(bundle: &RenderBundle, target: &[[f32; 3]]) -> Result<f64> {
    let r = bundle.offsets.len().saturating_sub(1);
    if r != target.len() {
        return Err(Error::invalid(format!("bundle has {r} rays, target {}", target.len())));
    }
    let mut s = 0.0f64;
    for (ri, seg) in bundle.offsets.windows(2).enumerate() {
        for i in seg[0]..seg[1] {
            let w = bundle.trans[i] as f64 * bundle.alpha[i] as f64;
            let e: f64 = (0..3).map(|c| (bundle.colors[i][c] as f64 - target[ri][c] as f64).powi(2)).sum();
            s += w * e;
        }
    }
    Ok(s / r.max(1) as f64)
}

pub fn background_entropy(t_last: f64) -> f64 {
    let t = t_last.clamp(BG_ENTROPY_EPS, 1.0 - BG_ENTROPY_EPS);
    -t * t.ln() - (1.0 - t) * (1.0 - t).ln()
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub photo: Var,
    pub pt_rgb: Var,
    pub bg: Var,
    pub total: Var,
}

/// Weighted sum of the three terms against `target: [R, 3]`.
pub fn combined_loss_graph<T: Real>(g: &mut Graph<T>, vars: &RenderVars, target: Var, w: &LossWeights) -> Result<LossVars, NumericsError> {
    let photo = photometric_loss_graph(g, vars.rgb, target)?;
    let pt_rgb = per_point_rgb_loss_graph(g, vars, target)?;
    let bg = background_entropy_graph(g, vars.t_last)?;
    let a = g.scale(photo, T::lit(w.photo))?;
    let b = g.scale(pt_rgb, T::lit(w.pt_rgb))?;
    let c = g.scale(bg, T::lit(w.bg))?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossVars { photo, pt_rgb, bg, total })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub photo: f64,
    pub pt_rgb: f64,
    pub bg: f64,
}

impl LossValues {
    fn read(g: &Graph<f32>, v: &LossVars) -> Self {
        let f = |x: Var| g.value(x).item() as f64;
        Self {
            total: f(v.total),
            photo: f(v.photo),
            pt_rgb: f(v.pt_rgb),
            bg: f(v.bg),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: LossValues,
    /// PSNR of the batch, from the photometric term.
    pub psnr: f64,
}

pub const LOG_CSV_HEADER: &str = "iteration,loss,photo,pt_rgb,bg,psnr";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.4}",
            self.iteration, self.loss.total, self.loss.photo, self.loss.pt_rgb, self.loss.bg, self.psnr
        )
    }
}

pub fn write_log_csv(mut out: impl Write, rows: &[LogRow]) -> std::io::Result<()> {
    writeln!(out, "{LOG_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub lr_grid: f32,
    pub lr_mlp: f32,
    pub seed: u64,
    pub weights: LossWeights,
    pub grid_resolution: [usize; 3],
    pub feature_dim: usize,
    pub dir_freqs: usize,
    pub init_alpha: f32,
    pub weight_threshold: f32,
    pub bbox_min: [f32; 3],
    pub bbox_max: [f32; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            rays_per_batch: 1024,
            lr_grid: 0.1,
            lr_mlp: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            grid_resolution: [48; 3],
            feature_dim: DEFAULT_FEATURE_DIM,
            dir_freqs: DEFAULT_DIR_FREQS,
            init_alpha: DEFAULT_INIT_ALPHA,
            weight_threshold: 1e-4,
            bbox_min: [-0.5; 3],
            bbox_max: [0.5; 3],
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.rays_per_batch == 0 {
            return Err(Error::invalid("iterations and rays per batch must be positive"));
        }
        if !(self.lr_grid > 0.0 && self.lr_mlp > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        self.weights.validate()
    }

    pub fn render_options(&self, background: [f32; 3]) -> RenderOptions {
        RenderOptions {
            background,
            weight_threshold: self.weight_threshold,
            dir_freqs: self.dir_freqs,
            ..RenderOptions::default()
        }
    }
}

/// Every pixel ray of a set of views with its color.
struct RayPool {
    rays: Vec<Ray>,
    colors: Vec<[f32; 3]>,
}

impl RayPool {
    fn new<'a>(views: impl Iterator<Item = &'a SceneView>) -> Self {
        let mut rays = Vec::new();
        let mut colors = Vec::new();
        for v in views {
            for y in 0..v.image.height() {
                for x in 0..v.image.width() {
                    rays.push(v.camera.pixel_ray(x, y));
                    let p = v.image.pixel(x, y);
                    colors.push([p[0], p[1], p[2]]);
                }
            }
        }
        Self { rays, colors }
    }
}

fn target_tensor(colors: &[[f32; 3]]) -> Result<Tensor> {
    Ok(Tensor::new([colors.len(), 3], colors.iter().flatten().copied().collect())?)
}

fn diverged(iteration: usize, reason: impl Into<String>) -> Error {
    Error::Diverged {
        iteration,
        reason: reason.into(),
    }
}

/// Incremental geometry optimizer. A failed step leaves the parameters as
/// they were before it, so they remain the last good state.
pub struct GeometryTrainer {
    pub field: VoxelField,
    pub rgbnet: RgbNet,
    pub config: TrainConfig,
    pub near: f32,
    pub far: f32,
    pub background: [f32; 3],
    pub iteration: usize,
    pool: RayPool,
    rng: ChaCha8Rng,
    grid_opt: AdamState,
    mlp_opt: AdamState,
}

impl GeometryTrainer {
    pub fn new(scene: &SceneDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        if scene.views.len() < 2 {
            return Err(Error::invalid("geometry training needs at least two posed views"));
        }
        let field = VoxelField::new(config.bbox_min, config.bbox_max, config.grid_resolution, config.feature_dim, config.init_alpha)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rgbnet = RgbNet::uniform(config.feature_dim + direction_embedding_len(config.dir_freqs), &mut rng);
        Ok(Self {
            field,
            rgbnet,
            near: scene.near,
            far: scene.far,
            background: scene.background,
            iteration: 0,
            pool: RayPool::new(scene.split(Split::Train)),
            rng,
            grid_opt: AdamState::new(AdamConfig::with_lr(config.lr_grid)),
            mlp_opt: AdamState::new(AdamConfig::with_lr(config.lr_mlp)),
            config,
        })
    }

    pub fn step(&mut self) -> Result<LogRow> {
        let it = self.iteration;
        let n = self.pool.rays.len();
        let idx: Vec<usize> = (0..self.config.rays_per_batch).map(|_| self.rng.random_range(0..n)).collect();
        let rays: Vec<Ray> = idx.iter().map(|&i| self.pool.rays[i]).collect();
        let colors: Vec<[f32; 3]> = idx.iter().map(|&i| self.pool.colors[i]).collect();
        let samples = RaySamples::build(&rays, self.near, self.far, &self.field)?;
        let opts = self.config.render_options(self.background);

        let mut g = Graph::<f32>::new();
        let density = g.param(self.field.density().clone())?;
        let feature = g.param(self.field.feature().clone())?;
        let layers = self.rgbnet.mlp.bind(&mut g, true)?;
        let target = g.constant(target_tensor(&colors)?)?;
        let vars = render_graph(&mut g, &self.field, density, feature, &samples, &opts, &mut |g, x| RgbNet::forward(g, &layers, x))?;
        let lv = combined_loss_graph(&mut g, &vars, target, &self.config.weights)?;
        let loss = LossValues::read(&g, &lv);
        if !loss.total.is_finite() {
            return Err(diverged(it, "non-finite geometry loss"));
        }
        let mut grads = g.backward(lv.total).map_err(|e| diverged(it, e.to_string()))?;
        let zeros_like = |t: &Tensor| Tensor::zeros(t.shape().to_vec());
        let gd = grads.take(density).unwrap_or_else(|| zeros_like(self.field.density()));
        let gf = grads.take(feature).unwrap_or_else(|| zeros_like(self.field.feature()));
        let gm: Vec<Tensor> = layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .zip(self.rgbnet.mlp.tensors())
            .map(|(v, t)| grads.take(v).unwrap_or_else(|| zeros_like(t)))
            .collect();
        if !(gd.all_finite() && gf.all_finite() && gm.iter().all(Tensor::all_finite)) {
            return Err(diverged(it, "non-finite gradient"));
        }
        {
            let (d, f) = self.field.grids_mut();
            self.grid_opt.step(&mut [d, f], &[&gd, &gf])?;
        }
        let mut ps = self.rgbnet.mlp.tensors_mut();
        let grefs: Vec<&Tensor> = gm.iter().collect();
        self.mlp_opt.step(&mut ps, &grefs)?;
        self.iteration += 1;
        Ok(LogRow {
            iteration: it,
            loss,
            psnr: psnr_from_mse(loss.photo / 3.0),
        })
    }

    pub fn render_options(&self) -> RenderOptions {
        self.config.render_options(self.background)
    }
}

pub struct GeometryOutcome {
    pub field: VoxelField,
    pub rgbnet: RgbNet,
    pub log: Vec<LogRow>,
}

/// Runs all iterations of the geometry stage.
pub fn train_geometry(scene: &SceneDataset, config: TrainConfig) -> Result<GeometryOutcome> {
    let mut t = GeometryTrainer::new(scene, config)?;
    let mut log = Vec::with_capacity(t.config.iterations);
    for _ in 0..t.config.iterations {
        log.push(t.step()?);
    }
    Ok(GeometryOutcome {
        field: t.field,
        rgbnet: t.rgbnet,
        log,
    })
}

/// Mean PSNR of full renders against the views of `split`.
pub fn evaluate_psnr(field: &VoxelField, head: &dyn crate::render::ColorHead, scene: &SceneDataset, split: Split, opts: &RenderOptions) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for v in scene.split(split) {
        let r = render_image(field, head, &v.camera, opts)?;
        total += crate::metrics::psnr(&r.rgb, &v.image)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid(format!("no {} views", split.name())));
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleTrainConfig {
    pub iterations: usize,
    /// Side of the square training patch.
    pub patch: usize,
    pub lr: f32,
    pub seed: u64,
    pub weights: LossWeights,
    /// Keep the color head fixed and train only the hypernetwork.
    pub freeze_rgbnet: bool,
    /// ReLU on the hypernetwork's output layer.
    pub hyper_final_relu: bool,
    pub style: StyleConfig,
}

impl Default for StyleTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            patch: 100,
            lr: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            freeze_rgbnet: false,
            hyper_final_relu: false,
            style: StyleConfig {
                low_res: 100,
                blur: None,
            },
        }
    }
}

/// One style-stage batch: a ground-truth patch and its stylized target.
#[derive(Clone, Debug)]
pub struct StylePatch {
    pub view: usize,
    pub rect: PatchRect,
    pub style: usize,
    pub target: Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleLogRow {
    pub iteration: usize,
    pub view: usize,
    pub style: usize,
    pub loss: LossValues,
    pub psnr: f64,
}

/// Style-stage optimizer over a fixed geometry.
pub struct StyleTrainer<'a> {
    pub field: &'a VoxelField,
    pub rgbnet: RgbNet,
    pub hypernet: HyperNet,
    pub stylizer: &'a StylizerParams,
    pub styles: Vec<Image>,
    pub codes: Vec<StyleCode>,
    pub config: StyleTrainConfig,
    pub opts: RenderOptions,
    pub iteration: usize,
    views: Vec<&'a SceneView>,
    near: f32,
    far: f32,
    rng: ChaCha8Rng,
    opt: AdamState,
}

impl<'a> StyleTrainer<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scene: &'a SceneDataset,
        field: &'a VoxelField,
        rgbnet: RgbNet,
        stylizer: &'a StylizerParams,
        styles: Vec<Image>,
        dir_freqs: usize,
        weight_threshold: f32,
        config: StyleTrainConfig,
    ) -> Result<Self> {
        if styles.is_empty() {
            return Err(Error::invalid("style corpus is empty"));
        }
        config.weights.validate()?;
        if config.iterations == 0 || !(config.lr > 0.0) {
            return Err(Error::invalid("style training needs iterations > 0 and lr > 0"));
        }
        let views: Vec<&SceneView> = scene.split(Split::Train).collect();
        if views.is_empty() {
            return Err(Error::invalid("scene has no training views"));
        }
        let (w, h) = (scene.width(), scene.height());
        if config.patch == 0 || config.patch > w.min(h) {
            return Err(Error::invalid(format!("patch {} does not fit {w}x{h} views", config.patch)));
        }
        let codes = styles
            .iter()
            .map(|s| style_code(s, stylizer, &config.style))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let hypernet = HyperNet::with_dims(
            stylizer.dims.tiers[3],
            HYPERNET_HIDDEN,
            &hyper_linear_dims(rgbnet.in_dim()),
            config.hyper_final_relu,
            &mut rng,
        );
        Ok(Self {
            field,
            rgbnet,
            hypernet,
            stylizer,
            styles,
            codes,
            opts: RenderOptions {
                background: scene.background,
                weight_threshold,
                dir_freqs,
                ..RenderOptions::default()
            },
            iteration: 0,
            views,
            near: scene.near,
            far: scene.far,
            rng,
            opt: AdamState::new(AdamConfig::with_lr(config.lr)),
            config,
        })
    }

    /// Draws a random view, patch and style and builds the stylized target.
    pub fn sample_patch(&mut self) -> Result<StylePatch> {
        let view = self.rng.random_range(0..self.views.len());
        let v = self.views[view];
        let p = self.config.patch;
        let rect = PatchRect {
            x: self.rng.random_range(0..=v.image.width() - p),
            y: self.rng.random_range(0..=v.image.height() - p),
            size: p,
        };
        let style = self.rng.random_range(0..self.styles.len());
        let target = self.stylized_target(view, rect, style)?;
        Ok(StylePatch { view, rect, style, target })
    }

    pub fn stylized_target(&self, view: usize, rect: PatchRect, style: usize) -> Result<Image> {
        let gt = self.views[view].image.crop(rect.x, rect.y, rect.size, rect.size)?;
        Ok(stylize(&gt, &self.styles[style], self.stylizer, &self.config.style)?.output)
    }

    /// Loss of the current parameters on a patch, with gradients applied
    /// when `update` is set.
    pub fn patch_loss(&mut self, patch: &StylePatch, update: bool) -> Result<LossValues> {
        let it = self.iteration;
        let v = self.views[patch.view];
        let rays: Vec<Ray> = patch.rect.pixels().iter().map(|&(x, y)| v.camera.pixel_ray(x, y)).collect();
        let samples = RaySamples::build(&rays, self.near, self.far, self.field)?;
        let colors: Vec<[f32; 3]> = patch.target.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();

        let mut g = Graph::<f32>::new();
        // frozen grids enter as constants and receive no gradient at all
        let density = g.constant(self.field.density().clone())?;
        let feature = g.constant(self.field.feature().clone())?;
        let rgb_layers = self.rgbnet.mlp.bind(&mut g, update && !self.config.freeze_rgbnet)?;
        let hyper_bound = self.hypernet.bind(&mut g, update)?;
        let code = g.constant(Tensor::new([1, self.codes[patch.style].0.len()], self.codes[patch.style].0.clone())?)?;
        let predicted = self.hypernet.predict_graph(&mut g, &hyper_bound, code)?;
        let target = g.constant(target_tensor(&colors)?)?;
        let vars = render_graph(&mut g, self.field, density, feature, &samples, &self.opts, &mut |g, x| {
            let h = hyper_linear_graph(g, &predicted, x)?;
            RgbNet::forward(g, &rgb_layers, h)
        })?;
        let lv = combined_loss_graph(&mut g, &vars, target, &self.config.weights)?;
        let loss = LossValues::read(&g, &lv);
        if !update {
            return Ok(loss);
        }
        if !loss.total.is_finite() {
            return Err(diverged(it, "non-finite style loss"));
        }
        let mut grads = g.backward(lv.total).map_err(|e| diverged(it, e.to_string()))?;
        let mut vars_list: Vec<Var> = hyper_bound.iter().flatten().flat_map(|&(w, b)| [w, b]).collect();
        let mut params: Vec<&mut Tensor> = self.hypernet.tensors_mut();
        if !self.config.freeze_rgbnet {
            vars_list.extend(rgb_layers.iter().flat_map(|&(w, b)| [w, b]));
            params.extend(self.rgbnet.mlp.tensors_mut());
        }
        let gs: Vec<Tensor> = vars_list
            .iter()
            .zip(params.iter())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        if !gs.iter().all(Tensor::all_finite) {
            return Err(diverged(it, "non-finite gradient"));
        }
        let grefs: Vec<&Tensor> = gs.iter().collect();
        self.opt.step(&mut params, &grefs)?;
        Ok(loss)
    }

    pub fn step(&mut self) -> Result<StyleLogRow> {
        let patch = self.sample_patch()?;
        let loss = self.patch_loss(&patch, true)?;
        let row = StyleLogRow {
            iteration: self.iteration,
            view: patch.view,
            style: patch.style,
            loss,
            psnr: psnr_from_mse(loss.photo / 3.0),
        };
        self.iteration += 1;
        Ok(row)
    }
}

pub const STYLE_LOG_CSV_HEADER: &str = "iteration,view,style,loss,photo,pt_rgb,bg,psnr";

impl StyleLogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.8},{:.8},{:.8},{:.8},{:.4}",
            self.iteration, self.view, self.style, self.loss.total, self.loss.photo, self.loss.pt_rgb, self.loss.bg, self.psnr
        )
    }
}

pub fn write_style_log_csv(mut out: impl Write, rows: &[StyleLogRow]) -> std::io::Result<()> {
    writeln!(out, "{STYLE_LOG_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

pub struct StyleOutcome {
    pub rgbnet: RgbNet,
    pub hypernet: HyperNet,
    pub log: Vec<StyleLogRow>,
}

/// Runs all iterations of the style stage.
#[allow(clippy::too_many_arguments)]
pub fn train_style(
    scene: &SceneDataset,
    field: &VoxelField,
    rgbnet: RgbNet,
    stylizer: &StylizerParams,
    styles: Vec<Image>,
    dir_freqs: usize,
    weight_threshold: f32,
    config: StyleTrainConfig,
) -> Result<StyleOutcome> {
    let mut t = StyleTrainer::new(scene, field, rgbnet, stylizer, styles, dir_freqs, weight_threshold, config)?;
    let mut log = Vec::with_capacity(t.config.iterations);
    for _ in 0..t.config.iterations {
        log.push(t.step()?);
    }
    Ok(StyleOutcome {
        rgbnet: t.rgbnet,
        hypernet: t.hypernet,
        log,
    })
}
