//! Command line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxstyle::io::{
    generate_procedural_scene, load_image_dir, load_nerf_synthetic, read_depth_png, write_depth_png, write_png, ModelBundle, PoseFile, ProceduralSpec, RingConfig, SceneDataset, Stage,
};
use voxstyle::metrics::{consistency_protocol, protocol_csv, MaskedRmse, View};
use voxstyle::style::{stylize, train_stylizer, StyleConfig, StylizerDims, StylizerParams, StylizerTrainConfig};
use voxstyle::train::{train_geometry, write_log_csv, write_style_log_csv, StyleTrainConfig, StyleTrainer, TrainConfig};

use crate::model::{bundle_meta, Model};
use crate::server::{serve, ServiceState, DEFAULT_MAX_RESOLUTION};

#[derive(Parser, Debug)]
#[command(name = "voxstyle", version, about = "Voxel radiance fields with render-time style conditioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit density and feature grids plus the color head to posed images.
    TrainGeometry(TrainGeometryArgs),
    /// Fit the style hypernetwork over a trained geometry.
    TrainStyle(TrainStyleArgs),
    /// Train the 2D photorealistic stylizer on an image folder.
    TrainStylizer(TrainStylizerArgs),
    /// Stylize one image with a trained 2D stylizer.
    #[command(name = "stylize-2d")]
    Stylize2d(Stylize2dArgs),
    /// Render a ring of views, optionally stylized, with depth maps.
    Render(RenderArgs),
    /// Short- and long-range consistency of a rendered frame sequence.
    Evaluate(EvaluateArgs),
    /// HTTP render service.
    Serve(ServeArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SceneArgs {
    /// NeRF-synthetic style directory with transforms_{train,test}.json.
    #[arg(long, env = "UPST_SCENE", conflicts_with = "procedural")]
    pub scene: Option<PathBuf>,
    /// Use the built-in procedural desk scene instead of a directory.
    #[arg(long)]
    pub procedural: bool,
    /// Training views of the procedural scene.
    #[arg(long, default_value_t = 20)]
    pub views: usize,
    /// Held-out views of the procedural scene.
    #[arg(long, default_value_t = 5)]
    pub test_views: usize,
    /// Image side of the procedural scene.
    #[arg(long, default_value_t = 100)]
    pub resolution: usize,
}

impl SceneArgs {
    /// The dataset and a suggested viewing radius.
    pub fn load(&self) -> Result<(SceneDataset, f32)> {
        if self.procedural {
            let ring = RingConfig {
                width: self.resolution,
                height: self.resolution,
                ..RingConfig::default()
            };
            let ds = generate_procedural_scene(&ProceduralSpec::desk(), self.views, self.test_views, &ring)?;
            return Ok((ds, ring.radius));
        }
        let Some(dir) = &self.scene else {
            bail!("either --scene <DIR> or --procedural is required");
        };
        let ds = load_nerf_synthetic(dir)?;
        let n = ds.views.len() as f32;
        let radius = ds.views.iter().map(|v| v.camera.origin().norm()).sum::<f32>() / n;
        Ok((ds, radius))
    }
}

#[derive(Args, Debug)]
pub struct TrainGeometryArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1024)]
    pub rays: usize,
    /// Grid nodes per axis.
    #[arg(long, default_value_t = 48)]
    pub grid: usize,
    /// Half extent of the cubic scene box around the origin.
    #[arg(long)]
    pub half_extent: Option<f32>,
    #[arg(long, default_value_t = 0.1)]
    pub lr_grid: f32,
    #[arg(long, default_value_t = 1e-3)]
    pub lr_mlp: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainStyleArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Geometry checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Stylizer checkpoint (its encoder also produces the style codes).
    #[arg(long)]
    pub stylizer: PathBuf,
    /// Folder of style images.
    #[arg(long)]
    pub styles: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    /// Side of the square ray patch per iteration.
    #[arg(long, default_value_t = 100)]
    pub patch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the color head fixed.
    #[arg(long)]
    pub freeze_rgbnet: bool,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainStylizerArgs {
    /// Folder of training images; contents and styles are drawn from it.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    /// Random square crops of this size.
    #[arg(long)]
    pub crop: Option<usize>,
    /// Long side of the low-resolution branch.
    #[arg(long, default_value_t = 512)]
    pub low_res: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also train the feature encoder.
    #[arg(long)]
    pub train_encoder: bool,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Stylize2dArgs {
    /// Checkpoint holding a stylizer.
    #[arg(long)]
    pub stylizer: PathBuf,
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the checkpoint's low-resolution long side.
    #[arg(long)]
    pub low_res: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long, env = "UPST_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Number of views evenly spaced on an orbit.
    #[arg(long)]
    pub pose_ring: usize,
    /// Style image; plain colors when absent.
    #[arg(long)]
    pub style: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Orbit radius; the checkpoint's suggestion when absent.
    #[arg(long)]
    pub radius: Option<f32>,
    #[arg(long, default_value_t = 25.0)]
    pub pitch: f32,
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 40.0)]
    pub fov: f32,
    #[arg(long, default_value_t = 100)]
    pub width: usize,
    #[arg(long, default_value_t = 100)]
    pub height: usize,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Folder of frames, ordered by file name.
    #[arg(long)]
    pub frames: PathBuf,
    /// Folder of 16-bit depth maps matching the frames.
    #[arg(long)]
    pub depths: PathBuf,
    /// Pose file written by `render`.
    #[arg(long)]
    pub poses: PathBuf,
    /// Scene label in the CSV.
    #[arg(long, default_value = "scene")]
    pub name: String,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, env = "UPST_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "UPST_ADDR", default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Largest accepted render width or height.
    #[arg(long, env = "UPST_MAX_RESOLUTION", default_value_t = DEFAULT_MAX_RESOLUTION)]
    pub max_resolution: usize,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 success, 1 runtime failure, 2 usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainGeometry(a) => train_geometry_cmd(a),
        Command::TrainStyle(a) => train_style_cmd(a),
        Command::TrainStylizer(a) => train_stylizer_cmd(a),
        Command::Stylize2d(a) => stylize_2d_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn train_geometry_cmd(a: TrainGeometryArgs) -> Result<()> {
    let (scene, radius) = a.scene.load()?;
    let half = a.half_extent.unwrap_or(if a.scene.procedural { 0.5 } else { 1.5 });
    let cfg = TrainConfig {
        iterations: a.iterations,
        rays_per_batch: a.rays,
        lr_grid: a.lr_grid,
        lr_mlp: a.lr_mlp,
        seed: a.seed,
        grid_resolution: [a.grid; 3],
        bbox_min: [-half; 3],
        bbox_max: [half; 3],
        ..TrainConfig::default()
    };
    let out = train_geometry(&scene, cfg.clone())?;
    if let Some(p) = &a.log {
        write_log_csv(create(p)?, &out.log)?;
    }
    let bundle = ModelBundle {
        meta: bundle_meta(
            Stage::Geometry,
            scene.near,
            scene.far,
            scene.background,
            radius,
            cfg.dir_freqs,
            StyleConfig::default(),
            serde_json::to_value(&cfg)?,
        ),
        field: Some(out.field),
        rgbnet: Some(out.rgbnet),
        hypernet: None,
        stylizer: None,
    };
    bundle.save(&a.out)?;
    if let Some(last) = out.log.last() {
        eprintln!("trained {} iterations, final batch PSNR {:.2} dB", out.log.len(), last.psnr);
    }
    Ok(())
}

fn train_style_cmd(a: TrainStyleArgs) -> Result<()> {
    let (scene, _) = a.scene.load()?;
    let geo = ModelBundle::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let (field, rgbnet) = geo.require_field()?;
    let stylizer = ModelBundle::load(&a.stylizer)
        .with_context(|| format!("loading {}", a.stylizer.display()))?
        .stylizer
        .context("stylizer checkpoint holds no stylizer")?;
    let styles: Vec<_> = load_image_dir(&a.styles, [1.0; 3])?.into_iter().map(|(_, i)| i).collect();
    let style_cfg = StyleConfig {
        low_res: a.patch,
        blur: None,
    };
    let cfg = StyleTrainConfig {
        iterations: a.iterations,
        patch: a.patch,
        lr: a.lr,
        seed: a.seed,
        freeze_rgbnet: a.freeze_rgbnet,
        style: style_cfg,
        ..StyleTrainConfig::default()
    };
    let mut t = StyleTrainer::new(&scene, field, rgbnet.clone(), &stylizer, styles, geo.meta.dir_freqs, 1e-4, cfg.clone())?;
    let mut log = Vec::with_capacity(a.iterations);
    for _ in 0..a.iterations {
        log.push(t.step()?);
    }
    if let Some(p) = &a.log {
        write_style_log_csv(create(p)?, &log)?;
    }
    let mut meta = geo.meta.clone();
    meta.stage = Stage::Style;
    meta.style = style_cfg;
    meta.config = serde_json::json!({ "geometry": geo.meta.config, "style": cfg });
    let bundle = ModelBundle {
        meta,
        field: Some(field.clone()),
        rgbnet: Some(t.rgbnet),
        hypernet: Some(t.hypernet),
        stylizer: Some(stylizer),
    };
    bundle.save(&a.out)?;
    Ok(())
}

fn train_stylizer_cmd(a: TrainStylizerArgs) -> Result<()> {
    let corpus: Vec<_> = load_image_dir(&a.corpus, [1.0; 3])?.into_iter().map(|(_, i)| i).collect();
    let style = StyleConfig {
        low_res: a.low_res,
        blur: None,
    };
    let cfg = StylizerTrainConfig {
        iterations: a.iterations,
        lr: a.lr,
        seed: a.seed,
        crop: a.crop,
        style,
        train_encoder: a.train_encoder,
        ..StylizerTrainConfig::default()
    };
    let init = StylizerParams::new(StylizerDims::default(), &mut ChaCha8Rng::seed_from_u64(a.seed));
    let (params, log) = train_stylizer(&corpus, init, &cfg)?;
    if let Some(p) = &a.log {
        use std::io::Write;
        let mut w = create(p)?;
        writeln!(w, "iteration,content,style,total,content_loss,style_loss,psnr_loss,ssim_loss")?;
        for r in &log {
            let l = &r.losses;
            writeln!(
                w,
                "{},{},{},{:.8},{:.8},{:.8},{:.8},{:.8}",
                r.iteration, r.content_index, r.style_index, l.total, l.content, l.style, l.psnr, l.ssim
            )?;
        }
    }
    let bundle = ModelBundle {
        meta: bundle_meta(Stage::Stylizer, 0.0, 0.0, [1.0; 3], 0.0, 0, style, serde_json::to_value(&cfg)?),
        field: None,
        rgbnet: None,
        hypernet: None,
        stylizer: Some(params),
    };
    bundle.save(&a.out)?;
    Ok(())
}

fn stylize_2d_cmd(a: Stylize2dArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.stylizer).with_context(|| format!("loading {}", a.stylizer.display()))?;
    let params = bundle.stylizer.as_ref().context("checkpoint holds no stylizer")?;
    let mut cfg = bundle.meta.style;
    if let Some(l) = a.low_res {
        cfg.low_res = l;
    }
    let content = voxstyle::io::read_rgb(&a.content, [1.0; 3])?;
    let style = voxstyle::io::read_rgb(&a.style, [1.0; 3])?;
    let out = stylize(&content, &style, params, &cfg)?;
    write_png(&a.out, &out.output)?;
    Ok(())
}

pub const POSES_FILE: &str = "poses.json";

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:03}.png")
}

pub fn depth_name(i: usize) -> String {
    format!("depth_{i:03}.png")
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    if a.pose_ring == 0 {
        bail!("--pose-ring must be at least 1");
    }
    let model = Model::load(&a.checkpoint)?;
    let code = match &a.style {
        Some(p) => Some(model.style_code(&voxstyle::io::read_rgb(p, [1.0; 3])?)?),
        None => None,
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let radius = a.radius.unwrap_or(model.meta().radius);
    let mut cams = Vec::with_capacity(a.pose_ring);
    for i in 0..a.pose_ring {
        let yaw = 360.0 * i as f32 / a.pose_ring as f32;
        let cam = model.orbit_camera(yaw, a.pitch, radius, a.fov, a.width, a.height)?;
        let r = model.render(&cam, code.as_ref())?;
        write_png(a.out.join(frame_name(i)), &r.rgb)?;
        write_depth_png(a.out.join(depth_name(i)), &r.depth, cam.far)?;
        cams.push(cam);
    }
    let poses = PoseFile::from_cameras(&cams)?;
    std::fs::write(a.out.join(POSES_FILE), serde_json::to_string_pretty(&poses)?)?;
    Ok(())
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    out.sort();
    Ok(out)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let poses: PoseFile = serde_json::from_str(&std::fs::read_to_string(&a.poses).with_context(|| format!("reading {}", a.poses.display()))?)
        .with_context(|| format!("parsing {}", a.poses.display()))?;
    let cams = poses.cameras()?;
    let frames: Vec<_> = sorted_pngs(&a.frames)?
        .iter()
        .filter(|p| a.frames != a.depths || !is_depth_file(p))
        .map(|p| voxstyle::io::read_rgb(p, [1.0; 3]))
        .collect::<voxstyle::Result<_>>()?;
    let depths: Vec<_> = sorted_pngs(&a.depths)?
        .iter()
        .filter(|p| a.frames != a.depths || is_depth_file(p))
        .map(|p| read_depth_png(p, poses.far))
        .collect::<voxstyle::Result<_>>()?;
    if frames.len() != cams.len() || depths.len() != cams.len() {
        bail!("{} frames, {} depth maps and {} poses do not line up", frames.len(), depths.len(), cams.len());
    }
    let views: Vec<View> = (0..cams.len())
        .map(|i| View {
            image: &frames[i],
            depth: &depths[i],
            camera: &cams[i],
        })
        .collect();
    let result = consistency_protocol(&views, &MaskedRmse)?;
    let csv = protocol_csv(&[(a.name.as_str(), &result)]);
    match &a.out {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// Frames and depths may share the folder `render` writes.
fn is_depth_file(p: &Path) -> bool {
    p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("depth_"))
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let state = Arc::new(ServiceState::new(model, a.max_resolution));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve(state, &a.addr))
}
