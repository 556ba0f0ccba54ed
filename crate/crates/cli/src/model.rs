//! Loaded model bundles and the operations the commands and the service share.

use anyhow::{anyhow, bail, Context, Result};
use voxstyle::hyper::StyledHead;
use voxstyle::io::bundle::{BundleMeta, ModelBundle, Stage};
use voxstyle::nalgebra::Vector3;
use voxstyle::raster::Image;
use voxstyle::render::{render_image, ColorHead, Rendered};
use voxstyle::style::{style_code, StyleCode, StyleConfig};
use voxstyle::{Camera, RenderOptions};

/// Metadata for a freshly trained bundle; the bundle fills in the shapes.
pub fn bundle_meta(stage: Stage, near: f32, far: f32, background: [f32; 3], radius: f32, dir_freqs: usize, style: StyleConfig, config: serde_json::Value) -> BundleMeta {
    BundleMeta {
        stage,
        bbox_min: [0.0; 3],
        bbox_max: [0.0; 3],
        act_shift: 0.0,
        dir_freqs,
        near,
        far,
        background,
        radius,
        rgbnet_layers: 0,
        hypernet: None,
        stylizer: None,
        style,
        config,
    }
}

/// Read-only view of a bundle that can render, with or without a style.
pub struct Model {
    pub bundle: ModelBundle,
}

impl Model {
    pub fn new(mut bundle: ModelBundle) -> Result<Self> {
        bundle.require_field()?;
        bundle.meta = bundle.synced_meta();
        Ok(Self { bundle })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bundle = ModelBundle::load(path).with_context(|| format!("loading {}", path.display()))?;
        Self::new(bundle)
    }

    pub fn meta(&self) -> &BundleMeta {
        &self.bundle.meta
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            background: self.meta().background,
            dir_freqs: self.meta().dir_freqs,
            ..RenderOptions::default()
        }
    }

    pub fn can_stylize(&self) -> bool {
        self.bundle.hypernet.is_some() && self.bundle.stylizer.is_some()
    }

    /// Code of a style image under this bundle's encoder.
    pub fn style_code(&self, style: &Image) -> Result<StyleCode> {
        let stylizer = self
            .bundle
            .stylizer
            .as_ref()
            .ok_or_else(|| anyhow!("checkpoint has no style encoder"))?;
        if self.bundle.hypernet.is_none() {
            bail!("checkpoint has no style stage");
        }
        Ok(style_code(style, stylizer, &self.meta().style)?)
    }

    pub fn render(&self, camera: &Camera, code: Option<&StyleCode>) -> Result<Rendered> {
        let (field, rgbnet) = self.bundle.require_field()?;
        let opts = self.render_options();
        match code {
            None => Ok(render_image(field, rgbnet as &dyn ColorHead, camera, &opts)?),
            Some(code) => {
                let hyper = self
                    .bundle
                    .hypernet
                    .as_ref()
                    .ok_or_else(|| anyhow!("checkpoint has no style stage"))?;
                let weights = hyper.predict_weights(&code.0)?;
                let head = StyledHead { rgbnet, weights: &weights };
                Ok(render_image(field, &head, camera, &opts)?)
            }
        }
    }

    /// Centre of the scene box, the orbit target.
    pub fn center(&self) -> Vector3<f32> {
        let (a, b) = (self.meta().bbox_min, self.meta().bbox_max);
        Vector3::new(0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2]))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn orbit_camera(&self, yaw: f32, pitch: f32, radius: f32, fov_y: f32, width: usize, height: usize) -> Result<Camera> {
        if width == 0 || height == 0 {
            bail!("resolution must be positive");
        }
        if !(fov_y > 0.0 && fov_y < 180.0) {
            bail!("field of view {fov_y} outside (0, 180)");
        }
        Ok(Camera::orbit(yaw, pitch, radius, self.center(), fov_y, width, height, self.meta().near, self.meta().far)?)
    }
}
