//! Posed image collections and the `transforms_{split}.json` layout.

use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::image::{read_rgb, write_png};
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::render::Camera;

/// Defaults used when a transforms file carries no depth range.
pub const DEFAULT_NEAR: f32 = 2.0;
pub const DEFAULT_FAR: f32 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneView {
    pub image: Image,
    pub camera: Camera,
    pub split: Split,
    /// Ray distance per pixel, when known exactly.
    pub depth: Option<Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub name: String,
    pub views: Vec<SceneView>,
    pub near: f32,
    pub far: f32,
    pub background: [f32; 3],
}

impl SceneDataset {
    pub fn validate(&self) -> Result<()> {
        let first = self.views.first().ok_or_else(|| Error::invalid("dataset has no views"))?;
        if !self.views.iter().any(|v| v.split == Split::Train) {
            return Err(Error::invalid("dataset has no training views"));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::invalid(format!("bad depth range [{}, {}]", self.near, self.far)));
        }
        for (i, v) in self.views.iter().enumerate() {
            if !v.image.same_extent(&first.image) || v.image.channels() != 3 {
                return Err(Error::invalid(format!("view {i} differs in extent from view 0")));
            }
            if (v.camera.width, v.camera.height) != (v.image.width(), v.image.height()) {
                return Err(Error::invalid(format!("view {i}: camera and image extents differ")));
            }
            if v.camera.cam_to_world.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("view {i}: non-finite pose")));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneView> {
        self.views.iter().filter(move |v| v.split == split)
    }

    pub fn width(&self) -> usize {
        self.views.first().map_or(0, |v| v.image.width())
    }

    pub fn height(&self) -> usize {
        self.views.first().map_or(0, |v| v.image.height())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    near: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far: Option<f32>,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    file_path: String,
    /// Camera-to-world, row-major, camera looking down its -z axis.
    transform_matrix: [[f32; 4]; 4],
}

/// Focal length in pixels for a horizontal field of view.
pub fn focal_from_fov_x(width: usize, camera_angle_x: f32) -> f32 {
    0.5 * width as f32 / (0.5 * camera_angle_x).tan()
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn frame_path(base: &Path, file_path: &str) -> PathBuf {
    let p = base.join(file_path.trim_start_matches("./"));
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

fn load_split(dir: &Path, split: Split, background: [f32; 3]) -> Result<Option<(Vec<SceneView>, Option<f32>, Option<f32>)>> {
    let path = dir.join(format!("transforms_{}.json", split.name()));
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let tf: TransformsFile = serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
    if !(tf.camera_angle_x > 0.0 && tf.camera_angle_x < std::f32::consts::PI) {
        return Err(format_err(&path, format!("camera_angle_x {} out of range", tf.camera_angle_x)));
    }
    let mut views = Vec::with_capacity(tf.frames.len());
    for f in &tf.frames {
        let img_path = frame_path(dir, &f.file_path);
        let image = read_rgb(&img_path, background)?;
        let (w, h) = (image.width(), image.height());
        let focal = focal_from_fov_x(w, tf.camera_angle_x);
        let m = Matrix4::from_fn(|r, c| f.transform_matrix[r][c]);
        let camera = Camera::new(w, h, focal, focal, w as f32 / 2.0, h as f32 / 2.0, m, tf.near.unwrap_or(DEFAULT_NEAR), tf.far.unwrap_or(DEFAULT_FAR))
            .map_err(|e| format_err(&path, format!("{}: {e}", f.file_path)))?;
        views.push(SceneView {
            image,
            camera,
            split,
            depth: None,
        });
    }
    Ok(Some((views, tf.near, tf.far)))
}

/// Loads `transforms_train.json` (required) and `transforms_test.json`
/// (optional) with their frames. RGBA frames are composited over white.
pub fn load_nerf_synthetic(dir: impl AsRef<Path>) -> Result<SceneDataset> {
    let dir = dir.as_ref();
    let background = [1.0; 3];
    let (mut views, near, far) = load_split(dir, Split::Train, background)?.ok_or_else(|| Error::Io {
        path: dir.join("transforms_train.json"),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing transforms file"),
    })?;
    if let Some((test, _, _)) = load_split(dir, Split::Test, background)? {
        views.extend(test);
    }
    let ds = SceneDataset {
        name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into()),
        views,
        near: near.unwrap_or(DEFAULT_NEAR),
        far: far.unwrap_or(DEFAULT_FAR),
        background,
    };
    ds.validate().map_err(|e| format_err(dir, e.to_string()))?;
    Ok(ds)
}

/// Writes the dataset in the layout read by [`load_nerf_synthetic`].
/// Horizontal field of view is taken from the first view of each split.
pub fn write_nerf_synthetic(dir: impl AsRef<Path>, ds: &SceneDataset) -> Result<()> {
    let dir = dir.as_ref();
    for split in [Split::Train, Split::Test] {
        let views: Vec<&SceneView> = ds.split(split).collect();
        let Some(first) = views.first() else { continue };
        let sub = dir.join(split.name());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let camera_angle_x = 2.0 * (0.5 * first.camera.width as f32 / first.camera.fx).atan();
        let mut frames = Vec::new();
        for (i, v) in views.iter().enumerate() {
            let rel = format!("./{}/r_{i}", split.name());
            write_png(sub.join(format!("r_{i}.png")), &v.image)?;
            let m = &v.camera.cam_to_world;
            frames.push(FrameEntry {
                file_path: rel,
                transform_matrix: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
            });
        }
        let tf = TransformsFile {
            camera_angle_x,
            near: Some(ds.near),
            far: Some(ds.far),
            frames,
        };
        let path = dir.join(format!("transforms_{}.json", split.name()));
        let text = serde_json::to_string_pretty(&tf).map_err(|e| format_err(&path, e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Camera poses of a frame sequence, as written next to rendered frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub camera_angle_x: f32,
    pub width: usize,
    pub height: usize,
    pub near: f32,
    pub far: f32,
    pub frames: Vec<[[f32; 4]; 4]>,
}

impl PoseFile {
    pub fn from_cameras(cams: &[Camera]) -> Result<Self> {
        let c = cams.first().ok_or_else(|| Error::invalid("no cameras"))?;
        Ok(Self {
            camera_angle_x: 2.0 * (0.5 * c.width as f32 / c.fx).atan(),
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
            frames: cams
                .iter()
                .map(|k| std::array::from_fn(|r| std::array::from_fn(|col| k.cam_to_world[(r, col)])))
                .collect(),
        })
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let f = focal_from_fov_x(self.width, self.camera_angle_x);
        self.frames
            .iter()
            .map(|m| {
                Camera::new(
                    self.width,
                    self.height,
                    f,
                    f,
                    self.width as f32 / 2.0,
                    self.height as f32 / 2.0,
                    Matrix4::from_fn(|r, c| m[r][c]),
                    self.near,
                    self.far,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::image::encode_png;
    use nalgebra::Vector3;

    fn fixture(dir: &Path) {
        std::fs::create_dir_all(dir.join("train")).unwrap();
        let rgba = Image::from_fn(8, 6, 4, |x, _, c| if c == 3 { if x < 4 { 1.0 } else { 0.0 } } else { 0.2 });
        for i in 0..2 {
            std::fs::write(dir.join(format!("train/r_{i}.png")), encode_png(&rgba).unwrap()).unwrap();
        }
        let json = r#"{
            "camera_angle_x": 0.6911112,
            "frames": [
                {"file_path": "./train/r_0", "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,4],[0,0,0,1]]},
                {"file_path": "./train/r_1", "transform_matrix": [[0,0,1,4],[0,1,0,0],[-1,0,0,0],[0,0,0,1]]}
            ]
        }"#;
        std::fs::write(dir.join("transforms_train.json"), json).unwrap();
    }

    #[test]
    fn loads_fixture_with_pinhole_focal() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ds = load_nerf_synthetic(dir.path()).unwrap();
        assert_eq!(ds.views.len(), 2);
        let want = 0.5 * 8.0 / (0.3455556f32).tan();
        assert!((ds.views[0].camera.fx - want).abs() < 1e-4);
        assert_eq!((ds.near, ds.far), (DEFAULT_NEAR, DEFAULT_FAR));
        assert_eq!(ds.views[1].camera.origin(), Vector3::new(4.0, 0.0, 0.0));
        // transparent half composited over white
        assert_eq!(ds.views[0].image.pixel(6, 0), &[1.0, 1.0, 1.0]);
        assert!((ds.views[0].image.pixel(1, 0)[0] - 51.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn missing_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_nerf_synthetic(dir.path()).unwrap_err();
        assert!(err.to_string().contains("transforms_train.json"), "{err}");
        fixture(dir.path());
        std::fs::remove_file(dir.path().join("train/r_1.png")).unwrap();
        let err = load_nerf_synthetic(dir.path()).unwrap_err();
        assert!(err.to_string().contains("r_1.png"), "{err}");
        std::fs::write(dir.path().join("transforms_train.json"), "{").unwrap();
        assert!(matches!(load_nerf_synthetic(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn write_then_load_keeps_poses_exactly() {
        let cams: Vec<Camera> = (0..3)
            .map(|i| Camera::orbit(17.3 * i as f32, 23.1, 2.0, Vector3::zeros(), 40.0, 10, 8, 1.0, 3.0).unwrap())
            .collect();
        let ds = SceneDataset {
            name: "s".into(),
            views: cams
                .iter()
                .enumerate()
                .map(|(i, c)| SceneView {
                    image: Image::filled(10, 8, &[0.2, 0.4, i as f32 / 4.0]),
                    camera: c.clone(),
                    split: if i < 2 { Split::Train } else { Split::Test },
                    depth: None,
                })
                .collect(),
            near: 1.0,
            far: 3.0,
            background: [1.0; 3],
        };
        let dir = tempfile::tempdir().unwrap();
        write_nerf_synthetic(dir.path(), &ds).unwrap();
        let back = load_nerf_synthetic(dir.path()).unwrap();
        assert_eq!(back.views.len(), 3);
        for (a, b) in ds.views.iter().zip(&back.views) {
            assert_eq!(a.camera.cam_to_world, b.camera.cam_to_world);
            assert_eq!(a.split, b.split);
            assert!((a.camera.fx - b.camera.fx).abs() < 1e-3);
        }
        assert_eq!((back.near, back.far), (1.0, 3.0));
    }

    #[test]
    fn pose_file_round_trip() {
        let cams: Vec<Camera> = (0..4)
            .map(|i| Camera::orbit(90.0 * i as f32, 10.0, 2.0, Vector3::zeros(), 40.0, 16, 12, 1.0, 3.0).unwrap())
            .collect();
        let pf = PoseFile::from_cameras(&cams).unwrap();
        let json = serde_json::to_string(&pf).unwrap();
        let back: PoseFile = serde_json::from_str(&json).unwrap();
        for (a, b) in cams.iter().zip(back.cameras().unwrap()) {
            assert_eq!(a.cam_to_world, b.cam_to_world);
            assert!((a.fx - b.fx).abs() < 1e-3);
        }
    }
}
