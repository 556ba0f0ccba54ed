//! Analytic scenes of flat-colored spheres and boxes, ray traced with exact depth.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::dataset::{SceneDataset, SceneView, Split};
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::render::{ray_box, Camera, Ray};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere { center: [f32; 3], radius: f32, color: [f32; 3] },
    Box { min: [f32; 3], max: [f32; 3], color: [f32; 3] },
}

impl Primitive {
    pub fn color(&self) -> [f32; 3] {
        match *self {
            Primitive::Sphere { color, .. } | Primitive::Box { color, .. } => color,
        }
    }

    /// Nearest hit distance in `(t_min, inf)`.
    pub fn intersect(&self, ray: &Ray, t_min: f32) -> Option<f32> {
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                // solve in f64; grazing rays lose too much in f32
                let o = ray.origin.cast::<f64>() - Vector3::from(center).cast::<f64>();
                let d = ray.dir.cast::<f64>();
                let b = o.dot(&d);
                let c = o.norm_squared() - (radius as f64).powi(2);
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].into_iter().map(|t| t as f32).find(|&t| t > t_min)
            }
            Primitive::Box { min, max, .. } => {
                let (t0, t1) = ray_box(ray, min, max)?;
                [t0, t1].into_iter().find(|&t| t > t_min)
            }
        }
    }

    fn bounds(&self) -> ([f32; 3], [f32; 3]) {
        match *self {
            Primitive::Sphere { center, radius, .. } => (center.map(|c| c - radius), center.map(|c| c + radius)),
            Primitive::Box { min, max, .. } => (min, max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralSpec {
    pub primitives: Vec<Primitive>,
    pub background: [f32; 3],
    pub bbox_min: [f32; 3],
    pub bbox_max: [f32; 3],
}

impl ProceduralSpec {
    /// Two spheres and a box inside the unit cube, at least 0.15 apart so
    /// every color edge is also a depth edge.
    pub fn desk() -> Self {
        Self {
            primitives: vec![
                Primitive::Sphere {
                    center: [-0.2, -0.15, 0.1],
                    radius: 0.2,
                    color: [0.85, 0.35, 0.3],
                },
                Primitive::Box {
                    min: [0.12, -0.45, -0.35],
                    max: [0.42, -0.1, -0.05],
                    color: [0.3, 0.5, 0.85],
                },
                Primitive::Sphere {
                    center: [0.15, 0.25, 0.2],
                    radius: 0.12,
                    color: [0.4, 0.75, 0.4],
                },
            ],
            background: [1.0; 3],
            bbox_min: [-0.5; 3],
            bbox_max: [0.5; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            let (lo, hi) = p.bounds();
            let ok = (0..3).all(|k| lo[k] >= self.bbox_min[k] && hi[k] <= self.bbox_max[k] && lo[k] < hi[k]);
            if !ok || p.color().iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::invalid(format!("primitive {i} leaves the scene box or has a bad color")));
            }
        }
        Ok(())
    }

    /// Nearest primitive hit within `[near, far]`.
    pub fn trace(&self, ray: &Ray, near: f32, far: f32) -> Option<(f32, [f32; 3])> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(ray, near).map(|t| (t, p.color())))
            .filter(|&(t, _)| t <= far)
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Color and ray-distance depth; misses give the background and `far`.
    pub fn render(&self, camera: &Camera) -> (Image, Image) {
        let (w, h) = (camera.width, camera.height);
        let mut rgb = Image::filled(w, h, &self.background);
        let mut depth = Image::filled(w, h, &[camera.far]);
        for v in 0..h {
            for u in 0..w {
                if let Some((t, c)) = self.trace(&camera.pixel_ray(u, v), camera.near, camera.far) {
                    rgb.pixel_mut(u, v).copy_from_slice(&c);
                    depth.pixel_mut(u, v)[0] = t;
                }
            }
        }
        (rgb, depth)
    }
}

/// Layout of the camera ring around the scene centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingConfig {
    pub radius: f32,
    pub pitch_deg: f32,
    pub fov_y_deg: f32,
    pub width: usize,
    pub height: usize,
    pub near: f32,
    pub far: f32,
}

impl Default for RingConfig {
    fn default() -> Self {
        Self {
            radius: 2.0,
            pitch_deg: 25.0,
            fov_y_deg: 40.0,
            width: 100,
            height: 100,
            near: 1.0,
            far: 3.0,
        }
    }
}

/// `n` cameras evenly spaced in yaw, starting at `yaw_offset_deg`.
pub fn ring_cameras(n: usize, yaw_offset_deg: f32, ring: &RingConfig) -> Result<Vec<Camera>> {
    (0..n)
        .map(|i| {
            Camera::orbit(
                yaw_offset_deg + 360.0 * i as f32 / n as f32,
                ring.pitch_deg,
                ring.radius,
                Vector3::zeros(),
                ring.fov_y_deg,
                ring.width,
                ring.height,
                ring.near,
                ring.far,
            )
        })
        .collect()
}

/// Training views on a ring; test views on the same ring, offset half a step.
pub fn generate_procedural_scene(spec: &ProceduralSpec, n_train: usize, n_test: usize, ring: &RingConfig) -> Result<SceneDataset> {
    if spec.primitives.is_empty() {
        return Err(Error::invalid("procedural scene has no primitives"));
    }
    if n_train == 0 {
        return Err(Error::invalid("procedural scene needs at least one training view"));
    }
    spec.validate()?;
    let train = ring_cameras(n_train, 0.0, ring)?;
    let test = ring_cameras(n_test, 180.0 / n_train as f32, ring)?;
    let views = train
        .into_iter()
        .map(|c| (c, Split::Train))
        .chain(test.into_iter().map(|c| (c, Split::Test)))
        .map(|(camera, split)| {
            let (image, depth) = spec.render(&camera);
            SceneView {
                image,
                camera,
                split,
                depth: Some(depth),
            }
        })
        .collect();
    let ds = SceneDataset {
        name: "procedural".into(),
        views,
        near: ring.near,
        far: ring.far,
        background: spec.background,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{consistency_error, MaskedRmse, View};

    #[test]
    fn single_sphere_on_axis() {
        let spec = ProceduralSpec {
            primitives: vec![Primitive::Sphere {
                center: [0.0; 3],
                radius: 0.3,
                color: [1.0, 0.0, 0.0],
            }],
            ..ProceduralSpec::desk()
        };
        let cam = Camera::orbit(0.0, 0.0, 2.0, Vector3::zeros(), 40.0, 21, 21, 1.0, 3.0).unwrap();
        assert!((cam.origin() - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-6);
        let (rgb, depth) = spec.render(&cam);
        assert_eq!(rgb.pixel(10, 10), &[1.0, 0.0, 0.0]);
        assert!((depth.pixel(10, 10)[0] - 1.7).abs() < 1e-5);
        assert_eq!(rgb.pixel(0, 0), &[1.0, 1.0, 1.0]);
        assert_eq!(depth.pixel(0, 0)[0], 3.0);
    }

    #[test]
    fn empty_and_invalid_specs() {
        let empty = ProceduralSpec {
            primitives: vec![],
            ..ProceduralSpec::desk()
        };
        assert!(generate_procedural_scene(&empty, 2, 1, &RingConfig::default()).is_err());
        let cam = Camera::orbit(0.0, 0.0, 2.0, Vector3::zeros(), 40.0, 8, 8, 1.0, 3.0).unwrap();
        let (rgb, depth) = empty.render(&cam);
        assert!(rgb.data().iter().all(|&v| v == 1.0));
        assert!(depth.data().iter().all(|&v| v == 3.0));
        let outside = ProceduralSpec {
            primitives: vec![Primitive::Sphere {
                center: [0.45, 0.0, 0.0],
                radius: 0.1,
                color: [0.5; 3],
            }],
            ..ProceduralSpec::desk()
        };
        assert!(outside.validate().is_err());
    }

    #[test]
    fn box_faces_and_inside_start() {
        let b = Primitive::Box {
            min: [-0.1; 3],
            max: [0.1; 3],
            color: [0.0; 3],
        };
        let r = Ray {
            origin: Vector3::new(0.0, 0.0, 1.0),
            dir: Vector3::new(0.0, 0.0, -1.0),
        };
        assert!((b.intersect(&r, 0.0).unwrap() - 0.9).abs() < 1e-6);
        assert!((b.intersect(&r, 0.95).unwrap() - 1.1).abs() < 1e-6);
    }

    #[test]
    fn desk_scene_views_warp_onto_each_other() {
        let ring = RingConfig {
            width: 48,
            height: 48,
            ..Default::default()
        };
        let ds = generate_procedural_scene(&ProceduralSpec::desk(), 8, 2, &ring).unwrap();
        assert_eq!(ds.split(Split::Train).count(), 8);
        assert_eq!(ds.split(Split::Test).count(), 2);
        let v = |i: usize| View {
            image: &ds.views[i].image,
            depth: ds.views[i].depth.as_ref().unwrap(),
            camera: &ds.views[i].camera,
        };
        for (i, j) in [(0, 1), (1, 0), (0, 9), (3, 4)] {
            let e = consistency_error(v(i), v(j), &MaskedRmse).unwrap().value().unwrap();
            assert!(e <= 1e-3, "({i},{j}) {e}");
        }
    }
}
