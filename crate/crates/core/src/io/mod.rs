//! Datasets, procedural scenes, image codecs and checkpoints.

pub mod bundle;
pub mod checkpoint;
pub mod dataset;
pub mod image;
pub mod procedural;

pub use bundle::{BundleMeta, HyperMeta, ModelBundle, Stage};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Chunk, ChunkTag};
pub use dataset::{load_nerf_synthetic, write_nerf_synthetic, PoseFile, SceneDataset, SceneView, Split};
pub use self::image::{alpha_over, decode_depth_png, decode_image, decode_png, encode_depth_png, encode_png, load_image_dir, read_depth_png, read_png, read_rgb, write_depth_png, write_png};
pub use procedural::{generate_procedural_scene, ring_cameras, Primitive, ProceduralSpec, RingConfig};
