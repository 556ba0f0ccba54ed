#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxstyle::field::direction_embedding_len;
use voxstyle::hyper::{hyper_linear_dims, HyperNet};
use voxstyle::io::{encode_png, ModelBundle, Stage};
use voxstyle::style::{StyleConfig, StylizerDims, StylizerParams};
use voxstyle::{Image, RgbNet, VoxelField};
use voxstyle_cli::model::bundle_meta;

/// Small untrained model with every component present.
pub fn tiny_style_bundle() -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut field = VoxelField::new([-0.5; 3], [0.5; 3], [8; 3], 4, 1e-3).unwrap();
    for v in field.density_mut().data_mut() {
        *v = rng.random_range(-1.0..3.0);
    }
    for v in field.feature_mut().data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let in_dim = 4 + direction_embedding_len(2);
    let dims = StylizerDims {
        tiers: [4, 4, 4, 8],
        hidden: 2,
    };
    ModelBundle {
        meta: bundle_meta(
            Stage::Style,
            1.0,
            3.0,
            [1.0; 3],
            2.0,
            2,
            StyleConfig { low_res: 32, blur: None },
            serde_json::Value::Null,
        ),
        field: Some(field),
        rgbnet: Some(RgbNet::uniform(in_dim, &mut rng)),
        hypernet: Some(HyperNet::with_dims(8, 6, &hyper_linear_dims(in_dim), false, &mut rng)),
        stylizer: Some(StylizerParams::new(dims, &mut rng)),
    }
}

pub fn pattern_image(seed: u64, w: usize, h: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..1.0));
    Image::from_fn(w, h, 3, |x, y, c| (((x / 4 + y / 4 + c) % 3) as f32 * 0.4 + 0.1) * tint[c])
}

pub fn pattern_png(seed: u64) -> Vec<u8> {
    encode_png(&pattern_image(seed, 40, 36)).unwrap()
}
