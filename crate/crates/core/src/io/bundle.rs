//! Whole-model checkpoints: grids, color head, hypernetwork and stylizer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Chunk, ChunkTag};
use crate::error::{Error, Result};
use crate::field::{Linear, Mlp, RgbNet, VoxelField};
use crate::hyper::{branch_sizes, HyperNet};
use crate::numerics::Tensor;
use crate::style::{StyleConfig, StylizerDims, StylizerParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Geometry,
    Style,
    Stylizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperMeta {
    pub code_dim: usize,
    pub hidden: usize,
    pub linear_dims: Vec<usize>,
    pub final_relu: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub stage: Stage,
    pub bbox_min: [f32; 3],
    pub bbox_max: [f32; 3],
    pub act_shift: f32,
    pub dir_freqs: usize,
    pub near: f32,
    pub far: f32,
    pub background: [f32; 3],
    /// Suggested orbit radius for viewers.
    pub radius: f32,
    pub rgbnet_layers: usize,
    pub hypernet: Option<HyperMeta>,
    pub stylizer: Option<StylizerDims>,
    pub style: StyleConfig,
    /// Free-form training configuration for provenance.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Everything needed to render, stylize and resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub meta: BundleMeta,
    pub field: Option<VoxelField>,
    pub rgbnet: Option<RgbNet>,
    pub hypernet: Option<HyperNet>,
    pub stylizer: Option<StylizerParams>,
}

fn mlp_chunks(out: &mut Vec<Chunk>, tag: ChunkTag, prefix: &str, mlp: &Mlp) {
    for (i, l) in mlp.layers.iter().enumerate() {
        out.push(Chunk {
            tag,
            name: format!("{prefix}.{i}.weight"),
            tensor: l.weight.clone(),
        });
        out.push(Chunk {
            tag,
            name: format!("{prefix}.{i}.bias"),
            tensor: l.bias.clone(),
        });
    }
}

fn take_mlp(ck: &Checkpoint, prefix: &str, layers: usize, final_relu: bool) -> Result<Mlp> {
    let layers = (0..layers)
        .map(|i| {
            let weight = ck.tensor(&format!("{prefix}.{i}.weight"))?.clone();
            let bias = ck.tensor(&format!("{prefix}.{i}.bias"))?.clone();
            let s = weight.shape();
            if s.len() != 2 || bias.shape() != [s[1]] {
                return Err(Error::Checkpoint(format!("{prefix}.{i}: weight {s:?} and bias {:?} disagree", bias.shape())));
            }
            Ok(Linear { weight, bias })
        })
        .collect::<Result<Vec<_>>>()?;
    for w in layers.windows(2) {
        if w[0].fan_out() != w[1].fan_in() {
            return Err(Error::Checkpoint(format!("{prefix}: consecutive layers do not chain")));
        }
    }
    Ok(Mlp { layers, final_relu })
}

fn fill(dst: &mut Tensor, src: &Tensor, name: &str) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", src.shape(), dst.shape())));
    }
    *dst = src.clone();
    Ok(())
}

impl ModelBundle {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut chunks = Vec::new();
        if let Some(f) = &self.field {
            chunks.push(Chunk {
                tag: ChunkTag::Density,
                name: "density".into(),
                tensor: f.density().clone(),
            });
            chunks.push(Chunk {
                tag: ChunkTag::Feature,
                name: "feature".into(),
                tensor: f.feature().clone(),
            });
        }
        if let Some(r) = &self.rgbnet {
            mlp_chunks(&mut chunks, ChunkTag::RgbNet, "rgbnet", &r.mlp);
        }
        if let Some(h) = &self.hypernet {
            for (b, m) in h.branches.iter().enumerate() {
                mlp_chunks(&mut chunks, ChunkTag::HyperNet, &format!("hypernet.{b}"), m);
            }
        }
        if let Some(s) = &self.stylizer {
            let enc = s.encoder_tensor_count();
            for (i, (name, t)) in s.named().into_iter().enumerate() {
                chunks.push(Chunk {
                    tag: if i < enc { ChunkTag::Encoder } else { ChunkTag::Stylizer },
                    name: format!("stylizer.{name}"),
                    tensor: t.clone(),
                });
            }
        }
        let meta = self.synced_meta();
        Ok(Checkpoint {
            meta: serde_json::to_value(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
            chunks,
        })
    }

    /// Metadata with the shape fields taken from the components present.
    pub fn synced_meta(&self) -> BundleMeta {
        let mut meta = self.meta.clone();
        if let Some(f) = &self.field {
            meta.bbox_min = f.bbox_min();
            meta.bbox_max = f.bbox_max();
            meta.act_shift = f.act_shift();
        }
        meta.rgbnet_layers = self.rgbnet.as_ref().map_or(0, |r| r.mlp.layers.len());
        meta.hypernet = self.hypernet.as_ref().map(|h| HyperMeta {
            code_dim: h.code_dim(),
            hidden: h.branches[0].layers[0].fan_out(),
            linear_dims: h.linear_dims.clone(),
            final_relu: h.branches[0].final_relu,
        });
        meta.stylizer = self.stylizer.as_ref().map(|s| s.dims);
        meta
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: BundleMeta = serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let field = match (ck.get("density"), ck.get("feature")) {
            (Some(d), Some(f)) => Some(
                VoxelField::from_parts(meta.bbox_min, meta.bbox_max, d.tensor.clone(), f.tensor.clone(), meta.act_shift)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            ),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("density and feature grids must be stored together".into())),
        };
        let rgbnet = if meta.rgbnet_layers > 0 {
            Some(RgbNet {
                mlp: take_mlp(ck, "rgbnet", meta.rgbnet_layers, false)?,
            })
        } else {
            None
        };
        let hypernet = match &meta.hypernet {
            Some(h) => {
                let sizes = branch_sizes(&h.linear_dims);
                let branches = (0..sizes.len())
                    .map(|b| {
                        let m = take_mlp(ck, &format!("hypernet.{b}"), 3, h.final_relu)?;
                        if m.dims() != [h.code_dim, h.hidden, h.hidden, sizes[b]] {
                            return Err(Error::Checkpoint(format!("hypernet.{b}: dims {:?}", m.dims())));
                        }
                        Ok(m)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(HyperNet {
                    branches,
                    linear_dims: h.linear_dims.clone(),
                })
            }
            None => None,
        };
        let stylizer = match meta.stylizer {
            Some(dims) => {
                let mut p = StylizerParams::new(dims, &mut ChaCha8Rng::seed_from_u64(0));
                let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
                for (name, dst) in names.iter().zip(p.tensors_mut()) {
                    let key = format!("stylizer.{name}");
                    fill(dst, ck.tensor(&key)?, &key)?;
                }
                Some(p)
            }
            None => None,
        };
        Ok(Self {
            meta,
            field,
            rgbnet,
            hypernet,
            stylizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    pub fn require_field(&self) -> Result<(&VoxelField, &RgbNet)> {
        match (&self.field, &self.rgbnet) {
            (Some(f), Some(r)) => Ok((f, r)),
            _ => Err(Error::Checkpoint("checkpoint holds no trained scene".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::direction_embedding_len;

    fn meta() -> BundleMeta {
        BundleMeta {
            stage: Stage::Style,
            bbox_min: [0.0; 3],
            bbox_max: [0.0; 3],
            act_shift: 0.0,
            dir_freqs: 2,
            near: 1.0,
            far: 3.0,
            background: [1.0; 3],
            radius: 2.0,
            rgbnet_layers: 0,
            hypernet: None,
            stylizer: None,
            style: StyleConfig::default(),
            config: serde_json::Value::Null,
        }
    }

    #[test]
    fn bundle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut field = VoxelField::new([-0.5; 3], [0.5; 3], [4, 5, 6], 3, 1e-3).unwrap();
        field.density_mut().data_mut()[7] = 2.5;
        let in_dim = 3 + direction_embedding_len(2);
        let bundle = ModelBundle {
            meta: meta(),
            field: Some(field),
            rgbnet: Some(RgbNet::uniform(in_dim, &mut rng)),
            hypernet: Some(HyperNet::with_dims(8, 4, &[in_dim, 5, in_dim], false, &mut rng)),
            stylizer: Some(StylizerParams::new(
                StylizerDims {
                    tiers: [3, 4, 4, 5],
                    hidden: 2,
                },
                &mut rng,
            )),
        };
        let ck = bundle.to_checkpoint().unwrap();
        assert_eq!(ck.with_tag(ChunkTag::Encoder).count(), 8);
        let back = ModelBundle::from_checkpoint(&Checkpoint::decode(&ck.encode().unwrap()).unwrap()).unwrap();
        assert_eq!(back.field, bundle.field);
        assert_eq!(back.rgbnet, bundle.rgbnet);
        assert_eq!(back.hypernet, bundle.hypernet);
        assert_eq!(back.stylizer, bundle.stylizer);
        assert_eq!(back.to_checkpoint().unwrap().encode().unwrap(), ck.encode().unwrap());
    }

    #[test]
    fn missing_tensor_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bundle = ModelBundle {
            meta: meta(),
            field: None,
            rgbnet: Some(RgbNet::uniform(9, &mut rng)),
            hypernet: None,
            stylizer: None,
        };
        let mut ck = bundle.to_checkpoint().unwrap();
        ck.chunks.retain(|c| c.name != "rgbnet.1.bias");
        let err = ModelBundle::from_checkpoint(&ck).unwrap_err();
        assert!(err.to_string().contains("rgbnet.1.bias"));
    }
}
