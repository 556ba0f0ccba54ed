//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `VXSTCKPT` | u32 version | u32 meta length | meta JSON | u32 chunk count |
//! chunks. A chunk is a 4-byte tag, u16 name length, name, u8 rank, u32 per
//! dimension, u64 payload length, then the f32 payload.

use std::collections::HashSet;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"VXSTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChunkTag {
    Density,
    Feature,
    RgbNet,
    HyperNet,
    Encoder,
    Stylizer,
}

impl ChunkTag {
    pub fn bytes(self) -> [u8; 4] {
        *match self {
            ChunkTag::Density => b"DENS",
            ChunkTag::Feature => b"FEAT",
            ChunkTag::RgbNet => b"RGBN",
            ChunkTag::HyperNet => b"HYPN",
            ChunkTag::Encoder => b"ENCD",
            ChunkTag::Stylizer => b"STYL",
        }
    }

    pub fn from_bytes(b: [u8; 4]) -> Option<Self> {
        Some(match &b {
            b"DENS" => ChunkTag::Density,
            b"FEAT" => ChunkTag::Feature,
            b"RGBN" => ChunkTag::RgbNet,
            b"HYPN" => ChunkTag::HyperNet,
            b"ENCD" => ChunkTag::Encoder,
            b"STYL" => ChunkTag::Stylizer,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    pub tag: ChunkTag,
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub chunks: Vec<Chunk>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Chunk> {
        self.chunks.iter().find(|c| c.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .map(|c| &c.tensor)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    pub fn with_tag(&self, tag: ChunkTag) -> impl Iterator<Item = &Chunk> {
        self.chunks.iter().filter(move |c| c.tag == tag)
    }

    /// Serialized payload of one chunk, for byte comparisons.
    pub fn chunk_bytes(&self, name: &str) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_chunk(&mut out, self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?)?;
        Ok(out)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        for c in &self.chunks {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name '{}'", c.name)));
            }
        }
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(64 + self.chunks.iter().map(|c| c.tensor.numel() * 4 + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| Error::Checkpoint("metadata too large".into()))?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.chunks.len() as u32).to_le_bytes());
        for c in &self.chunks {
            write_chunk(&mut out, c)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(|_| header_err("file too short"))? != MAGIC {
            return Err(header_err("bad magic"));
        }
        let version = r.u32().map_err(|_| header_err("truncated header"))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let meta_len = r.u32().map_err(|_| header_err("truncated header"))? as usize;
        let meta: Value = serde_json::from_slice(r.take(meta_len).map_err(|_| header_err("truncated metadata"))?)
            .map_err(|e| header_err(&format!("metadata: {e}")))?;
        let n = r.u32().map_err(|_| header_err("truncated header"))? as usize;
        let mut chunks = Vec::with_capacity(n.min(1024));
        for i in 0..n {
            chunks.push(read_chunk(&mut r).map_err(|e| match e {
                Error::Checkpoint(m) => Error::Checkpoint(format!("chunk {i}: {m}")),
                other => other,
            })?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, chunks })
    }
}

fn header_err(m: &str) -> Error {
    Error::Checkpoint(format!("corrupt header: {m}"))
}

fn write_chunk(out: &mut Vec<u8>, c: &Chunk) -> Result<()> {
    let name = c.name.as_bytes();
    let shape = c.tensor.shape();
    if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
        return Err(Error::Checkpoint(format!("tensor '{}' name or rank too large", c.name)));
    }
    out.extend_from_slice(&c.tag.bytes());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::Checkpoint("dimension too large".into()))?.to_le_bytes());
    }
    out.extend_from_slice(&((c.tensor.numel() * 4) as u64).to_le_bytes());
    for v in c.tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

struct Truncated;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Truncated> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, Truncated> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_chunk(r: &mut Reader) -> Result<Chunk> {
    let trunc = |_| Error::Checkpoint("truncated chunk".into());
    let tag_bytes: [u8; 4] = r.take(4).map_err(trunc)?.try_into().unwrap();
    let tag = ChunkTag::from_bytes(tag_bytes)
        .ok_or_else(|| Error::Checkpoint(format!("unknown chunk tag {:?}", String::from_utf8_lossy(&tag_bytes))))?;
    let name_len = u16::from_le_bytes(r.take(2).map_err(trunc)?.try_into().unwrap()) as usize;
    let name = String::from_utf8(r.take(name_len).map_err(trunc)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    let rank = r.take(1).map_err(trunc)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32().map_err(trunc)? as usize);
    }
    let len = u64::from_le_bytes(r.take(8).map_err(trunc)?.try_into().unwrap());
    let numel: usize = shape.iter().product();
    if len != numel as u64 * 4 {
        return Err(Error::Checkpoint(format!("tensor '{name}': payload of {len} bytes for shape {shape:?}")));
    }
    let payload = r.take(len as usize).map_err(trunc)?;
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(Chunk { tag, name, tensor })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.encode()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: json!({"stage": "geometry", "dims": [2, 3]}),
            chunks: vec![
                Chunk {
                    tag: ChunkTag::Density,
                    name: "density".into(),
                    tensor: Tensor::from_fn([1, 2, 2, 2], |i| i as f32 * 0.5 - 1.0),
                },
                Chunk {
                    tag: ChunkTag::RgbNet,
                    name: "rgbnet.0.bias".into(),
                    tensor: Tensor::from_fn([3], |i| (i as f32).exp()),
                },
            ],
        }
    }

    #[test]
    fn save_load_save_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        save_checkpoint(&p, &sample()).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        assert_eq!(loaded, sample());
        let q = dir.path().join("b.bin");
        save_checkpoint(&q, &loaded).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().encode().unwrap();
        let err = Checkpoint::decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("truncated chunk"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).unwrap_err().to_string().contains("corrupt header"));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(Checkpoint::decode(&v2).unwrap_err().to_string().contains("version"));
        // first chunk tag sits right after the header and metadata
        let meta_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let mut tag = bytes.clone();
        tag[16 + meta_len + 4..16 + meta_len + 8].copy_from_slice(b"ZZZZ");
        assert!(Checkpoint::decode(&tag).unwrap_err().to_string().contains("unknown chunk tag"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = sample();
        c.chunks[1].name = "density".into();
        assert!(c.encode().is_err());
    }

    proptest! {
        #[test]
        fn any_truncation_fails(cut in 1usize..60) {
            let bytes = sample().encode().unwrap();
            let n = bytes.len().saturating_sub(cut);
            prop_assert!(Checkpoint::decode(&bytes[..n]).is_err());
        }
    }
}
