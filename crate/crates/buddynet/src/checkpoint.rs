//! Block checkpoint file: magic "BNET", format version u32, a fixed config
//! block, then every named tensor as (name length u16, name bytes, rank u32,
//! dims u64 each, f64 little-endian payload) in `named_tensors` order.
//! Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::{ArcFaceParams, BackboneConfig, BlockParams, LayerParams, PTensor};
use crate::error::{Error, Result};

const BNET_MAGIC: &[u8; 4] = b"BNET";
const BNET_VERSION: u32 = 1;

pub fn save_block(path: &Path, params: &BlockParams) -> Result<()> {
    let cfg = &params.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(BNET_MAGIC);
    out.extend_from_slice(&BNET_VERSION.to_le_bytes());
    for v in [
        cfg.image_side,
        cfg.patch_side,
        cfg.channels,
        cfg.embed_dim,
        cfg.num_layers,
        cfg.num_heads,
        cfg.out_dim,
        params.num_classes,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.mlp_ratio.to_le_bytes());
    let named = params.named_tensors();
    out.extend_from_slice(&(named.len() as u64).to_le_bytes());
    for (name, tensor) in named {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for d in &tensor.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                what: self.what.clone(),
                detail: format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_block(path: &Path) -> Result<BlockParams> {
    let bytes = fs::read(path)?;
    let what = path.display().to_string();
    let mut r = Reader { bytes: &bytes, pos: 0, what: what.clone() };
    let fail = |detail: String| Error::Format { what: what.clone(), detail };
    if r.take(4)? != BNET_MAGIC {
        return Err(fail("missing BNET magic".into()));
    }
    let version = r.u32()?;
    if version != BNET_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let image_side = r.u32()? as usize;
    let patch_side = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let embed_dim = r.u32()? as usize;
    let num_layers = r.u32()? as usize;
    let num_heads = r.u32()? as usize;
    let out_dim = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let mlp_ratio = r.f64()?;
    let cfg = BackboneConfig {
        image_side,
        patch_side,
        channels,
        embed_dim,
        num_layers,
        num_heads,
        mlp_ratio,
        out_dim,
    };
    cfg.validate()?;
    let count = r.u64()? as usize;
    let mut tensors: BTreeMap<String, PTensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| fail("tensor name is not utf-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        if tensors.insert(name.clone(), PTensor { shape, data }).is_some() {
            return Err(fail(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut take = |name: String, shape: &[usize]| -> Result<PTensor> {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Format { what: what.clone(), detail: format!("missing tensor {name}") })?;
        if t.shape != shape {
            return Err(Error::Format {
                what: what.clone(),
                detail: format!("tensor {name}: shape {:?}, expected {shape:?}", t.shape),
            });
        }
        Ok(t)
    };
    let e = embed_dim;
    let hidden = cfg.hidden_dim();
    let patch_in = patch_side * patch_side * channels;
    let t = cfg.native_tokens();
    let layers: Vec<LayerParams> = (0..num_layers)
        .map(|i| -> Result<LayerParams> {
            Ok(LayerParams {
                ln1_gamma: take(format!("layer{i}.ln1.g"), &[e])?,
                ln1_beta: take(format!("layer{i}.ln1.b"), &[e])?,
                w_qkv: take(format!("layer{i}.qkv.w"), &[e, 3 * e])?,
                b_qkv: take(format!("layer{i}.qkv.b"), &[3 * e])?,
                w_proj: take(format!("layer{i}.proj.w"), &[e, e])?,
                b_proj: take(format!("layer{i}.proj.b"), &[e])?,
                ln2_gamma: take(format!("layer{i}.ln2.g"), &[e])?,
                ln2_beta: take(format!("layer{i}.ln2.b"), &[e])?,
                w_fc1: take(format!("layer{i}.mlp1.w"), &[e, hidden])?,
                b_fc1: take(format!("layer{i}.mlp1.b"), &[hidden])?,
                w_fc2: take(format!("layer{i}.mlp2.w"), &[hidden, e])?,
                b_fc2: take(format!("layer{i}.mlp2.b"), &[e])?,
            })
        })
        .collect::<Result<_>>()?;
    let params = BlockParams {
        cfg,
        num_classes,
        patch_w: take("patch.w".into(), &[patch_in, e])?,
        patch_b: take("patch.b".into(), &[e])?,
        pos: take("pos".into(), &[t, e])?,
        layers,
        gem_p: take("gem.p".into(), &[1])?,
        fc_w: take("fc.w".into(), &[e, out_dim])?,
        fc_b: take("fc.b".into(), &[out_dim])?,
        head: ArcFaceParams {
            w: take("head.w".into(), &[out_dim, num_classes])?,
            s_raw: take("head.s".into(), &[1])?,
            m_raw: take("head.m".into(), &[1])?,
        },
        pixel_mean: take("pixel.mean".into(), &[channels])?,
        pixel_std: take("pixel.std".into(), &[channels])?,
    };
    if !tensors.is_empty() {
        let extra: Vec<String> = tensors.keys().cloned().collect();
        return Err(fail(format!("unexpected tensors: {extra:?}")));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = BackboneConfig {
            image_side: 8,
            patch_side: 4,
            channels: 2,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 1.5,
            out_dim: 6,
        };
        let mut rng = Rng::from_seed(77);
        let params = BlockParams::init(&cfg, 3, &mut rng).unwrap();
        let dir = std::env::temp_dir().join("buddynet_test_bnet");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("block.bnet");
        save_block(&path, &params).unwrap();
        let loaded = load_block(&path).unwrap();
        assert_eq!(params, loaded);
        for ((na, ta), (nb, tb)) in params.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(na, &nb);
            assert!(ta.data.iter().zip(&tb.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // saved twice → identical bytes
        let path2 = dir.join("block2.bnet");
        save_block(&path2, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = BackboneConfig {
            image_side: 8,
            patch_side: 4,
            channels: 1,
            embed_dim: 4,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            out_dim: 4,
        };
        let mut rng = Rng::from_seed(78);
        let params = BlockParams::init(&cfg, 2, &mut rng).unwrap();
        let dir = std::env::temp_dir().join("buddynet_test_bnet_corrupt");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("block.bnet");
        save_block(&path, &params).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(load_block(&path).is_err());

        let mut truncated = good.clone();
        truncated.truncate(good.len() - 9);
        fs::write(&path, &truncated).unwrap();
        assert!(load_block(&path).is_err());

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 1, 2]);
        fs::write(&path, &trailing).unwrap();
        assert!(load_block(&path).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
