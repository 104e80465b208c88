//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "FDET"  magic
//! u32     format version (1)
//! u32     block count
//! per block:
//!   u32   name length, then UTF-8 name
//!   u32   rank, then rank x u64 dims
//!   f64   x product(dims) values
//! ```
//!
//! Which blocks are present (`stem_ir.*`, `stem_vis.*`, `cbam.*`) encodes the
//! model's modality and attention toggle.

use std::path::Path;

use super::model::{DetectorParams, ModelConfig, Modality};
use crate::attention::DEFAULT_REDUCTION;
use crate::error::{Error, Result};
use crate::tensor::ParamSet;

pub const MAGIC: &[u8; 4] = b"FDET";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 256;
const MAX_RANK: usize = 8;
const MAX_BLOCKS: usize = 1024;
/// Upper bound on any channel count, so a hostile header cannot request a
/// huge allocation.
const MAX_WIDTH: usize = 1024;

pub fn encode_checkpoint(params: &DetectorParams) -> Vec<u8> {
    let mut blocks = Vec::new();
    params.visit("", &mut |name, shape, data| blocks.push((name.to_string(), shape.to_vec(), data.to_vec())));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, shape, data) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

type Block = (String, Vec<usize>, Vec<f64>);

fn read_blocks(bytes: &[u8]) -> Result<Vec<Block>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    if count > MAX_BLOCKS {
        return Err(Error::Format(format!("{count} blocks exceeds limit")));
    }
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        if len == 0 || len > MAX_NAME_LEN {
            return Err(Error::Format(format!("block name length {len}")));
        }
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("block name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("block {name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?;
            if d == 0 {
                return Err(Error::Format(format!("block {name}: zero dimension")));
            }
            n = n
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("block {name}: size overflow")))?;
            shape.push(d);
        }
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("block {name} holds non-finite values")));
        }
        blocks.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(blocks)
}

fn find<'b>(blocks: &'b [Block], name: &str) -> Option<&'b Block> {
    blocks.iter().find(|b| b.0 == name)
}

fn dim(blocks: &[Block], name: &str, axis: usize) -> Result<usize> {
    find(blocks, name)
        .and_then(|b| b.1.get(axis).copied())
        .ok_or_else(|| Error::Format(format!("missing block {name}")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DetectorParams> {
    let blocks = read_blocks(bytes)?;
    let has = |p: &str| blocks.iter().any(|b| b.0.starts_with(p));
    let modality = match (has("stem_ir."), has("stem_vis.")) {
        (true, true) => Modality::Fused,
        (true, false) => Modality::Infrared,
        (false, true) => Modality::Visible,
        (false, false) => return Err(Error::Format("checkpoint has no input stem".into())),
    };
    let stem = if modality.uses_ir() { "stem_ir.weight" } else { "stem_vis.weight" };
    let stem_channels = dim(&blocks, stem, 0)?;
    let use_cbam = has("cbam.");
    let reduction = if use_cbam {
        let hidden = dim(&blocks, "cbam.mlp.w1", 0)?;
        if hidden == 0 || stem_channels % hidden != 0 {
            return Err(Error::Format("CBAM hidden width does not divide stem width".into()));
        }
        stem_channels / hidden
    } else {
        DEFAULT_REDUCTION
    };
    let head_out = dim(&blocks, "head.weight", 0)?;
    let cfg = ModelConfig {
        num_classes: head_out.saturating_sub(5),
        stem_channels,
        backbone_channels: [
            dim(&blocks, "backbone.0.weight", 0)?,
            dim(&blocks, "backbone.1.weight", 0)?,
            dim(&blocks, "backbone.2.weight", 0)?,
        ],
        reduction,
        use_cbam,
        modality,
    };
    let widths = [cfg.num_classes, cfg.stem_channels]
        .into_iter()
        .chain(cfg.backbone_channels);
    if widths.into_iter().any(|w| w > MAX_WIDTH) {
        return Err(Error::Format(format!("layer width exceeds {MAX_WIDTH}")));
    }
    let mut params = DetectorParams::zeros(&cfg).map_err(|e| Error::Format(e.to_string()))?;
    let mut expected = 0;
    let mut error = None;
    params.visit_mut("", &mut |name, shape, data| {
        expected += 1;
        match find(&blocks, name) {
            Some((_, s, d)) if s == shape && d.len() == data.len() => data.copy_from_slice(d),
            Some((_, s, _)) => {
                error.get_or_insert(format!("block {name}: shape {s:?}, expected {shape:?}"));
            }
            None => {
                error.get_or_insert(format!("missing block {name}"));
            }
        }
    });
    if let Some(e) = error {
        return Err(Error::Format(e));
    }
    if expected != blocks.len() {
        return Err(Error::Format(format!(
            "{} blocks present, model uses {expected}",
            blocks.len()
        )));
    }
    params.validate()?;
    Ok(params)
}

pub fn save_checkpoint(params: &DetectorParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorParams> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn round_trips_every_arm() {
        for (modality, use_cbam) in [
            (Modality::Infrared, false),
            (Modality::Visible, false),
            (Modality::Infrared, true),
            (Modality::Fused, true),
        ] {
            let cfg = ModelConfig {
                modality,
                use_cbam,
                num_classes: 3,
                ..Default::default()
            };
            let p = DetectorParams::init(&cfg, &mut SeededRng::new(9)).unwrap();
            let bytes = encode_checkpoint(&p);
            assert_eq!(&bytes[..4], b"FDET");
            let q = decode_checkpoint(&bytes).unwrap();
            assert_eq!(p, q);
            assert_eq!(encode_checkpoint(&q), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let p = DetectorParams::init(&ModelConfig::default(), &mut SeededRng::new(1)).unwrap();
        let bytes = encode_checkpoint(&p);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_checkpoint(&bad).is_err());
        let mut longer = bytes;
        longer.push(0);
        assert!(decode_checkpoint(&longer).is_err());
        assert!(decode_checkpoint(b"").is_err());
    }
}
