//! Binary checkpoint format.
//!
//! ```text
//! magic   b"VIF1"
//! version u8 (= 1)
//! count   u32 LE
//! count x record:
//!   name_len u16 LE, name (UTF-8)
//!   dtype    u8  (0 = f32, 1 = f64, 2 = i64)
//!   rank     u8, then rank x u32 LE dims
//!   payload  product(dims) little-endian values of dtype
//! ```
//!
//! Hyperparameters travel as `meta.*` i64 records. Parameter tensors are
//! written as f32 or f64 according to the model's precision.

use std::path::Path;

use super::{DecoderBlock, ModelConfig, ModelParams};
use crate::attention::AttentionParams;
use crate::error::{Result, VifError};
use crate::tensor::{Precision, Tensor};
use crate::vif::VifParams;

pub const MAGIC: &[u8; 4] = b"VIF1";
pub const VERSION: u8 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const DTYPE_I64: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub vif: Option<VifParams>,
}

enum Payload {
    Float(Tensor),
    Int(i64),
}

impl Checkpoint {
    fn meta(&self) -> Vec<(&'static str, i64)> {
        let c = &self.model.config;
        let mut m = vec![
            ("meta.n_symbols", c.n_symbols as i64),
            ("meta.vocab_size", c.vocab_size as i64),
            ("meta.max_grid_side", c.max_grid_side as i64),
            ("meta.d_vision", c.d_vision as i64),
            ("meta.d_model", c.d_model as i64),
            ("meta.n_layers", c.n_layers as i64),
            ("meta.n_heads", c.n_heads as i64),
            ("meta.ffn_mult", c.ffn_mult as i64),
            ("meta.max_seq_len", c.max_seq_len as i64),
        ];
        if let Some(v) = &self.vif {
            m.push(("meta.vif_heads", v.cross_attn.n_heads as i64));
            m.push(("meta.vif_self_attn", v.enable_self_attn as i64));
        }
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.meta();
        let mut tensors = self.model.named_tensors();
        if let Some(v) = &self.vif {
            tensors.extend(v.named_tensors());
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&((meta.len() + tensors.len()) as u32).to_le_bytes());
        for (name, value) in meta {
            write_header(&mut out, name, DTYPE_I64, &[1]);
            out.extend_from_slice(&value.to_le_bytes());
        }
        for (name, t) in tensors {
            let dtype = match t.precision() {
                Precision::F32 => DTYPE_F32,
                Precision::F64 => DTYPE_F64,
            };
            write_header(&mut out, &name, dtype, t.shape());
            for &v in t.data() {
                match t.precision() {
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(VifError::Checkpoint("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(VifError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut records: Vec<(String, Payload)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| VifError::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = match dtype {
                DTYPE_I64 => {
                    if numel != 1 {
                        return Err(VifError::Checkpoint(format!("{name}: integer records hold one value")));
                    }
                    Payload::Int(i64::from_le_bytes(r.take(8)?.try_into().unwrap()))
                }
                DTYPE_F32 | DTYPE_F64 => {
                    let (width, precision) =
                        if dtype == DTYPE_F32 { (4, Precision::F32) } else { (8, Precision::F64) };
                    let raw = r.take(numel * width)?;
                    let data = raw
                        .chunks_exact(width)
                        .map(|c| match width {
                            4 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                            _ => f64::from_le_bytes(c.try_into().unwrap()),
                        })
                        .collect();
                    Payload::Float(
                        Tensor::new(&shape, data, precision)
                            .map_err(|e| VifError::Checkpoint(format!("{name}: {e}")))?,
                    )
                }
                other => return Err(VifError::Checkpoint(format!("{name}: unknown dtype {other}"))),
            };
            records.push((name, payload));
        }
        if r.pos != bytes.len() {
            return Err(VifError::Checkpoint("trailing bytes".into()));
        }
        Self::assemble(records)
    }

    fn assemble(records: Vec<(String, Payload)>) -> Result<Self> {
        let mut ints = std::collections::HashMap::new();
        let mut floats = std::collections::HashMap::new();
        for (name, p) in records {
            let dup = match p {
                Payload::Int(v) => ints.insert(name.clone(), v).is_some(),
                Payload::Float(t) => floats.insert(name.clone(), t).is_some(),
            };
            if dup {
                return Err(VifError::Checkpoint(format!("duplicate record {name}")));
            }
        }
        let int = |k: &str| -> Result<usize> {
            ints.get(k)
                .copied()
                .filter(|v| *v >= 0)
                .map(|v| v as usize)
                .ok_or_else(|| VifError::Checkpoint(format!("missing {k}")))
        };
        let precision = floats
            .get("head.w_o")
            .map(Tensor::precision)
            .ok_or_else(|| VifError::Checkpoint("missing head.w_o".into()))?;
        let config = ModelConfig {
            n_symbols: int("meta.n_symbols")?,
            vocab_size: int("meta.vocab_size")?,
            max_grid_side: int("meta.max_grid_side")?,
            d_vision: int("meta.d_vision")?,
            d_model: int("meta.d_model")?,
            n_layers: int("meta.n_layers")?,
            n_heads: int("meta.n_heads")?,
            ffn_mult: int("meta.ffn_mult")?,
            max_seq_len: int("meta.max_seq_len")?,
            precision,
        };
        config.validate().map_err(|e| VifError::Checkpoint(e.to_string()))?;
        let has_vif = ints.contains_key("meta.vif_heads");

        // Build correctly shaped skeletons, then fill them by name.
        let blank_block = |d: usize, f: usize| DecoderBlock {
            ln1_gamma: Tensor::zeros(&[d], precision),
            ln1_beta: Tensor::zeros(&[d], precision),
            attn: blank_attn(d, config.n_heads, precision),
            ln2_gamma: Tensor::zeros(&[d], precision),
            ln2_beta: Tensor::zeros(&[d], precision),
            ff_w1: Tensor::zeros(&[d, f], precision),
            ff_b1: Tensor::zeros(&[f], precision),
            ff_w2: Tensor::zeros(&[f, d], precision),
            ff_b2: Tensor::zeros(&[d], precision),
        };
        let (dv, d, v) = (config.d_vision, config.d_model, config.vocab_size);
        let mut model = ModelParams {
            config,
            symbol_embed: Tensor::zeros(&[config.n_symbols, dv], precision),
            grid_row: Tensor::zeros(&[config.max_grid_side, dv], precision),
            grid_col: Tensor::zeros(&[config.max_grid_side, dv], precision),
            connector_w: Tensor::zeros(&[dv, d], precision),
            connector_b: Tensor::zeros(&[d], precision),
            tok_embed: Tensor::zeros(&[v, d], precision),
            pos_embed: Tensor::zeros(&[config.max_seq_len, d], precision),
            blocks: (0..config.n_layers).map(|_| blank_block(d, config.d_ff())).collect(),
            final_gamma: Tensor::zeros(&[d], precision),
            final_beta: Tensor::zeros(&[d], precision),
            w_o: Tensor::zeros(&[d, v], precision),
        };
        let mut vif = if has_vif {
            let heads = int("meta.vif_heads")?;
            if heads == 0 || d % heads != 0 {
                return Err(VifError::Checkpoint(format!("vif heads {heads} do not divide d_model {d}")));
            }
            Some(VifParams {
                self_attn: blank_attn(d, heads, precision),
                refine_gamma: Tensor::zeros(&[d], precision),
                refine_beta: Tensor::zeros(&[d], precision),
                cross_attn: blank_attn(d, heads, precision),
                fusion_gamma: Tensor::zeros(&[d], precision),
                fusion_beta: Tensor::zeros(&[d], precision),
                enable_self_attn: int("meta.vif_self_attn")? != 0,
            })
        } else {
            None
        };

        let mut slots = model.named_tensors_mut();
        if let Some(vp) = vif.as_mut() {
            slots.extend(vp.named_tensors_mut());
        }
        let n_slots = slots.len();
        for (name, slot) in slots {
            let t = floats
                .remove(&name)
                .ok_or_else(|| VifError::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() || t.precision() != precision {
                return Err(VifError::Checkpoint(format!(
                    "{name}: stored {:?}/{:?}, expected {:?}/{:?}",
                    t.shape(),
                    t.precision(),
                    slot.shape(),
                    precision
                )));
            }
            *slot = t;
        }
        if let Some(extra) = floats.keys().next() {
            return Err(VifError::Checkpoint(format!("unexpected tensor {extra} ({n_slots} expected)")));
        }
        Ok(Checkpoint { model, vif })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn blank_attn(d: usize, heads: usize, p: Precision) -> AttentionParams {
    AttentionParams {
        w_q: Tensor::zeros(&[d, d], p),
        w_k: Tensor::zeros(&[d, d], p),
        w_v: Tensor::zeros(&[d, d], p),
        w_o: Tensor::zeros(&[d, d], p),
        n_heads: heads,
    }
}

fn write_header(out: &mut Vec<u8>, name: &str, dtype: u8, shape: &[usize]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| VifError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn tiny(precision: Precision, with_vif: bool) -> Checkpoint {
        let cfg = ModelConfig {
            n_symbols: 3,
            vocab_size: 7,
            max_grid_side: 2,
            d_vision: 4,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            max_seq_len: 16,
            precision,
        };
        let mut rng = Rng::new(9);
        let model = ModelParams::init(&cfg, &mut rng).unwrap();
        let vif = with_vif.then(|| VifParams::init(8, 4, false, precision, &mut rng).unwrap());
        Checkpoint { model, vif }
    }

    #[test]
    fn byte_exact_round_trip() {
        for p in [Precision::F32, Precision::F64] {
            for v in [false, true] {
                let ck = tiny(p, v);
                let bytes = ck.to_bytes();
                assert_eq!(&bytes[..4], b"VIF1");
                assert_eq!(bytes[4], 1);
                let back = Checkpoint::from_bytes(&bytes).unwrap();
                assert_eq!(back, ck);
                assert_eq!(back.to_bytes(), bytes);
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = tiny(Precision::F32, true).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
