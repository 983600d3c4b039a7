//! FSVD1 model files and their JSON sidecar.
//!
//! Layout, little-endian, no padding:
//!
//! ```text
//! "FSVD" u32:version=1 u32:tensor_count
//! tensor_count × { u16:name_len name u8:dtype(0=f32) u8:ndim ndim×u64:extent data }
//! ```
//!
//! Per layer `l` the names are `layer.{l}.meta` (heads, ln eps values and the
//! activation code), `layer.{l}.ln{1,2}.{gamma,beta}`, and for attention either
//! `layer.{l}.attn.{q,k,v,o}.{W,b}` (dense) or
//! `layer.{l}.attn.{q,k,v}[.head.{h}|.group.{g}].{U,V,b}` plus
//! `layer.{l}.attn.o.{U,V,b}` (factorized). The FFN uses `ffn.up` and
//! `ffn.down` with the same suffixes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{AttentionWeights, EncoderLayer, ExecMode, FfnWeights, LnOrder};
use crate::error::{Error, Result};
use crate::factorizer::{AttentionFactorSet, DenseAttention, FactorizedLinear, HeadMode, Projection};
use crate::ffn::{DenseFfn, FfnFactors};
use crate::memtier::TilePlan;
use crate::ops::{Activation, LayerNormParams};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FSVD";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// A named tensor and the byte offset of its header in the file.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub offset: u64,
}

/// Serializes named tensors in the given order.
pub fn encode_tensors(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::config("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::config(format!("tensor name too long: {name}")))?;
        let ndim = u8::try_from(t.ndim()).map_err(|_| Error::config(format!("too many dims in {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(ndim);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Parses a complete FSVD1 byte stream.
pub fn decode_tensors(buf: &[u8]) -> Result<Vec<Record>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic, expected \"FSVD\""));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let count = c.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let offset = c.pos;
        let len = c.u16("name length")? as usize;
        let name_at = c.pos;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| format_err(name_at, "tensor name is not UTF-8"))?
            .to_owned();
        let dtype_at = c.pos;
        let dtype = c.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(format_err(dtype_at, format!("unsupported dtype {dtype} for `{name}`")));
        }
        let ndim = c.u8("ndim")? as usize;
        if ndim == 0 {
            return Err(format_err(dtype_at + 1, format!("`{name}` has no dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut elems: u64 = 1;
        for _ in 0..ndim {
            let at = c.pos;
            let e = c.u64("extent")?;
            elems = elems
                .checked_mul(e)
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= buf.len() as u64))
                .ok_or_else(|| format_err(at, format!("extents of `{name}` exceed the file size")))?;
            shape.push(e as usize);
        }
        let data_at = c.pos;
        let raw = c.take(elems as usize * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| format_err(data_at, e.to_string()))?;
        out.push(Record {
            name,
            tensor,
            offset: offset as u64,
        });
    }
    if c.pos != buf.len() {
        return Err(format_err(c.pos, format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(out)
}

fn vector(v: &[f32]) -> Tensor<f32> {
    Tensor::vector(v.to_vec()).expect("nonempty vector")
}

fn push_linear(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, f: &FactorizedLinear<f32>) {
    out.push((format!("{prefix}.U"), f.u().clone()));
    out.push((format!("{prefix}.V"), f.v().clone()));
    out.push((format!("{prefix}.b"), vector(f.bias())));
}

fn unit_prefix(base: &str, mode: HeadMode, unit: usize) -> String {
    match mode {
        HeadMode::SingleHead => base.to_owned(),
        HeadMode::MultiHead => format!("{base}.head.{unit}"),
        HeadMode::Grouped(_) => format!("{base}.group.{unit}"),
    }
}

/// Flattens `layers` into named tensors in a fixed order.
pub fn layer_tensors(layers: &[EncoderLayer<f32>]) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let p = format!("layer.{l}");
        let activation = match &layer.ffn {
            FfnWeights::Dense(f) => f.activation,
            FfnWeights::Factored(f) => f.activation(),
        };
        out.push((
            format!("{p}.meta"),
            vector(&[
                layer.heads() as f32,
                layer.ln1.eps,
                layer.ln2.eps,
                activation.code() as f32,
            ]),
        ));
        for (n, ln) in [("ln1", &layer.ln1), ("ln2", &layer.ln2)] {
            out.push((format!("{p}.{n}.gamma"), vector(&ln.gamma)));
            out.push((format!("{p}.{n}.beta"), vector(&ln.beta)));
        }
        match &layer.attention {
            AttentionWeights::Dense(a) => {
                for (n, w, b) in [
                    ("q", &a.wq, &a.bq),
                    ("k", &a.wk, &a.bk),
                    ("v", &a.wv, &a.bv),
                    ("o", &a.wo, &a.bo),
                ] {
                    out.push((format!("{p}.attn.{n}.W"), w.clone()));
                    out.push((format!("{p}.attn.{n}.b"), vector(b)));
                }
            }
            AttentionWeights::Factored(a) => {
                for proj in Projection::ALL {
                    for (u, f) in a.units_of(proj).iter().enumerate() {
                        push_linear(
                            &mut out,
                            &unit_prefix(&format!("{p}.attn.{}", proj.tag()), a.mode(), u),
                            f,
                        );
                    }
                }
                push_linear(&mut out, &format!("{p}.attn.o"), a.output());
            }
        }
        match &layer.ffn {
            FfnWeights::Dense(f) => {
                out.push((format!("{p}.ffn.up.W"), f.w_in.clone()));
                out.push((format!("{p}.ffn.up.b"), vector(&f.b_in)));
                out.push((format!("{p}.ffn.down.W"), f.w_out.clone()));
                out.push((format!("{p}.ffn.down.b"), vector(&f.b_out)));
            }
            FfnWeights::Factored(f) => {
                push_linear(&mut out, &format!("{p}.ffn.up"), f.up());
                push_linear(&mut out, &format!("{p}.ffn.down"), f.down());
            }
        }
    }
    out
}

struct Table {
    map: BTreeMap<String, (Tensor<f32>, u64)>,
}

impl Table {
    fn get(&self, name: &str, anchor: u64) -> Result<&Tensor<f32>> {
        self.map.get(name).map(|(t, _)| t).ok_or_else(|| Error::Format {
            offset: anchor,
            msg: format!("missing tensor `{name}`"),
        })
    }

    fn has(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    fn offset(&self, name: &str) -> u64 {
        self.map.get(name).map(|(_, o)| *o).unwrap_or(0)
    }

    fn vec(&self, name: &str, anchor: u64) -> Result<Vec<f32>> {
        Ok(self.get(name, anchor)?.data().to_vec())
    }

    fn linear(&self, prefix: &str, anchor: u64) -> Result<FactorizedLinear<f32>> {
        let at = self.offset(&format!("{prefix}.U"));
        FactorizedLinear::new(
            self.get(&format!("{prefix}.U"), anchor)?.clone(),
            self.get(&format!("{prefix}.V"), anchor)?.clone(),
            self.vec(&format!("{prefix}.b"), anchor)?,
        )
        .map_err(|e| Error::Format {
            offset: at,
            msg: format!("`{prefix}`: {e}"),
        })
    }

    /// Number of units stored under `base.{kind}.{i}`.
    fn count_units(&self, base: &str, kind: &str) -> usize {
        (0..).take_while(|i| self.has(&format!("{base}.{kind}.{i}.U"))).count()
    }
}

fn reassemble(records: Vec<Record>) -> Result<Vec<EncoderLayer<f32>>> {
    let mut map = BTreeMap::new();
    for r in records {
        let offset = r.offset;
        if map.insert(r.name.clone(), (r.tensor, offset)).is_some() {
            return Err(Error::Format {
                offset,
                msg: format!("duplicate tensor `{}`", r.name),
            });
        }
    }
    let t = Table { map };
    let mut layers = Vec::new();
    for l in 0.. {
        let p = format!("layer.{l}");
        if !t.has(&format!("{p}.meta")) {
            break;
        }
        let at = t.offset(&format!("{p}.meta"));
        let bad = |msg: String| Error::Format { offset: at, msg };
        let meta = t.vec(&format!("{p}.meta"), at)?;
        let [heads, eps1, eps2, act] = meta[..] else {
            return Err(bad(format!("`{p}.meta` must hold 4 values")));
        };
        let heads = heads as usize;
        let activation =
            Activation::from_code(act as u8).ok_or_else(|| bad(format!("unknown activation code {act}")))?;
        let ln = |n: &str, eps: f32| -> Result<LayerNormParams<f32>> {
            Ok(LayerNormParams {
                gamma: t.vec(&format!("{p}.{n}.gamma"), at)?,
                beta: t.vec(&format!("{p}.{n}.beta"), at)?,
                eps,
            })
        };
        let attention = if t.has(&format!("{p}.attn.q.W")) {
            let w = |n: &str| t.get(&format!("{p}.attn.{n}.W"), at).cloned();
            let b = |n: &str| t.vec(&format!("{p}.attn.{n}.b"), at);
            AttentionWeights::Dense(DenseAttention {
                heads,
                wq: w("q")?,
                wk: w("k")?,
                wv: w("v")?,
                wo: w("o")?,
                bq: b("q")?,
                bk: b("k")?,
                bv: b("v")?,
                bo: b("o")?,
            })
        } else {
            let q = format!("{p}.attn.q");
            let (mode, units) = match (t.count_units(&q, "head"), t.count_units(&q, "group")) {
                (0, 0) => (HeadMode::SingleHead, 1),
                (n, 0) => (HeadMode::MultiHead, n),
                (0, g) => (HeadMode::Grouped(g), g),
                _ => return Err(bad(format!("`{p}` mixes head and group factors"))),
            };
            let qkv = Projection::ALL.map(|proj| {
                (0..units)
                    .map(|u| t.linear(&unit_prefix(&format!("{p}.attn.{}", proj.tag()), mode, u), at))
                    .collect::<Result<Vec<_>>>()
            });
            let [qs, ks, vs] = qkv;
            let output = t.linear(&format!("{p}.attn.o"), at)?;
            AttentionWeights::Factored(
                AttentionFactorSet::new(mode, heads, [qs?, ks?, vs?], output).map_err(|e| bad(e.to_string()))?,
            )
        };
        let ffn = if t.has(&format!("{p}.ffn.up.W")) {
            FfnWeights::Dense(DenseFfn {
                w_in: t.get(&format!("{p}.ffn.up.W"), at)?.clone(),
                b_in: t.vec(&format!("{p}.ffn.up.b"), at)?,
                w_out: t.get(&format!("{p}.ffn.down.W"), at)?.clone(),
                b_out: t.vec(&format!("{p}.ffn.down.b"), at)?,
                activation,
            })
        } else {
            FfnWeights::Factored(
                FfnFactors::new(
                    t.linear(&format!("{p}.ffn.up"), at)?,
                    t.linear(&format!("{p}.ffn.down"), at)?,
                    activation,
                )
                .map_err(|e| bad(e.to_string()))?,
            )
        };
        let layer =
            EncoderLayer::new(attention, ffn, ln("ln1", eps1)?, ln("ln2", eps2)?).map_err(|e| bad(e.to_string()))?;
        layers.push(layer);
    }
    Ok(layers)
}

/// Encodes `layers` as an FSVD1 byte stream.
pub fn encode_model(layers: &[EncoderLayer<f32>]) -> Result<Vec<u8>> {
    encode_tensors(&layer_tensors(layers))
}

/// Decodes and validates an FSVD1 byte stream.
pub fn decode_model(buf: &[u8]) -> Result<Vec<EncoderLayer<f32>>> {
    reassemble(decode_tensors(buf)?)
}

pub fn save_model(path: impl AsRef<Path>, layers: &[EncoderLayer<f32>]) -> Result<()> {
    let bytes = encode_model(layers)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Vec<EncoderLayer<f32>>> {
    decode_model(&fs::read(path)?)
}

/// Geometry and run settings stored next to a model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub groups: usize,
    pub rank: usize,
    pub mode: ExecMode,
    #[serde(default)]
    pub ln_order: LnOrder,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub plan: TilePlan,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// BERT-base encoder at rank 64.
    fn default() -> Self {
        Self {
            layers: 12,
            d_model: 768,
            d_ff: 3072,
            heads: 12,
            groups: 12,
            rank: 64,
            mode: ExecMode::default(),
            ln_order: LnOrder::default(),
            activation: Activation::default(),
            plan: TilePlan::default(),
            seed: 42,
        }
    }
}

/// `<model>.json` for a model at `model`.
pub fn sidecar_path(model: impl AsRef<Path>) -> PathBuf {
    let mut s = model.as_ref().as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_config(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::config(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("bad model config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_written_fixture_parses() {
        #[rustfmt::skip]
        let bytes: Vec<u8> = vec![
            0x46, 0x53, 0x56, 0x44,             // "FSVD"
            0x01, 0x00, 0x00, 0x00,             // version 1
            0x01, 0x00, 0x00, 0x00,             // one tensor
            0x01, 0x00, b'w',                   // name "w"
            0x00, 0x02,                         // f32, 2 dims
            0x02, 0, 0, 0, 0, 0, 0, 0,          // 2
            0x02, 0, 0, 0, 0, 0, 0, 0,          // 2
            0x00, 0x00, 0x80, 0x3f,             // 1.0
            0x00, 0x00, 0x00, 0x40,             // 2.0
            0x00, 0x00, 0x40, 0x40,             // 3.0
            0x00, 0x00, 0x80, 0xc0,             // -4.0
        ];
        let recs = decode_tensors(&bytes).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].name, "w");
        assert_eq!(recs[0].tensor.shape(), &[2, 2]);
        assert_eq!(recs[0].tensor.data(), &[1.0, 2.0, 3.0, -4.0]);
        assert_eq!(encode_tensors(&[("w".into(), recs[0].tensor.clone())]).unwrap(), bytes);
    }

    #[test]
    fn header_errors_carry_offsets() {
        let good = encode_tensors(&[("a".into(), Tensor::vector(vec![1.0f32, 2.0]).unwrap())]).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_tensors(&bad_magic),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            decode_tensors(&bad_version),
            Err(Error::Format { offset: 4, .. })
        ));
        let cut = &good[..good.len() - 3];
        match decode_tensors(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, (good.len() - 8) as u64),
            r => panic!("unexpected {r:?}"),
        }
        let mut bad_dtype = good.clone();
        bad_dtype[15] = 7;
        assert!(matches!(
            decode_tensors(&bad_dtype),
            Err(Error::Format { offset: 15, .. })
        ));
        let mut trailing = good;
        trailing.push(0);
        assert!(matches!(decode_tensors(&trailing), Err(Error::Format { .. })));
    }

    #[test]
    fn sidecar_path_appends_json() {
        assert_eq!(sidecar_path("out/m.fsvd"), PathBuf::from("out/m.fsvd.json"));
    }
}
