//! Deterministic binary checkpoints.
//!
//! Layout (all integers little-endian, fixed width):
//!
//! ```text
//! magic "STATEXCK" | version u32 | config block (u32 length + fields)
//! | storage dtype u8 | tensor count u32
//! | per tensor, sorted by name: name (u16 length + UTF-8), dtype u8,
//!   ndim u8, dims u64 × ndim, payload
//! | metadata (u64 seed, u64 tokens seen, u32-prefixed stage, u32-prefixed
//!   accounting JSON, empty when absent)
//! | SHA-256 of every preceding byte
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{validate_schema, DeltaActivation, Family, LayerOverride, Model, ModelConfig, ParamMap};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::statex::AccountingReport;

pub const MAGIC: &[u8; 8] = b"STATEXCK";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// On-disk element type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// Rounds a value to what this dtype can store.
    pub fn round(self, x: f64) -> f64 {
        match self {
            Dtype::F32 => x as f32 as f64,
            Dtype::F64 => x,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub tokens_seen: u64,
    /// Pipeline stage that produced the checkpoint, e.g. `pretrain`.
    pub stage: String,
    pub accounting: Option<AccountingReport>,
}

/// Model weights plus provenance, stored at a fixed precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f64>,
    pub meta: Metadata,
    pub storage: Dtype,
}

impl Checkpoint {
    /// Wraps `model`, rounding every value to `storage` precision so the
    /// in-memory checkpoint equals what a save/load cycle produces.
    pub fn new(mut model: Model<f64>, meta: Metadata, storage: Dtype) -> Result<Self> {
        validate_schema(&model.config, &model.params)?;
        if storage == Dtype::F32 {
            for t in model.params.values_mut() {
                t.data_mut().iter_mut().for_each(|x| *x = storage.round(*x));
            }
        }
        Ok(Self { model, meta, storage })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        validate_schema(&self.model.config, &self.model.params)?;
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, FORMAT_VERSION);
        let cfg = encode_config(&self.model.config);
        put_u32(&mut w, cfg.len() as u32);
        w.extend_from_slice(&cfg);
        w.push(self.storage.code());
        put_u32(&mut w, self.model.params.len() as u32);
        for (name, t) in &self.model.params {
            put_str16(&mut w, name)?;
            w.push(self.storage.code());
            w.push(t.ndim() as u8);
            for &d in t.shape() {
                put_u64(&mut w, d as u64);
            }
            encode_payload(&mut w, t, self.storage);
        }
        put_u64(&mut w, self.meta.seed);
        put_u64(&mut w, self.meta.tokens_seen);
        put_str32(&mut w, &self.meta.stage);
        let acct = match &self.meta.accounting {
            Some(r) => serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?,
            None => String::new(),
        };
        put_str32(&mut w, &acct);
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
            return Err(Error::Checksum);
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: body, pos: 12 };
        let cfg_len = r.u32()? as usize;
        let config = decode_config(r.take(cfg_len)?)?;
        config.validate()?;
        let storage = Dtype::from_code(r.u8()?)?;
        let count = r.u32()? as usize;
        let schema = config.schema();
        let mut params = ParamMap::new();
        for _ in 0..count {
            let name = r.str16()?;
            if !schema.iter().any(|(n, _)| *n == name) {
                return Err(Error::Schema(format!("unknown tensor `{name}`")));
            }
            let dtype = Dtype::from_code(r.u8()?)?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(dtype.width()).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = decode_payload(raw, dtype);
            if params.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
                return Err(Error::Schema(format!("duplicate tensor `{name}`")));
            }
        }
        validate_schema(&config, &params)?;
        let seed = r.u64()?;
        let tokens_seen = r.u64()?;
        let stage = r.str32()?;
        let acct = r.str32()?;
        let accounting = if acct.is_empty() {
            None
        } else {
            Some(serde_json::from_str(&acct).map_err(|e| Error::Format(format!("accounting: {e}")))?)
        };
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            model: Model { config, params },
            meta: Metadata {
                seed,
                tokens_seen,
                stage,
                accounting,
            },
            storage,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Text listing of a checkpoint file: config summary, then one line per
/// tensor with its shape and a payload digest.
pub fn inspect(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let c = ck.config();
    let mut out = String::new();
    let file_digest = &bytes[bytes.len() - CHECKSUM_LEN..];
    let _ = writeln!(out, "file      {}", path.display());
    let _ = writeln!(out, "version   {FORMAT_VERSION}");
    let _ = writeln!(out, "checksum  {}", hex(file_digest));
    let _ = writeln!(
        out,
        "config    family={} layers={} d={} heads={} d_key={} d_value={} vocab={} key_shift={}",
        c.family, c.n_layers, c.d_model, c.n_heads, c.d_key, c.d_value, c.vocab, c.key_shift
    );
    for o in &c.layer_overrides {
        let _ = writeln!(
            out,
            "override  layer={} heads={} d_key={} d_value={}",
            o.layer, o.heads, o.d_key, o.d_value
        );
    }
    let _ = writeln!(
        out,
        "meta      stage={} seed={} tokens_seen={} storage={:?}",
        ck.meta.stage, ck.meta.seed, ck.meta.tokens_seen, ck.storage
    );
    let _ = writeln!(out, "params    {}", ck.model.param_count());
    for (name, t) in &ck.model.params {
        let mut payload = Vec::new();
        encode_payload(&mut payload, t, ck.storage);
        let digest = Sha256::digest(&payload);
        let _ = writeln!(out, "{name:<28} {:<14} {}", format!("{:?}", t.shape()), &hex(&digest)[..16]);
    }
    Ok(out)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_payload(w: &mut Vec<u8>, t: &Tensor<f64>, dtype: Dtype) {
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|&x| w.extend_from_slice(&(x as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|&x| w.extend_from_slice(&x.to_le_bytes())),
    }
}

fn decode_payload(raw: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect(),
    }
}

fn encode_config(c: &ModelConfig) -> Vec<u8> {
    let mut w = Vec::new();
    w.push(match c.family {
        Family::Gla => 0,
        Family::Mamba2 => 1,
    });
    for v in [c.n_layers, c.d_model, c.n_heads, c.d_key, c.d_value, c.vocab] {
        put_u32(&mut w, v as u32);
    }
    put_u64(&mut w, c.ffn_ratio.to_bits());
    put_u32(&mut w, c.delimiter_token);
    w.push(match c.delta_activation {
        DeltaActivation::Softplus => 0,
        DeltaActivation::Silu => 1,
    });
    w.push(c.tie_embeddings as u8);
    w.push(c.key_shift as u8);
    put_u32(&mut w, c.layer_overrides.len() as u32);
    for o in &c.layer_overrides {
        for v in [o.layer, o.heads, o.d_key, o.d_value] {
            put_u32(&mut w, v as u32);
        }
    }
    w
}

fn decode_config(buf: &[u8]) -> Result<ModelConfig> {
    let mut r = Reader { buf, pos: 0 };
    let family = match r.u8()? {
        0 => Family::Gla,
        1 => Family::Mamba2,
        x => return Err(Error::Format(format!("unknown family code {x}"))),
    };
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let ffn_ratio = f64::from_bits(r.u64()?);
    let delimiter_token = r.u32()?;
    let delta_activation = match r.u8()? {
        0 => DeltaActivation::Softplus,
        1 => DeltaActivation::Silu,
        x => return Err(Error::Format(format!("unknown activation code {x}"))),
    };
    let tie_embeddings = r.u8()? != 0;
    let key_shift = r.u8()? != 0;
    let n = r.u32()? as usize;
    let mut layer_overrides = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        layer_overrides.push(LayerOverride {
            layer: r.u32()? as usize,
            heads: r.u32()? as usize,
            d_key: r.u32()? as usize,
            d_value: r.u32()? as usize,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Format("config block length mismatch".into()));
    }
    let [n_layers, d_model, n_heads, d_key, d_value, vocab] = dims;
    Ok(ModelConfig {
        family,
        n_layers,
        d_model,
        n_heads,
        d_key,
        d_value,
        vocab,
        ffn_ratio,
        delimiter_token,
        delta_activation,
        tie_embeddings,
        key_shift,
        layer_overrides,
    })
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str16(w: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Format(format!("name too long: {s}")))?;
    w.extend_from_slice(&len.to_le_bytes());
    w.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_str32(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str16(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        self.utf8(n)
    }

    fn str32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        self.utf8(n)
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}
