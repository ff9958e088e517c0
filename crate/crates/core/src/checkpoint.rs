//! Binary tensor container shared by model, optimizer, quantized and
//! adapter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AFMT" | u32 version | u32 count
//! count x ( u32 name_len | name | u8 dtype | u32 rank | rank x u64 extent )
//! count x payload, in header order
//! ```
//!
//! Palettized payloads carry their group metadata and LUTs ahead of the
//! packed indices; int8 payloads carry per-row f16 scale/zero ahead of the codes.

use crate::compress::{GroupAxis, Int8Tensor, LutPrecision, PalettizedTensor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::optim::StateRecords;
use crate::tensor::{Scalar, Tensor};
use half::f16;
use indexmap::IndexMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"AFMT";
pub const FORMAT_VERSION: u32 = 1;

/// On-disk element encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DtypeCode {
    F32 = 0,
    F64 = 1,
    F16 = 2,
    Int8PerChannel = 3,
    Pal2 = 4,
    Pal4 = 5,
}

impl DtypeCode {
    fn from_u8(c: u8) -> Result<Self> {
        Ok(match c {
            0 => DtypeCode::F32,
            1 => DtypeCode::F64,
            2 => DtypeCode::F16,
            3 => DtypeCode::Int8PerChannel,
            4 => DtypeCode::Pal2,
            5 => DtypeCode::Pal4,
            _ => return Err(Error::Checkpoint(format!("unknown dtype code {c}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    /// Values are rounded to half precision when written.
    F16(Tensor<f32>),
    Int8(Int8Tensor),
    Pal(PalettizedTensor),
}

impl Record {
    pub fn code(&self) -> DtypeCode {
        match self {
            Record::F32(_) => DtypeCode::F32,
            Record::F64(_) => DtypeCode::F64,
            Record::F16(_) => DtypeCode::F16,
            Record::Int8(_) => DtypeCode::Int8PerChannel,
            Record::Pal(p) if p.bits == 2 => DtypeCode::Pal2,
            Record::Pal(_) => DtypeCode::Pal4,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Record::F32(t) | Record::F16(t) => t.shape().to_vec(),
            Record::F64(t) => t.shape().to_vec(),
            Record::Int8(q) => q.shape.to_vec(),
            Record::Pal(p) => p.shape.to_vec(),
        }
    }

    /// Dense view in element type `T`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            Record::F32(t) => t.cast(),
            Record::F16(t) => t.map(|v| f16::from_f32(v).to_f32()).cast(),
            Record::F64(t) => t.cast(),
            Record::Int8(q) => q.dequantize(),
            Record::Pal(p) => p.dequantize(),
        }
    }
}

/// Ordered named records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: IndexMap<String, Record>,
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f32<R: Read>(r: &mut R) -> Result<f32> {
    Ok(f32::from_bits(get_u32(r)?))
}

fn write_lut_entry<W: Write>(w: &mut W, v: f32, p: LutPrecision) -> Result<()> {
    match p {
        LutPrecision::F16 => w.write_all(&f16::from_f32(v).to_bits().to_le_bytes())?,
        LutPrecision::F32 => w.write_all(&v.to_le_bytes())?,
    }
    Ok(())
}

fn pack(indices: &[u8], bits: u8) -> Vec<u8> {
    let per = 8 / bits as usize;
    let mut out = vec![0u8; indices.len().div_ceil(per)];
    for (i, &v) in indices.iter().enumerate() {
        out[i / per] |= v << ((i % per) * bits as usize);
    }
    out
}

fn unpack(bytes: &[u8], bits: u8, n: usize) -> Vec<u8> {
    let per = 8 / bits as usize;
    let mask = (1u8 << bits) - 1;
    (0..n).map(|i| (bytes[i / per] >> ((i % per) * bits as usize)) & mask).collect()
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, r: Record) {
        self.records.insert(name.into(), r);
    }

    pub fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no record `{name}`")))
    }

    pub fn set_meta(&mut self, key: &str, v: f64) {
        self.insert(format!("meta.{key}"), Record::F64(Tensor::scalar(v)));
    }

    pub fn meta(&self, key: &str) -> Result<f64> {
        match self.get(&format!("meta.{key}"))? {
            Record::F64(t) if t.len() == 1 => Ok(t.item()),
            _ => Err(Error::Checkpoint(format!("meta.{key} is not an f64 scalar"))),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(&mut w, FORMAT_VERSION)?;
        put_u32(&mut w, self.records.len() as u32)?;
        for (name, rec) in &self.records {
            put_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[rec.code() as u8])?;
            let shape = rec.shape();
            put_u32(&mut w, shape.len() as u32)?;
            for d in shape {
                put_u64(&mut w, d as u64)?;
            }
        }
        for rec in self.records.values() {
            match rec {
                Record::F32(t) => {
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Record::F64(t) => {
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Record::F16(t) => {
                    for v in t.data() {
                        w.write_all(&f16::from_f32(*v).to_bits().to_le_bytes())?;
                    }
                }
                Record::Int8(q) => {
                    for (s, z) in q.scales.iter().zip(&q.zeros) {
                        w.write_all(&f16::from_f32(*s).to_bits().to_le_bytes())?;
                        w.write_all(&f16::from_f32(*z).to_bits().to_le_bytes())?;
                    }
                    w.write_all(&q.q)?;
                }
                Record::Pal(p) => {
                    w.write_all(&[p.axis.code()])?;
                    put_u32(&mut w, p.group_size as u32)?;
                    w.write_all(&[p.lut_precision.bits() as u8])?;
                    put_u32(&mut w, p.n_groups() as u32)?;
                    for lut in &p.luts {
                        for &v in lut {
                            write_lut_entry(&mut w, v, p.lut_precision)?;
                        }
                    }
                    w.write_all(&pack(&p.indices, p.bits))?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = get_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let count = get_u32(&mut r)? as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let len = get_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let code = DtypeCode::from_u8(get_u8(&mut r)?)?;
            let rank = get_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| get_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            headers.push((name, code, shape));
        }
        let mut records = IndexMap::new();
        for (name, code, shape) in headers {
            let n: usize = shape.iter().product();
            let bad_shape = |e: crate::tensor::TensorError| Error::Checkpoint(format!("record `{name}`: {e}"));
            let rec = match code {
                DtypeCode::F32 => Record::F32(
                    Tensor::new(shape, (0..n).map(|_| get_f32(&mut r)).collect::<Result<Vec<_>>>()?).map_err(bad_shape)?,
                ),
                DtypeCode::F64 => Record::F64(
                    Tensor::new(shape, (0..n).map(|_| get_u64(&mut r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?)
                        .map_err(bad_shape)?,
                ),
                DtypeCode::F16 => Record::F16(
                    Tensor::new(
                        shape,
                        (0..n).map(|_| get_u16(&mut r).map(|b| f16::from_bits(b).to_f32())).collect::<Result<Vec<_>>>()?,
                    )
                    .map_err(bad_shape)?,
                ),
                DtypeCode::Int8PerChannel => {
                    if shape.len() != 2 {
                        return Err(Error::Checkpoint(format!("int8 record `{name}` must be rank 2")));
                    }
                    let (mut scales, mut zeros) = (Vec::new(), Vec::new());
                    for _ in 0..shape[0] {
                        scales.push(f16::from_bits(get_u16(&mut r)?).to_f32());
                        zeros.push(f16::from_bits(get_u16(&mut r)?).to_f32());
                    }
                    let mut q = vec![0u8; n];
                    r.read_exact(&mut q)?;
                    Record::Int8(Int8Tensor {
                        shape: [shape[0], shape[1]],
                        scales,
                        zeros,
                        q,
                    })
                }
                DtypeCode::Pal2 | DtypeCode::Pal4 => {
                    if shape.len() != 2 {
                        return Err(Error::Checkpoint(format!("palettized record `{name}` must be rank 2")));
                    }
                    let bits = if code == DtypeCode::Pal2 { 2 } else { 4 };
                    let axis = GroupAxis::from_code(get_u8(&mut r)?)?;
                    let group_size = get_u32(&mut r)? as usize;
                    let lut_precision = match get_u8(&mut r)? {
                        16 => LutPrecision::F16,
                        32 => LutPrecision::F32,
                        b => return Err(Error::Checkpoint(format!("unsupported LUT width {b}"))),
                    };
                    let n_groups = get_u32(&mut r)? as usize;
                    let k = 1usize << bits;
                    let mut luts = Vec::with_capacity(n_groups);
                    for _ in 0..n_groups {
                        let lut = (0..k)
                            .map(|_| match lut_precision {
                                LutPrecision::F16 => get_u16(&mut r).map(|b| f16::from_bits(b).to_f32()),
                                LutPrecision::F32 => get_f32(&mut r),
                            })
                            .collect::<Result<Vec<_>>>()?;
                        luts.push(lut);
                    }
                    let mut packed = vec![0u8; n.div_ceil(8 / bits as usize)];
                    r.read_exact(&mut packed)?;
                    let p = PalettizedTensor {
                        shape: [shape[0], shape[1]],
                        bits,
                        axis,
                        group_size,
                        lut_precision,
                        luts,
                        indices: unpack(&packed, bits, n),
                        group_sq_errors: Vec::new(),
                    };
                    p.validate()?;
                    Record::Pal(p)
                }
            };
            records.insert(name, rec);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last payload".into()));
        }
        Ok(Self { records })
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = std::fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(f);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn insert_config(&mut self, c: &ModelConfig) {
        for (k, v) in [
            ("model_dim", c.model_dim as f64),
            ("head_dim", c.head_dim as f64),
            ("n_query_heads", c.n_query_heads as f64),
            ("n_kv_heads", c.n_kv_heads as f64),
            ("n_layers", c.n_layers as f64),
            ("vocab_size", c.vocab_size as f64),
            ("ffn_hidden_dim", c.ffn_hidden_dim as f64),
            ("rope_base", c.rope_base),
            ("max_seq_len", c.max_seq_len as f64),
            ("norm_eps", c.norm_eps),
        ] {
            self.set_meta(&format!("model.{k}"), v);
        }
    }

    pub fn config(&self) -> Result<ModelConfig> {
        let u = |k: &str| self.meta(&format!("model.{k}")).map(|v| v as usize);
        let c = ModelConfig {
            model_dim: u("model_dim")?,
            head_dim: u("head_dim")?,
            n_query_heads: u("n_query_heads")?,
            n_kv_heads: u("n_kv_heads")?,
            n_layers: u("n_layers")?,
            vocab_size: u("vocab_size")?,
            ffn_hidden_dim: u("ffn_hidden_dim")?,
            rope_base: self.meta("model.rope_base")?,
            max_seq_len: u("max_seq_len")?,
            norm_eps: self.meta("model.norm_eps")?,
        };
        c.validate()
            .map_err(|e| Error::Checkpoint(format!("stored model config invalid: {e}")))?;
        Ok(c)
    }

    /// Config plus every parameter as a float32 record.
    pub fn from_model<T: Scalar>(model: &Model<T>) -> Self {
        let mut c = Self::new();
        c.insert_config(&model.config);
        c.insert_params(&model.params);
        c
    }

    pub fn insert_params<T: Scalar>(&mut self, params: &ParamStore<T>) {
        for (name, t) in params.iter() {
            let rec = match T::DTYPE {
                crate::tensor::DType::F64 => Record::F64(t.cast()),
                crate::tensor::DType::F32 => Record::F32(t.cast()),
            };
            self.insert(name.clone(), rec);
        }
    }

    /// Rebuilds a model, dequantizing any compressed records.
    pub fn model<T: Scalar>(&self) -> Result<Model<T>> {
        let config = self.config()?;
        let mut params = ParamStore::new();
        for (name, _) in config.param_shapes() {
            params.insert(name.clone(), self.get(&name)?.to_tensor());
        }
        Model::from_params(config, params).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn insert_optimizer_state(&mut self, state: &StateRecords) {
        for (k, t) in state {
            self.insert(k.clone(), Record::F64(t.clone()));
        }
    }

    pub fn optimizer_state(&self) -> StateRecords {
        self.records
            .iter()
            .filter(|(k, _)| k.starts_with("opt."))
            .map(|(k, r)| (k.clone(), r.to_tensor()))
            .collect()
    }
}
