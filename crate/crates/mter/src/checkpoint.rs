//! Single-file model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MTERCKPT" | u32 version
//! str arch | u32 classes | u32 embed_dim | u8 head (0 linear, 1 cosine) | f32 head scale
//! str defense | str mode | f32 margin | u32 epsilon | str loss | f32 arc scale | f32 arc margin | u64 seed | u32 epochs
//! u32 tensors, each: str name | u8 dtype (0 = f32) | u32 ndim | u32 dims.. | f32 payload
//! [u8; 32] SHA-256 of everything above
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::path::Path;

use mter_nn::{Arch, HeadKind, Model, ModelSpec, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{MterError, Result};
use crate::report::write_atomic;

pub const MAGIC: &[u8; 8] = b"MTERCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// How a checkpoint was trained.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub defense: String,
    pub mode: String,
    pub margin: f32,
    pub epsilon: u32,
    pub loss: String,
    pub arc_scale: f32,
    pub arc_margin: f32,
    pub seed: u64,
    pub epochs: u32,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            defense: "none".into(),
            mode: "from_scratch".into(),
            margin: 0.0,
            epsilon: 0,
            loss: "softmax".into(),
            arc_scale: 0.0,
            arc_margin: 0.0,
            seed: 0,
            epochs: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub provenance: Provenance,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(MterError::CheckpointCorrupt("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| MterError::CheckpointCorrupt("string is not UTF-8".into()))
    }
}

pub fn encode(model: &Model, provenance: &Provenance) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let spec = model.spec();
    w.str(spec.arch.id());
    w.u32(spec.num_classes as u32);
    w.u32(spec.embed_dim as u32);
    match spec.head {
        HeadKind::Linear => {
            w.u8(0);
            w.f32(0.0);
        }
        HeadKind::Cosine { scale } => {
            w.u8(1);
            w.f32(scale);
        }
    }
    w.str(&provenance.defense);
    w.str(&provenance.mode);
    w.f32(provenance.margin);
    w.u32(provenance.epsilon);
    w.str(&provenance.loss);
    w.f32(provenance.arc_scale);
    w.f32(provenance.arc_margin);
    w.u64(provenance.seed);
    w.u32(provenance.epochs);
    let entries = model.params().entries();
    w.u32(entries.len() as u32);
    for e in entries {
        w.str(&e.name);
        w.u8(0);
        w.u32(e.value.shape().len() as u32);
        for &d in e.value.shape() {
            w.u32(d as u32);
        }
        for &v in e.value.data() {
            w.f32(v);
        }
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(MterError::CheckpointCorrupt("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(MterError::CheckpointCorrupt("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(MterError::CheckpointCorrupt(format!("unsupported version {version}")));
    }
    let arch = Arch::parse(&r.str()?)?;
    let num_classes = r.u32()? as usize;
    let embed_dim = r.u32()? as usize;
    let head = match (r.u8()?, r.f32()?) {
        (0, _) => HeadKind::Linear,
        (1, scale) => HeadKind::Cosine { scale },
        (k, _) => return Err(MterError::CheckpointCorrupt(format!("unknown head kind {k}"))),
    };
    let provenance = Provenance {
        defense: r.str()?,
        mode: r.str()?,
        margin: r.f32()?,
        epsilon: r.u32()?,
        loss: r.str()?,
        arc_scale: r.f32()?,
        arc_margin: r.f32()?,
        seed: r.u64()?,
        epochs: r.u32()?,
    };
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.str()?;
        if r.u8()? != 0 {
            return Err(MterError::CheckpointCorrupt(format!("tensor `{name}` has an unknown dtype")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| MterError::CheckpointCorrupt("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(MterError::CheckpointCorrupt("trailing bytes after tensors".into()));
    }
    let spec = ModelSpec::new(arch, num_classes).with_embed_dim(embed_dim).with_head(head);
    let mut model = Model::new(spec, 0)?;
    model
        .params_mut()
        .load_named(named)
        .map_err(|e| MterError::CheckpointCorrupt(e.to_string()))?;
    Ok(Checkpoint { model, provenance })
}

pub fn save(path: &Path, model: &Model, provenance: &Provenance) -> Result<()> {
    write_atomic(path, &encode(model, provenance))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| MterError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        MterError::CheckpointCorrupt(msg) => MterError::CheckpointCorrupt(format!("{}: {msg}", path.display())),
        other => other,
    })
}
