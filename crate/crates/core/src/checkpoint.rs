//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `FRCKPT1`, `u32` entry count, then per
//! entry `u16` name length, name bytes, `u8` dtype code, `u8` rank,
//! `u64` dims, payload.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::codec::CodecStats;
use crate::error::{Error, Result};
use crate::model::{Arch, Model, ModelConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::train::{AdamW, TrainState};
use crate::vision::PcaProjector;

pub const MAGIC: &[u8; 7] = b"FRCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl Payload {
    pub fn code(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::U8(_) => 2,
            Payload::U64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

fn scalar_payload<T: Scalar>(v: Vec<T>) -> Payload {
    match T::DTYPE {
        0 => Payload::F32(v.into_iter().map(|x| x.as_f64() as f32).collect()),
        _ => Payload::F64(v.into_iter().map(|x| x.as_f64()).collect()),
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, dims: Vec<u64>, data: Payload) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Invalid(format!("duplicate checkpoint entry {name:?}")));
        }
        if name.len() > u16::MAX as usize || dims.len() > u8::MAX as usize {
            return Err(Error::Invalid(format!("entry {name:?} cannot be encoded")));
        }
        if dims.iter().product::<u64>() as usize != data.len() {
            return Err(Error::Shape(format!("entry {name:?}: dims {dims:?} do not match {} values", data.len())));
        }
        self.entries.push(Entry { name, dims, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn need(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint { path: PathBuf::new(), reason: format!("missing entry {name:?}") })
    }

    pub fn push_mat<T: Scalar>(&mut self, name: impl Into<String>, m: &Mat<T>) -> Result<()> {
        self.push(name, vec![m.rows() as u64, m.cols() as u64], scalar_payload(m.as_slice().to_vec()))
    }

    pub fn push_f64s(&mut self, name: impl Into<String>, v: &[f64]) -> Result<()> {
        self.push(name, vec![v.len() as u64], Payload::F64(v.to_vec()))
    }

    pub fn push_u64(&mut self, name: impl Into<String>, v: u64) -> Result<()> {
        self.push(name, vec![], Payload::U64(vec![v]))
    }

    pub fn push_text(&mut self, name: impl Into<String>, s: &str) -> Result<()> {
        self.push(name, vec![s.len() as u64], Payload::U8(s.as_bytes().to_vec()))
    }

    pub fn mat<T: Scalar>(&self, name: &str) -> Result<Mat<T>> {
        let e = self.need(name)?;
        if e.dims.len() != 2 {
            return Err(self.bad(format!("entry {name:?} is not a matrix")));
        }
        let data: Vec<T> = match &e.data {
            Payload::F32(v) if T::DTYPE == 0 => v.iter().map(|&x| T::of(f64::from(x))).collect(),
            Payload::F64(v) if T::DTYPE == 1 => v.iter().map(|&x| T::of(x)).collect(),
            _ => return Err(self.bad(format!("entry {name:?} has dtype {} but {} was requested", e.data.code(), T::DTYPE))),
        };
        Mat::from_vec(e.dims[0] as usize, e.dims[1] as usize, data)
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        match &self.need(name)?.data {
            Payload::F64(v) => Ok(v.clone()),
            _ => Err(self.bad(format!("entry {name:?} is not f64"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match &self.need(name)?.data {
            Payload::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(self.bad(format!("entry {name:?} is not a u64 scalar"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match &self.need(name)?.data {
            Payload::U8(v) => String::from_utf8(v.clone()).map_err(|_| self.bad(format!("entry {name:?} is not UTF-8"))),
            _ => Err(self.bad(format!("entry {name:?} is not text"))),
        }
    }

    fn bad(&self, reason: String) -> Error {
        Error::Checkpoint { path: PathBuf::new(), reason }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            b.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            b.extend_from_slice(e.name.as_bytes());
            b.push(e.data.code());
            b.push(e.dims.len() as u8);
            for d in &e.dims {
                b.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                Payload::F32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => b.extend_from_slice(v),
                Payload::U64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint { path: PathBuf::new(), reason: "bad magic".into() });
        }
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut ck = Checkpoint::default();
        let mut names = HashSet::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint { path: PathBuf::new(), reason: "entry name is not UTF-8".into() })?;
            if !names.insert(name.clone()) {
                return Err(Error::Checkpoint { path: PathBuf::new(), reason: format!("duplicate entry {name:?}") });
            }
            let code = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let dims: Vec<u64> = (0..rank).map(|_| r.array().map(u64::from_le_bytes)).collect::<Result<_>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize)).ok_or_else(|| {
                Error::Checkpoint { path: PathBuf::new(), reason: format!("entry {name:?} is too large") }
            })?;
            let data = match code {
                0 => Payload::F32((0..n).map(|_| r.array().map(f32::from_le_bytes)).collect::<Result<_>>()?),
                1 => Payload::F64((0..n).map(|_| r.array().map(f64::from_le_bytes)).collect::<Result<_>>()?),
                2 => Payload::U8(r.take(n)?.to_vec()),
                3 => Payload::U64((0..n).map(|_| r.array().map(u64::from_le_bytes)).collect::<Result<_>>()?),
                c => {
                    return Err(Error::Checkpoint { path: PathBuf::new(), reason: format!("unknown dtype code {c}") })
                }
            };
            ck.entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint { path: PathBuf::new(), reason: "trailing bytes".into() });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint { reason, .. } => Error::Checkpoint {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Checkpoint { path: PathBuf::new(), reason: "truncated file".into() });
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

fn push_store<T: Scalar>(ck: &mut Checkpoint, group: &str, store: &ParamStore<T>) -> Result<()> {
    for (_, name, m) in store.iter() {
        ck.push_mat(format!("{group}/{name}"), m)?;
    }
    Ok(())
}

fn read_store<T: Scalar>(ck: &Checkpoint, group: &str, layout: &ParamStore<T>) -> Result<ParamStore<T>> {
    let mut out = ParamStore::new();
    for (_, name, m) in layout.iter() {
        let v: Mat<T> = ck.mat(&format!("{group}/{name}"))?;
        if v.shape() != m.shape() {
            return Err(Error::Checkpoint {
                path: PathBuf::new(),
                reason: format!("{group}/{name} has shape {:?}, expected {:?}", v.shape(), m.shape()),
            });
        }
        out.add(name, v)?;
    }
    Ok(out)
}

/// Fixed preprocessing fitted before training.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    pub stats: CodecStats,
    pub pca: PcaProjector,
}

fn push_preprocess(ck: &mut Checkpoint, pre: &Preprocess) -> Result<()> {
    ck.push_f64s("codec/mean", &pre.stats.mean)?;
    ck.push_f64s("codec/scale", &[pre.stats.scale])?;
    ck.push_f64s("pca/mean", &pre.pca.mean)?;
    let basis: Vec<f64> = pre.pca.basis.concat();
    let cols = pre.pca.basis.first().map_or(0, Vec::len);
    ck.push("pca/basis", vec![pre.pca.basis.len() as u64, cols as u64], Payload::F64(basis))?;
    ck.push_f64s("pca/explained", &pre.pca.explained)?;
    ck.push_f64s("pca/cev", &[pre.pca.cev])
}

fn read_preprocess(ck: &Checkpoint) -> Result<Preprocess> {
    let e = ck.need("pca/basis")?;
    let basis_flat = ck.f64s("pca/basis")?;
    let cols = e.dims.get(1).copied().unwrap_or(0) as usize;
    let basis = if cols == 0 { Vec::new() } else { basis_flat.chunks(cols).map(<[f64]>::to_vec).collect() };
    Ok(Preprocess {
        stats: CodecStats {
            mean: ck.f64s("codec/mean")?,
            scale: ck.f64s("codec/scale")?.first().copied().unwrap_or(f64::NAN),
        },
        pca: PcaProjector {
            mean: ck.f64s("pca/mean")?,
            basis,
            explained: ck.f64s("pca/explained")?,
            cev: ck.f64s("pca/cev")?.first().copied().unwrap_or(f64::NAN),
        },
    })
}

/// Metadata written with every training checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub model_hash: String,
    pub config_hash: String,
    pub config_text: String,
}

/// A training checkpoint: parameter groups, optimizer moments and
/// counters, preprocessing and metadata.
pub fn encode_training<T: Scalar>(state: &TrainState<T>, pre: &Preprocess, meta: &CheckpointMeta) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    ck.push_text("meta/model_hash", &meta.model_hash)?;
    ck.push_text("meta/config_hash", &meta.config_hash)?;
    ck.push_text("meta/config", &meta.config_text)?;
    ck.push_u64("state/iter", state.iter)?;
    ck.push_u64("state/stage", u64::from(state.stage))?;
    ck.push_u64("state/adam_step", state.opt.step)?;
    ck.push_f64s(
        "state/adam_hyper",
        &[state.opt.lr, state.opt.beta1, state.opt.beta2, state.opt.eps, state.opt.weight_decay],
    )?;
    push_preprocess(&mut ck, pre)?;
    push_store(&mut ck, "student", &state.student)?;
    push_store(&mut ck, "ema", &state.ema)?;
    push_store(&mut ck, "teacher", &state.teacher)?;
    for (i, (m, v)) in state.opt.m.iter().zip(&state.opt.v).enumerate() {
        let name = state.student.iter().nth(i).map(|(_, n, _)| n.to_string()).unwrap_or_default();
        ck.push_mat(format!("adam_m/{name}"), m)?;
        ck.push_mat(format!("adam_v/{name}"), v)?;
    }
    Ok(ck)
}

pub fn read_meta(ck: &Checkpoint) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        model_hash: ck.text("meta/model_hash")?,
        config_hash: ck.text("meta/config_hash")?,
        config_text: ck.text("meta/config")?,
    })
}

/// Restores a training state; `expect_model_hash` guards against loading
/// into a different architecture.
pub fn decode_training<T: Scalar>(
    ck: &Checkpoint,
    cfg: &ModelConfig,
    expect_model_hash: &str,
) -> Result<(Arch, TrainState<T>, Preprocess)> {
    let meta = read_meta(ck)?;
    if meta.model_hash != expect_model_hash {
        return Err(Error::Checkpoint {
            path: PathBuf::new(),
            reason: format!(
                "checkpoint model hash {} does not match configuration {expect_model_hash}",
                meta.model_hash
            ),
        });
    }
    let pre = read_preprocess(ck)?;
    let (arch, layout) = Arch::init::<T>(cfg, pre.pca.dim())?;
    let student = read_store(ck, "student", &layout)?;
    let ema = read_store(ck, "ema", &layout)?;
    let teacher = read_store(ck, "teacher", &layout)?;
    let hyper = ck.f64s("state/adam_hyper")?;
    if hyper.len() != 5 {
        return Err(Error::Checkpoint { path: PathBuf::new(), reason: "bad optimizer hyperparameters".into() });
    }
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (_, name, _) in layout.iter() {
        m.push(ck.mat(&format!("adam_m/{name}"))?);
        v.push(ck.mat(&format!("adam_v/{name}"))?);
    }
    let stage = ck.u64("state/stage")?;
    if stage != 1 && stage != 2 {
        return Err(Error::Checkpoint { path: PathBuf::new(), reason: format!("unknown stage {stage}") });
    }
    let state = TrainState {
        student,
        ema,
        teacher,
        opt: AdamW {
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
            weight_decay: hyper[4],
            m,
            v,
            step: ck.u64("state/adam_step")?,
        },
        iter: ck.u64("state/iter")?,
        stage: stage as u8,
    };
    Ok((arch, state, pre))
}

/// The sampling model of a checkpoint: the EMA parameters.
pub fn load_model<T: Scalar>(path: &Path, cfg: &ModelConfig, expect_model_hash: &str) -> Result<(Model<T>, TrainState<T>)> {
    let ck = Checkpoint::load(path)?;
    let (arch, state, pre) = decode_training::<T>(&ck, cfg, expect_model_hash).map_err(|e| match e {
        Error::Checkpoint { reason, .. } => Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })?;
    let model = Model {
        arch,
        params: state.ema.clone(),
        stats: pre.stats,
        pca: pre.pca,
    };
    Ok((model, state))
}
