//! Binary checkpoint: `"HIFW"`, version byte, little-endian `u32` tensor
//! count, then per tensor the name, rank, dims, dtype tag and raw payload.

use std::fs;
use std::path::{Path, PathBuf};

use hiformer_tensor::{DType, ParamStore, Scalar, Tensor};
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::HiFormer;

pub const MAGIC: &[u8; 4] = b"HIFW";
pub const VERSION: u8 = 1;

/// One decoded checkpoint entry, payload kept as raw little-endian bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub payload: Vec<u8>,
}

impl StoredTensor {
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let width = self.dtype.size_of();
        let data: Vec<T> = match self.dtype {
            d if d == T::DTYPE => self.payload.chunks_exact(width).map(T::read_le).collect(),
            DType::F32 => self.payload.chunks_exact(width).map(|b| T::from_f64_lossy(f32::read_le(b) as f64)).collect(),
            DType::F64 => self.payload.chunks_exact(width).map(|b| T::from_f64_lossy(f64::read_le(b))).collect(),
        };
        Ok(Tensor::new(self.shape.clone(), data)?)
    }
}

/// Serializes every parameter and buffer of `store`.
pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let tensors = store.named_tensors();
    let mut out = Vec::with_capacity(16 + store.num_elements() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(T::DTYPE.tag());
        for &v in t.data() {
            v.write_le(&mut out);
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
        let end = self.pos.checked_add(n).ok_or(Error::UnexpectedEof)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::UnexpectedEof)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC || bytes[4] != VERSION {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: 5 };
    let count = r.u32()?;
    let mut out: Vec<StoredTensor> = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::CorruptHeader("tensor name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::UnsupportedDtype { name: name.clone(), tag })?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::UnexpectedEof)?;
        let payload = r.take(numel.checked_mul(dtype.size_of()).ok_or(Error::UnexpectedEof)?)?.to_vec();
        if out.iter().any(|t| t.name == name) {
            return Err(Error::CorruptHeader(format!("duplicate tensor `{name}`")));
        }
        out.push(StoredTensor { name, shape, dtype, payload });
    }
    Ok(out)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<StoredTensor>> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

/// Which checkpoint tensors to apply.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Names and shapes must agree exactly in both directions.
    #[default]
    Strict,
    /// Applies every tensor whose name starts with the prefix (all names
    /// when `None`) and whose shape matches; everything else is reported.
    Partial(Option<String>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// `(name, model shape, checkpoint shape)`.
    pub shape_mismatch: Vec<(String, Vec<usize>, Vec<usize>)>,
    /// Model tensors absent from the checkpoint.
    pub missing: Vec<String>,
    /// Checkpoint tensors absent from the model.
    pub unexpected: Vec<String>,
    /// Checkpoint tensors outside the requested prefix.
    pub filtered: Vec<String>,
}

impl std::fmt::Display for LoadReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "loaded {} tensors", self.loaded.len())?;
        for (name, model, ckpt) in &self.shape_mismatch {
            writeln!(f, "  shape mismatch {name}: model {model:?}, checkpoint {ckpt:?}")?;
        }
        for name in &self.missing {
            writeln!(f, "  not in checkpoint: {name}")?;
        }
        for name in &self.unexpected {
            writeln!(f, "  not in model: {name}")?;
        }
        write!(f, "  {} tensors outside prefix", self.filtered.len())
    }
}

/// Applies decoded tensors to `store` under `mode`.
pub fn load_tensors<T: Scalar>(store: &mut ParamStore<T>, tensors: &[StoredTensor], mode: &LoadMode) -> Result<LoadReport> {
    let model: Vec<(String, Vec<usize>)> =
        store.named_tensors().into_iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    let mut report = LoadReport::default();
    let mut updates = Vec::new();
    for st in tensors {
        if let LoadMode::Partial(Some(prefix)) = mode {
            if !st.name.starts_with(prefix.as_str()) {
                report.filtered.push(st.name.clone());
                continue;
            }
        }
        match model.iter().find(|(n, _)| *n == st.name) {
            None => report.unexpected.push(st.name.clone()),
            Some((_, shape)) if *shape != st.shape => {
                report.shape_mismatch.push((st.name.clone(), shape.clone(), st.shape.clone()))
            }
            Some(_) => updates.push(st),
        }
    }
    for (name, _) in &model {
        let in_scope = match mode {
            LoadMode::Partial(Some(prefix)) => name.starts_with(prefix.as_str()),
            _ => true,
        };
        if in_scope && !tensors.iter().any(|t| t.name == *name) {
            report.missing.push(name.clone());
        }
    }
    if *mode == LoadMode::Strict {
        if let Some((name, expected, found)) = report.shape_mismatch.first() {
            return Err(Error::ShapeMismatch { name: name.clone(), expected: expected.clone(), found: found.clone() });
        }
        if let Some(name) = report.missing.first() {
            return Err(Error::MissingTensor(name.clone()));
        }
        if let Some(name) = report.unexpected.first() {
            return Err(Error::UnexpectedTensor(name.clone()));
        }
    }
    for st in updates {
        store.set_named(&st.name, st.to_tensor()?)?;
        report.loaded.push(st.name.clone());
    }
    Ok(report)
}

pub fn load_checkpoint<T: Scalar>(store: &mut ParamStore<T>, path: impl AsRef<Path>, mode: &LoadMode) -> Result<LoadReport> {
    load_tensors(store, &read_checkpoint(path)?, mode)
}

/// `<checkpoint>.json`, holding the model configuration.
pub fn config_sidecar(path: impl AsRef<Path>) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the checkpoint and its configuration sidecar.
pub fn save_model<T: Scalar>(model: &HiFormer<T>, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint(&model.store, &path)?;
    fs::write(config_sidecar(&path), model.config.to_json())?;
    Ok(())
}

/// Rebuilds a model from its sidecar configuration and loads it strictly.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<HiFormer<T>> {
    let config = ModelConfig::from_file(config_sidecar(&path))?;
    let mut model = HiFormer::new(&config, 0)?;
    load_checkpoint(&mut model.store, &path, &LoadMode::Strict)?;
    Ok(model)
}
