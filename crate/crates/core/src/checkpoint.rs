//! Checkpoint container: one little-endian `f32` blob holding named tensors
//! back to back, plus a JSON sidecar listing names, shapes and offsets and
//! carrying free-form metadata. Both files are written atomically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::io::artifacts::write_atomic;
use crate::nn::{Module, Param};
use crate::{Error, Real, Result};

pub const FORMAT: &str = "omnirf-tensors";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<TensorRecord>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// In-memory checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    order: Vec<String>,
    pub meta: serde_json::Value,
}

pub fn blob_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

pub fn sidecar_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, ..Default::default() }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor {name} shape");
        if self.tensors.insert(name.clone(), (shape, data)).is_none() {
            self.order.push(name);
        }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors.get(name).map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    /// Stores every parameter of `module` under `prefix`.
    pub fn insert_module<T: Real>(&mut self, prefix: &str, module: &dyn Module<T>) {
        module.visit_params(&mut |p| {
            self.insert(format!("{prefix}/{}", p.name), p.shape.clone(), p.value.iter().map(|v| v.f64() as f32).collect());
        });
    }

    /// Restores every parameter of `module` from `prefix`; names and shapes
    /// must match.
    pub fn load_module<T: Real>(&self, prefix: &str, module: &mut dyn Module<T>) -> Result<()> {
        let mut err = None;
        module.visit_params_mut(&mut |p: &mut Param<T>| {
            if err.is_some() {
                return;
            }
            let key = format!("{prefix}/{}", p.name);
            match self.get(&key) {
                Some((shape, data)) if shape == p.shape.as_slice() => {
                    p.value.iter_mut().zip(data).for_each(|(v, &d)| *v = T::lit(d as f64));
                }
                Some((shape, _)) => {
                    err = Some(Error::CorruptData(format!("{key}: stored shape {shape:?}, expected {:?}", p.shape)))
                }
                None => err = Some(Error::CorruptData(format!("checkpoint lacks {key}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        let mut records = Vec::with_capacity(self.order.len());
        let mut bytes = Vec::new();
        let mut offset = 0;
        for name in &self.order {
            let (shape, data) = &self.tensors[name];
            records.push(TensorRecord { name: name.clone(), shape: shape.clone(), offset });
            offset += data.len();
            bytes.reserve(data.len() * 4);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sidecar = Sidecar { format: FORMAT.into(), version: VERSION, tensors: records, meta: self.meta.clone() };
        write_atomic(&blob_path(base), &bytes)?;
        write_atomic(&sidecar_path(base), serde_json::to_string_pretty(&sidecar)?.as_bytes())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (sp, bp) = (sidecar_path(base), blob_path(base));
        for p in [&sp, &bp] {
            if !p.exists() {
                return Err(Error::MissingInput(p.clone()));
            }
        }
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&sp)?)?;
        if sidecar.format != FORMAT || sidecar.version != VERSION {
            return Err(Error::UnsupportedFormat(format!("{} v{}", sidecar.format, sidecar.version)));
        }
        let bytes = fs::read(&bp)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::CorruptData(format!("{}: length {} is not a multiple of 4", bp.display(), bytes.len())));
        }
        let all: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut ck = Checkpoint::new(sidecar.meta);
        for r in sidecar.tensors {
            let n: usize = r.shape.iter().product();
            let data = all
                .get(r.offset..r.offset + n)
                .ok_or_else(|| Error::CorruptData(format!("{}: tensor {} past end of blob", bp.display(), r.name)))?;
            ck.insert(r.name, r.shape, data.to_vec());
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        let mut ck = Checkpoint::new(serde_json::json!({"step": 12}));
        ck.insert("b", vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25]);
        ck.insert("a", vec![3], vec![7.0, 8.0, 9.0]);
        ck.save(&base).unwrap();
        let back = Checkpoint::load(&base).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.names(), &["b".to_string(), "a".to_string()]);
        assert_eq!(back.meta["step"], 12);
        assert_eq!(fs::metadata(blob_path(&base)).unwrap().len(), 7 * 4);
    }

    #[test]
    fn module_round_trip_and_shape_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Linear::<f32>::new("l", 3, 2, &mut rng);
        let mut b = Linear::<f32>::new("l", 3, 2, &mut rng);
        let mut ck = Checkpoint::default();
        ck.insert_module("net", &a);
        ck.load_module("net", &mut b).unwrap();
        assert_eq!(a.weight.value, b.weight.value);
        let mut c = Linear::<f32>::new("l", 4, 2, &mut rng);
        assert!(matches!(ck.load_module("net", &mut c), Err(Error::CorruptData(_))));
        assert!(matches!(ck.load_module("other", &mut b), Err(Error::CorruptData(_))));
    }

    #[test]
    fn truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        let mut ck = Checkpoint::default();
        ck.insert("a", vec![4], vec![1.0; 4]);
        ck.save(&base).unwrap();
        fs::write(blob_path(&base), [0u8; 8]).unwrap();
        assert!(matches!(Checkpoint::load(&base), Err(Error::CorruptData(_))));
        assert!(matches!(Checkpoint::load(&dir.path().join("none")), Err(Error::MissingInput(_))));
    }
}
