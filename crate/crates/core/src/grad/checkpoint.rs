//! `PDC1` checkpoint files.
//!
//! Layout: the magic `PDC1`, a u32 LE manifest length, the JSON manifest, then
//! every tensor as f64 LE values in manifest order. The manifest lists each
//! tensor's name, shape, routing tag and role (`value` for parameters, or the
//! name of an auxiliary group such as optimizer state) plus free-form metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Tag};
use super::tensor::Tensor;
use crate::error::{PdmlError, Result};
use crate::Scalar;

const MAGIC: &[u8; 4] = b"PDC1";
const VERSION: u32 = 1;
const VALUE_ROLE: &str = "value";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    tag: String,
    role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    tensors: Vec<TensorRecord>,
    meta: serde_json::Value,
}

/// Parameters, optional auxiliary tensor groups aligned with them, and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub params: ParamStore<F>,
    /// `(role, tensors)`; each group has one tensor per parameter, same shapes.
    pub groups: Vec<(String, Vec<Tensor<F>>)>,
    pub meta: serde_json::Value,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new(params: ParamStore<F>, meta: serde_json::Value) -> Self {
        Self {
            params,
            groups: Vec::new(),
            meta,
        }
    }

    pub fn group(&self, role: &str) -> Option<&[Tensor<F>]> {
        self.groups
            .iter()
            .find(|(r, _)| r == role)
            .map(|(_, g)| g.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut values: Vec<&Tensor<F>> = Vec::new();
        for e in self.params.entries() {
            tensors.push(TensorRecord {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                tag: e.tag.to_string(),
                role: VALUE_ROLE.into(),
            });
            values.push(&e.value);
        }
        for (role, group) in &self.groups {
            if role == VALUE_ROLE || group.len() != self.params.len() {
                return Err(PdmlError::Checkpoint(format!(
                    "malformed tensor group {role:?}"
                )));
            }
            for (e, t) in self.params.entries().iter().zip(group) {
                if t.shape() != e.value.shape() {
                    return Err(PdmlError::Checkpoint(format!(
                        "group {role:?} tensor for {} has shape {:?}, expected {:?}",
                        e.name,
                        t.shape(),
                        e.value.shape()
                    )));
                }
                tensors.push(TensorRecord {
                    name: e.name.clone(),
                    shape: t.shape().to_vec(),
                    tag: e.tag.to_string(),
                    role: role.clone(),
                });
                values.push(t);
            }
        }
        let manifest = serde_json::to_vec(&Manifest {
            version: VERSION,
            tensors,
            meta: self.meta.clone(),
        })?;
        let total: usize = values.iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(8 + manifest.len() + total * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in values {
            for &v in t.data() {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(PdmlError::Checkpoint("bad magic, expected PDC1".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(8..8 + len)
            .ok_or_else(|| PdmlError::Checkpoint("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)
            .map_err(|e| PdmlError::Checkpoint(format!("invalid manifest: {e}")))?;
        if manifest.version != VERSION {
            return Err(PdmlError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }

        let mut cursor = 8 + len;
        let mut params = ParamStore::new();
        let mut groups: Vec<(String, Vec<Tensor<F>>)> = Vec::new();
        for rec in &manifest.tensors {
            let n: usize = rec.shape.iter().product();
            let raw = bytes.get(cursor..cursor + n * 8).ok_or_else(|| {
                PdmlError::Checkpoint(format!("payload truncated in tensor {:?}", rec.name))
            })?;
            cursor += n * 8;
            let data = raw
                .chunks_exact(8)
                .map(|c| F::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            let tensor = Tensor::from_vec(&rec.shape, data)?;
            let tag: Tag = rec.tag.parse()?;
            if rec.role == VALUE_ROLE {
                params.insert(rec.name.clone(), tag, tensor)?;
                continue;
            }
            let id = params.id(&rec.name).ok_or_else(|| {
                PdmlError::Checkpoint(format!("group tensor for unknown parameter {:?}", rec.name))
            })?;
            if params.entry(id).value.shape() != tensor.shape() {
                return Err(PdmlError::Checkpoint(format!(
                    "shape mismatch for {:?} in group {:?}",
                    rec.name, rec.role
                )));
            }
            match groups.iter_mut().find(|(r, _)| *r == rec.role) {
                Some((_, g)) => g.push(tensor),
                None => groups.push((rec.role.clone(), vec![tensor])),
            }
        }
        if cursor != bytes.len() {
            return Err(PdmlError::Checkpoint(format!(
                "{} trailing bytes after payload",
                bytes.len() - cursor
            )));
        }
        for (role, g) in &groups {
            if g.len() != params.len() {
                return Err(PdmlError::Checkpoint(format!(
                    "incomplete tensor group {role:?}"
                )));
            }
        }
        Ok(Self {
            params,
            groups,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal};
    use proptest::prelude::*;

    fn random_store(seed: u64, dims: &[Vec<usize>]) -> ParamStore<f64> {
        let mut rng = rng_from_seed(seed);
        let mut s = ParamStore::new();
        for (i, shape) in dims.iter().enumerate() {
            let n = shape.iter().product();
            let data = (0..n).map(|_| standard_normal(&mut rng)).collect();
            let tag = Tag::ALL[i % Tag::ALL.len()];
            s.insert(format!("p{i}"), tag, Tensor::from_vec(shape, data).unwrap())
                .unwrap();
        }
        s
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(
            seed in any::<u64>(),
            dims in proptest::collection::vec(proptest::collection::vec(1usize..4, 0..3), 1..6),
        ) {
            let params = random_store(seed, &dims);
            let rms: Vec<_> = params.entries().iter().map(|e| {
                let mut t = e.value.clone();
                t.data_mut().iter_mut().for_each(|x| *x = x.abs());
                t
            }).collect();
            let mut ck = Checkpoint::new(params, serde_json::json!({"seed": seed}));
            ck.groups.push(("rms".into(), rms));
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_bad_magic_version_and_shapes() {
        let ck = Checkpoint::new(
            random_store(1, &[vec![2, 2], vec![3]]),
            serde_json::json!({}),
        );
        let bytes = ck.to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[3] = b'9';
        assert!(Checkpoint::<f64>::from_bytes(&bad).is_err());

        let text = String::from_utf8_lossy(&bytes[8..]).into_owned();
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let manifest = &text[..len];

        let rebuild = |m: &str| {
            let mut out = b"PDC1".to_vec();
            out.extend_from_slice(&(m.len() as u32).to_le_bytes());
            out.extend_from_slice(m.as_bytes());
            out.extend_from_slice(&bytes[8 + len..]);
            out
        };
        let wrong_version = manifest.replace("\"version\":1", "\"version\":2");
        assert!(Checkpoint::<f64>::from_bytes(&rebuild(&wrong_version)).is_err());

        // the manifest claims a larger tensor than the payload holds
        let wrong_shape = manifest.replacen("[2,2]", "[2,3]", 1);
        let err = Checkpoint::<f64>::from_bytes(&rebuild(&wrong_shape)).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let unknown_tag = manifest.replacen("backbone", "trunk", 1);
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&rebuild(&unknown_tag)),
            Err(PdmlError::Config(_))
        ));
    }
}
