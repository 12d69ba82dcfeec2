//! Named parameter tensors and the flat binary container with a JSON manifest.
//!
//! The container is two files: a little-endian `f64` blob holding every
//! tensor back to back, and a manifest listing `name`, `shape`, byte `offset`
//! and `dtype` for each tensor plus the architecture that produced them.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("container mismatch: {0}")]
    Mismatch(String),
}

/// A parameter tensor with a gradient accumulator of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// False for running statistics that the optimiser must not touch.
    pub trainable: bool,
}

impl Param {
    pub fn filled(name: &str, shape: Vec<usize>, v: f64) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.to_string(),
            shape,
            value: vec![v; len],
            grad: vec![0.0; len],
            trainable: true,
        }
    }

    pub fn zeros(name: &str, shape: Vec<usize>) -> Self {
        Self::filled(name, shape, 0.0)
    }

    /// Entries drawn from `N(0, 1/fan_in)`.
    pub fn gaussian(name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
        for v in &mut p.value {
            *v = normal.sample(rng);
        }
        p
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns parameters, visited in a fixed order.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// Concatenated values of every parameter, in visit order.
    fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend_from_slice(&p.grad));
        out
    }

    /// Values of trainable parameters only, in visit order.
    fn trainable_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| {
            if p.trainable {
                out.extend_from_slice(&p.value)
            }
        });
        out
    }

    fn trainable_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| {
            if p.trainable {
                out.extend_from_slice(&p.grad)
            }
        });
        out
    }

    /// Inverse of [`Parameterized::trainable_values`].
    fn set_trainable_values(&mut self, values: &[f64]) {
        let mut off = 0;
        self.visit_params_mut(&mut |p| {
            if p.trainable {
                let len = p.value.len();
                p.value.copy_from_slice(&values[off..off + len]);
                off += len;
            }
        });
        assert_eq!(off, values.len(), "flat parameter length");
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |p| ok &= p.value.iter().all(|v| v.is_finite()));
        ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the binary blob.
    pub offset: usize,
    pub dtype: String,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub format: String,
    pub version: u32,
    pub endianness: String,
    pub architecture: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub const CONTAINER_FORMAT: &str = "vnpose-params";

/// Serialises every parameter into `(blob, manifest)`.
pub fn encode(model: &impl Parameterized, architecture: serde_json::Value) -> (Vec<u8>, ParamManifest) {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    model.visit_params(&mut |p| {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset: blob.len(),
            dtype: "f64".into(),
            trainable: p.trainable,
        });
        for v in &p.value {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    (
        blob,
        ParamManifest {
            format: CONTAINER_FORMAT.into(),
            version: 1,
            endianness: "little".into(),
            architecture,
            tensors,
        },
    )
}

/// Copies values from a container into `model`, checking names and shapes.
pub fn decode_into(model: &mut impl Parameterized, blob: &[u8], manifest: &ParamManifest) -> Result<(), ParamError> {
    if manifest.format != CONTAINER_FORMAT || manifest.endianness != "little" {
        return Err(ParamError::Mismatch(format!(
            "unsupported container {}/{}",
            manifest.format, manifest.endianness
        )));
    }
    let mut idx = 0;
    let mut err = None;
    model.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        let Some(entry) = manifest.tensors.get(idx) else {
            err = Some(format!("container has no entry for {}", p.name));
            return;
        };
        idx += 1;
        if entry.name != p.name || entry.shape != p.shape || entry.dtype != "f64" {
            err = Some(format!(
                "entry {} {:?} does not match parameter {} {:?}",
                entry.name, entry.shape, p.name, p.shape
            ));
            return;
        }
        let end = entry.offset + 8 * p.len();
        if end > blob.len() {
            err = Some(format!("blob too short for {}", p.name));
            return;
        }
        for (i, v) in p.value.iter_mut().enumerate() {
            let o = entry.offset + 8 * i;
            *v = f64::from_le_bytes(blob[o..o + 8].try_into().expect("8 bytes"));
        }
    });
    if let Some(e) = err {
        return Err(ParamError::Mismatch(e));
    }
    if idx != manifest.tensors.len() {
        return Err(ParamError::Mismatch(format!(
            "container has {} tensors, model has {}",
            manifest.tensors.len(),
            idx
        )));
    }
    Ok(())
}

/// Writes `<stem>.bin` and `<stem>.json` next to each other.
pub fn save(
    model: &impl Parameterized,
    architecture: serde_json::Value,
    bin_path: &Path,
    manifest_path: &Path,
) -> Result<(), ParamError> {
    let (blob, manifest) = encode(model, architecture);
    crate::io::write_atomic(bin_path, &blob)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.write_all(b"\n")?;
    crate::io::write_atomic(manifest_path, &json)?;
    Ok(())
}

pub fn read_manifest(manifest_path: &Path) -> Result<ParamManifest, ParamError> {
    Ok(serde_json::from_slice(&fs::read(manifest_path)?)?)
}

pub fn load_into(model: &mut impl Parameterized, bin_path: &Path, manifest_path: &Path) -> Result<(), ParamError> {
    let manifest = read_manifest(manifest_path)?;
    let blob = fs::read(bin_path)?;
    decode_into(model, &blob, &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    struct Two(Param, Param);

    impl Parameterized for Two {
        fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.0);
            f(&self.1);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0);
            f(&mut self.1);
        }
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let mut rng = seeded_rng(0);
        let a = Two(
            Param::gaussian("a", vec![3, 4], 4, &mut rng),
            Param::gaussian("b", vec![5], 5, &mut rng).frozen(),
        );
        let (blob, manifest) = encode(&a, serde_json::json!({"kind": "test"}));
        assert_eq!(blob.len(), 17 * 8);
        assert_eq!(manifest.tensors[1].offset, 12 * 8);
        let mut b = Two(Param::zeros("a", vec![3, 4]), Param::zeros("b", vec![5]));
        decode_into(&mut b, &blob, &manifest).unwrap();
        assert_eq!(a.flat_values(), b.flat_values());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = Two(Param::zeros("a", vec![3, 4]), Param::zeros("b", vec![5]));
        let (blob, manifest) = encode(&a, serde_json::Value::Null);
        let mut b = Two(Param::zeros("a", vec![4, 3]), Param::zeros("b", vec![5]));
        assert!(matches!(
            decode_into(&mut b, &blob, &manifest),
            Err(ParamError::Mismatch(_))
        ));
    }

    #[test]
    fn gaussian_init_variance_is_fan_in_scaled() {
        let mut rng = seeded_rng(3);
        let fan_in = 25;
        let p = Param::gaussian("w", vec![400, fan_in], fan_in, &mut rng);
        let n = p.len() as f64;
        let mean = p.value.iter().sum::<f64>() / n;
        let var = p.value.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 1.0 / fan_in as f64;
        assert!((var - expected).abs() <= 0.1 * expected, "var {var}");
    }
}
