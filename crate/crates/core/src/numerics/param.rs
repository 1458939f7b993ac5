use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{decode_le, encode_le, DType, DiffArray, Graph, Real};
use crate::error::{Error, Result};

/// A named learnable (or buffered) tensor with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Vec<T>,
    /// Buffers such as batch-norm running statistics are stored alongside
    /// parameters but never updated by the optimizer.
    pub trainable: bool,
}

impl<T: Real> ParamTensor<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], values: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape {
                op: "ParamTensor::new",
                left: shape.to_vec(),
                right: vec![values.len()],
            });
        }
        Ok(ParamTensor {
            name: name.into(),
            shape: shape.to_vec(),
            grad: vec![T::zero(); n],
            values,
            trainable: true,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![T::zero(); n]).expect("consistent shape")
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n]).expect("consistent shape")
    }

    pub fn buffer(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Uniform initialization in `[-b, b]` with `b = sqrt(1 / fan_in)`.
pub fn fan_in_uniform<T: Real>(
    name: impl Into<String>,
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> ParamTensor<T> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    ParamTensor::new(name, shape, values).expect("consistent shape")
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
    #[serde(default = "default_true")]
    trainable: bool,
}

fn default_true() -> bool {
    true
}

const PARAMS_FORMAT: &str = "canopy-params/1";

/// An ordered set of uniquely named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: Vec<ParamTensor<T>>,
    index: HashMap<String, usize>,
    /// Free-form architecture description stored in the manifest.
    meta: Option<serde_json::Value>,
}

/// Graph leaves created for every tensor of a [`ParamSet`], in set order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<DiffArray>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: Vec::new(),
            index: HashMap::new(),
            meta: None,
        }
    }

    pub fn meta(&self) -> Option<&serde_json::Value> {
        self.meta.as_ref()
    }

    pub fn set_meta(&mut self, meta: serde_json::Value) {
        self.meta = Some(meta);
    }

    pub fn insert(&mut self, p: ParamTensor<T>) -> Result<()> {
        if self.index.contains_key(&p.name) {
            return Err(Error::invalid(format!("duplicate parameter name `{}`", p.name)));
        }
        self.index.insert(p.name.clone(), self.tensors.len());
        self.tensors.push(p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    /// Like [`ParamSet::get`] but a missing name is an error.
    pub fn require(&self, name: &str) -> Result<&ParamTensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn require_mut(&mut self, name: &str) -> Result<&mut ParamTensor<T>> {
        self.get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Records every tensor as a graph leaf. Trainable tensors track
    /// gradients, buffers are constants.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if t.trainable {
                    graph.variable(&t.shape, t.values.clone())
                } else {
                    graph.constant(&t.shape, t.values.clone())
                }
                .expect("tensor shape is consistent")
            })
            .collect();
        Bound { vars }
    }

    pub fn var(&self, bound: &Bound, name: &str) -> Result<DiffArray> {
        self.position(name)
            .map(|i| bound.vars[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    /// Adds the graph gradients of the bound leaves into each tensor's `grad`.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = graph.grad(v) {
                t.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// JSON manifest line followed by the concatenated little-endian values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = ManifestEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: T::DTYPE,
                    offset,
                    trainable: t.trainable,
                };
                offset += t.numel() * T::DTYPE.size();
                e
            })
            .collect();
        let manifest = Manifest {
            format: PARAMS_FORMAT.to_string(),
            meta: self.meta.clone(),
            tensors,
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
        out.push(b'\n');
        for t in &self.tensors {
            encode_le(&t.values, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split_header(bytes)?;
        let manifest: Manifest = serde_json::from_slice(header)?;
        if manifest.format != PARAMS_FORMAT {
            return Err(Error::format(format!(
                "unexpected parameter format `{}`",
                manifest.format
            )));
        }
        let mut set = ParamSet::new();
        set.meta = manifest.meta;
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let len = n * e.dtype.size();
            let end = e.offset.checked_add(len).filter(|&end| end <= payload.len());
            let Some(end) = end else {
                return Err(Error::format(format!(
                    "tensor `{}` needs bytes {}..{} but payload has {}",
                    e.name,
                    e.offset,
                    e.offset + len,
                    payload.len()
                )));
            };
            let values = decode_le(&payload[e.offset..end], e.dtype);
            let mut t = ParamTensor::new(e.name, &e.shape, values)?;
            t.trainable = e.trainable;
            set.insert(t)?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Splits "JSON header line" + payload.
pub(crate) fn split_header(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("missing header terminator"))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamSet::<f64>::new();
        s.insert(ParamTensor::zeros("a", &[2])).unwrap();
        assert!(s.insert(ParamTensor::zeros("a", &[3])).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: ParamTensor<f64> = fan_in_uniform("w", &[8, 4, 3, 3], 36, &mut rng);
        let b = (1.0f64 / 36.0).sqrt();
        assert!(p.values.iter().all(|v| v.abs() <= b));
        assert!(p.values.iter().any(|v| v.abs() > b / 2.0));
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamSet::<f32>::new();
        s.insert(fan_in_uniform("conv.weight", &[4, 2, 3, 3], 18, &mut rng))
            .unwrap();
        s.insert(ParamTensor::filled("bn.running_var", &[4], 1.5f32).buffer())
            .unwrap();
        s.insert(ParamTensor::new("odd", &[3], vec![f32::MIN_POSITIVE, -0.0, 1e-39]).unwrap())
            .unwrap();
        let back = ParamSet::<f32>::from_bytes(&s.to_bytes()).unwrap();
        for (a, b) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.trainable, b.trainable);
            let bits_a: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut s = ParamSet::<f64>::new();
        s.insert(ParamTensor::zeros("w", &[5])).unwrap();
        let mut bytes = s.to_bytes();
        bytes.pop();
        let err = ParamSet::<f64>::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("payload"));
    }
}
