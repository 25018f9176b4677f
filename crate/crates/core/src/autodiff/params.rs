use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

pub const PARAMS_FORMAT_VERSION: u32 = 1;

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: IndexMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    format_version: u32,
    parameters: IndexMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), AutodiffError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Inserts a tensor with entries drawn from `N(0, std²)`.
    pub fn insert_normal<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<(), AutodiffError> {
        let normal = Normal::new(0.0, std).map_err(|e| AutodiffError::InvalidTensor(e.to_string()))?;
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn by_index(&self, index: usize) -> Option<(&str, &Tensor)> {
        self.entries.get_index(index).map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn tensor_at_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    /// Elementwise `self += other`; both sets must have identical layout.
    pub fn add_assign(&mut self, other: &ParameterSet) -> Result<(), AutodiffError> {
        if self.entries.len() != other.entries.len() {
            return Err(AutodiffError::InvalidTensor("parameter sets differ in size".into()));
        }
        for ((ka, a), (kb, b)) in self.entries.iter_mut().zip(&other.entries) {
            if ka != kb || a.shape() != b.shape() {
                return Err(AutodiffError::shape("parameter add", a.shape(), b.shape()));
            }
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.entries.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> Option<f64> {
        if self.entries.len() != other.entries.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for ((ka, a), (kb, b)) in self.entries.iter().zip(&other.entries) {
            if ka != kb || a.shape() != b.shape() {
                return None;
            }
            worst = worst.max(a.max_abs_diff(b));
        }
        Some(worst)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(ParamsDoc {
            format_version: PARAMS_FORMAT_VERSION,
            parameters: self.entries.clone(),
        })
        .expect("tensors always serialize")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_json_value()).expect("tensors always serialize")
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self, AutodiffError> {
        let doc: ParamsDoc =
            serde_json::from_value(value).map_err(|e| AutodiffError::InvalidTensor(e.to_string()))?;
        if doc.format_version != PARAMS_FORMAT_VERSION {
            return Err(AutodiffError::InvalidTensor(format!(
                "unsupported parameter format version {}",
                doc.format_version
            )));
        }
        Ok(ParameterSet { entries: doc.parameters })
    }

    pub fn from_json(text: &str) -> Result<Self, AutodiffError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| AutodiffError::InvalidTensor(e.to_string()))?;
        Self::from_json_value(value)
    }
}
