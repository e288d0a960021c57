//! Named parameter storage and safetensors persistence.
//!
//! Tensors are written as little-endian `F64` safetensors entries keyed by
//! parameter name, each with its 2-D shape.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::tape::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Raw little-endian bytes of every tensor in order, for bitwise comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values
            .iter()
            .flat_map(|v| v.iter().flat_map(|x| x.to_le_bytes()))
            .collect()
    }

    pub fn serialize(&self) -> Result<Vec<u8>> {
        let buffers: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| {
                let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                (n.clone(), bytes, vec![v.nrows(), v.ncols()])
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(n, b, s)| {
                TensorView::new(Dtype::F64, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::TensorFile(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, None).map_err(|e| Error::TensorFile(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.serialize()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Overwrites every parameter from serialized bytes. The file must hold
    /// exactly this store's tensor names with matching shapes and `F64` dtype.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::TensorFile(e.to_string()))?;
        for name in st.names() {
            if !self.lookup.contains_key(name) {
                return Err(Error::Schema {
                    tensor: name.to_string(),
                    reason: "not a parameter of this model".into(),
                });
            }
        }
        let mut fresh = Vec::with_capacity(self.values.len());
        for (name, current) in self.names.iter().zip(&self.values) {
            let view = st.tensor(name).map_err(|_| Error::Schema {
                tensor: name.clone(),
                reason: "missing from checkpoint".into(),
            })?;
            if view.dtype() != Dtype::F64 {
                return Err(Error::Schema {
                    tensor: name.clone(),
                    reason: format!("dtype {:?}, expected F64", view.dtype()),
                });
            }
            let want = [current.nrows(), current.ncols()];
            if view.shape() != want {
                return Err(Error::Schema {
                    tensor: name.clone(),
                    reason: format!("shape {:?}, expected {:?}", view.shape(), want),
                });
            }
            let data: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            fresh.push(Mat::from_shape_vec((want[0], want[1]), data).expect("checked shape"));
        }
        self.values = fresh;
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        self.load_bytes(&bytes)
    }
}

/// Gaussian initialization with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal(rng: &mut impl Rng, fan_in: usize, rows: usize, cols: usize) -> Mat {
    normal(rng, (2.0 / fan_in as f64).sqrt(), rows, cols)
}

/// Gaussian initialization with standard deviation `sqrt(1 / fan_in)`.
pub fn lecun_normal(rng: &mut impl Rng, fan_in: usize, rows: usize, cols: usize) -> Mat {
    normal(rng, (1.0 / fan_in as f64).sqrt(), rows, cols)
}

pub fn normal(rng: &mut impl Rng, std: f64, rows: usize, cols: usize) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}
