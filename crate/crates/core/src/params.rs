//! Named parameter storage shared by every trainable module.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

#[derive(Serialize, Deserialize)]
struct StoredMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform initialised `rows x cols` matrix.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let m = Array2::from_shape_fn((rows, cols), |_| dist.sample(rng));
        self.add(name, m)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::ones((rows, cols)))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, StoredMatrix> = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| {
                (
                    n.as_str(),
                    StoredMatrix {
                        rows: v.nrows(),
                        cols: v.ncols(),
                        data: v.iter().copied().collect(),
                    },
                )
            })
            .collect();
        serde_json::to_value(map).expect("matrices serialize")
    }

    /// Overwrites every parameter from a JSON object produced by
    /// [`ParamStore::to_json`]. Names and shapes must match exactly.
    pub fn load_json(&mut self, value: &serde_json::Value) -> Result<()> {
        let mut map: BTreeMap<String, StoredMatrix> = serde_json::from_value(value.clone())?;
        if map.len() != self.names.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model has {}",
                map.len(),
                self.names.len()
            )));
        }
        for (name, slot) in self.names.iter().zip(self.values.iter_mut()) {
            let stored = map
                .remove(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}`")))?;
            if (stored.rows, stored.cols) != slot.dim() {
                return Err(Error::Config(format!(
                    "`{name}` has shape {}x{}, expected {:?}",
                    stored.rows,
                    stored.cols,
                    slot.dim()
                )));
            }
            *slot = Mat::from_shape_vec((stored.rows, stored.cols), stored.data)
                .map_err(|e| Error::Config(format!("`{name}`: {e}")))?;
        }
        Ok(())
    }
}
