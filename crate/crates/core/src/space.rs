//! Embedding spaces: named, fixed-dimension collections of id-tagged vectors
//! with per-item frequency counts.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered set of id-tagged vectors of a single dimension.
///
/// Vectors are stored row-major in one buffer. Once built, a space is only
/// read; transformations return new spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpace {
    name: String,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
    freq: Vec<u64>,
    index: HashMap<String, usize>,
}

impl EmbeddingSpace {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            freq: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_rows<I, S>(name: impl Into<String>, dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut space = Self::new(name, dim);
        for (id, v) in rows {
            space.push(id, &v)?;
        }
        Ok(space)
    }

    /// Appends an item with frequency 0.
    pub fn push(&mut self, id: impl Into<String>, vector: &[f64]) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if let Some(bad) = vector.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry {bad} in vector `{id}`"
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        self.freq.push(0);
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major `len × dim` buffer.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index_of(id).map(|i| self.vector(i))
    }

    pub fn lookup(&self, id: &str) -> Result<usize> {
        self.index_of(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn freq(&self, i: usize) -> u64 {
        self.freq[i]
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freq
    }

    pub fn set_freq(&mut self, id: &str, count: u64) -> Result<()> {
        let i = self.lookup(id)?;
        self.freq[i] = count;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> + '_ {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dim.max(1)))
            .map(|(id, v)| (id.as_str(), v))
    }

    /// New space with the same ids and frequencies and replaced vectors.
    pub(crate) fn with_data(&self, name: String, dim: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dim * self.len());
        Self {
            name,
            dim,
            ids: self.ids.clone(),
            data,
            freq: self.freq.clone(),
            index: self.index.clone(),
        }
    }

    /// Subset of items in the given index order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::new(self.name.clone(), self.dim);
        for &i in indices {
            out.index.insert(self.ids[i].clone(), out.ids.len());
            out.ids.push(self.ids[i].clone());
            out.data.extend_from_slice(self.vector(i));
            out.freq.push(self.freq[i]);
        }
        out
    }

    pub fn normalize(&self, scheme: Normalization) -> Result<Self> {
        normalize(self, scheme)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for (_, v) in self.iter() {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        if !self.is_empty() {
            let n = self.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
        }
        mean
    }
}

/// Preprocessing applied to a space before alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    Unit,
    #[default]
    CenterThenUnit,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "unit" => Ok(Self::Unit),
            "center_then_unit" => Ok(Self::CenterThenUnit),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Unit => "unit",
            Self::CenterThenUnit => "center_then_unit",
        })
    }
}

pub fn normalize(space: &EmbeddingSpace, scheme: Normalization) -> Result<EmbeddingSpace> {
    let dim = space.dim();
    let mut data = space.as_slice().to_vec();
    if scheme == Normalization::CenterThenUnit {
        let mean = space.mean();
        for row in data.chunks_exact_mut(dim.max(1)) {
            for (x, m) in row.iter_mut().zip(&mean) {
                *x -= m;
            }
        }
    }
    if scheme != Normalization::None {
        for (i, row) in data.chunks_exact_mut(dim.max(1)).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroVector(space.id(i).to_string()));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok(space.with_data(space.name().to_string(), dim, data))
}

/// Ids of the `n` most frequent items; equal counts are ordered by id.
pub fn frequency_top_n(space: &EmbeddingSpace, n: usize) -> Vec<String> {
    top_n_indices(space, n)
        .into_iter()
        .map(|i| space.id(i).to_string())
        .collect()
}

pub(crate) fn top_n_indices(space: &EmbeddingSpace, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..space.len()).collect();
    order.sort_by(|&a, &b| {
        space
            .freq(b)
            .cmp(&space.freq(a))
            .then_with(|| space.id(a).cmp(space.id(b)))
    });
    order.truncate(n);
    order
}
