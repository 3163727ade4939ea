use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{NmaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under `name`. Re-registering a name replaces the value.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.tensors[id.0] = value;
            return id;
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    /// Glorot-style normal initialization for a `rows×cols` weight.
    pub fn insert_random<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("std is finite and positive");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new([rows, cols], data).expect("sized"))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NmaError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Gradient of one parameter: dense, or row-sparse for embedding tables.
#[derive(Debug, Clone, PartialEq)]
pub enum GradEntry {
    Dense(Tensor),
    Rows {
        shape: [usize; 2],
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl GradEntry {
    pub fn to_dense(&self) -> Tensor {
        match self {
            GradEntry::Dense(t) => t.clone(),
            GradEntry::Rows { shape, rows } => {
                let mut t = Tensor::zeros(shape[0], shape[1]);
                for (&r, vals) in rows {
                    for (c, v) in vals.iter().enumerate() {
                        t.set(r, c, v + t.at(r, c));
                    }
                }
                t
            }
        }
    }

    /// Gradient component at flat row-major index `i`.
    pub fn at_flat(&self, i: usize) -> f64 {
        match self {
            GradEntry::Dense(t) => t.data()[i],
            GradEntry::Rows { shape, rows } => {
                let (r, c) = (i / shape[1], i % shape[1]);
                rows.get(&r).map_or(0.0, |v| v[c])
            }
        }
    }

    fn values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            GradEntry::Dense(t) => Box::new(t.data().iter().copied()),
            GradEntry::Rows { rows, .. } => Box::new(rows.values().flatten().copied()),
        }
    }

    fn scale(&mut self, s: f64) {
        match self {
            GradEntry::Dense(t) => t.data_mut().iter_mut().for_each(|v| *v *= s),
            GradEntry::Rows { rows, .. } => rows
                .values_mut()
                .flatten()
                .for_each(|v| *v *= s),
        }
    }

    fn accumulate(&mut self, other: &GradEntry) {
        match (&mut *self, other) {
            (GradEntry::Dense(a), GradEntry::Dense(b)) => a.add_assign(b),
            (GradEntry::Rows { rows: a, .. }, GradEntry::Rows { rows: b, .. }) => {
                for (r, vals) in b {
                    let slot = a.entry(*r).or_insert_with(|| vec![0.0; vals.len()]);
                    for (x, y) in slot.iter_mut().zip(vals) {
                        *x += y;
                    }
                }
            }
            (GradEntry::Dense(a), sparse) => a.add_assign(&sparse.to_dense()),
            (rows @ GradEntry::Rows { .. }, GradEntry::Dense(b)) => {
                let mut d = rows.to_dense();
                d.add_assign(b);
                *rows = GradEntry::Dense(d);
            }
        }
    }
}

/// Parameter gradients produced by one backward pass (or a sum of several).
/// Parameters never reached by the pass have an implicit zero gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    entries: BTreeMap<ParamId, GradEntry>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&GradEntry> {
        self.entries.get(&id)
    }

    /// Dense gradient for `id`, zeros when unreached.
    pub fn dense(&self, id: ParamId, store: &ParamStore) -> Tensor {
        match self.entries.get(&id) {
            Some(e) => e.to_dense(),
            None => {
                let [r, c] = store.get(id).shape();
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &GradEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub(crate) fn add_dense(&mut self, id: ParamId, g: &Tensor) {
        match self.entries.get_mut(&id) {
            Some(e) => e.accumulate(&GradEntry::Dense(g.clone())),
            None => {
                self.entries.insert(id, GradEntry::Dense(g.clone()));
            }
        }
    }

    pub(crate) fn add_row(&mut self, id: ParamId, shape: [usize; 2], row: usize, g: &[f64]) {
        let entry = self.entries.entry(id).or_insert_with(|| GradEntry::Rows {
            shape,
            rows: BTreeMap::new(),
        });
        match entry {
            GradEntry::Rows { rows, .. } => {
                let slot = rows.entry(row).or_insert_with(|| vec![0.0; g.len()]);
                for (x, y) in slot.iter_mut().zip(g) {
                    *x += y;
                }
            }
            GradEntry::Dense(t) => {
                for (c, y) in g.iter().enumerate() {
                    t.set(row, c, t.at(row, c) + y);
                }
            }
        }
    }

    /// Adds `other` into `self` (gradient accumulation is additive).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, e) in &other.entries {
            match self.entries.get_mut(id) {
                Some(mine) => mine.accumulate(e),
                None => {
                    self.entries.insert(*id, e.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for e in self.entries.values_mut() {
            e.scale(s);
        }
    }

    /// Drops the gradients of every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, store: &ParamStore, prefix: &str) {
        self.entries
            .retain(|id, _| !store.name(*id).starts_with(prefix));
    }

    /// First parameter whose gradient holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.entries
            .iter()
            .find(|(_, e)| e.values().any(|v| !v.is_finite()))
            .map(|(id, _)| *id)
    }
}
