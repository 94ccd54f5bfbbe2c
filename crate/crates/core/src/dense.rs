//! Dense semantic layer: per-voxel running-mean patch embeddings.
//!
//! Storage is a slab: a key → slot index plus parallel arrays of keys,
//! weights and a flat `n·d` embedding buffer. Removal swaps the last slot
//! into the hole, so pruning never leaves gaps.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::types::{voxel_of, VoxelKey};

/// Borrowed view of one dense voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenseVoxel<'a> {
    pub embedding: &'a [f32],
    pub weight: f64,
}

/// One point headed for the dense layer.
#[derive(Clone, Copy, Debug)]
pub struct DensePoint<'a> {
    pub point: [f64; 3],
    pub embedding: &'a [f32],
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DenseUpdate {
    pub voxels_touched: usize,
    pub points_integrated: usize,
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    voxel_size: f64,
    dim: usize,
    index: HashMap<VoxelKey, usize>,
    keys: Vec<VoxelKey>,
    weights: Vec<f64>,
    embeddings: Vec<f32>,
}

impl DenseLayer {
    pub fn new(voxel_size: f64, dim: usize) -> Self {
        Self {
            voxel_size,
            dim,
            index: HashMap::new(),
            keys: Vec::new(),
            weights: Vec::new(),
            embeddings: Vec::new(),
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, key: &VoxelKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn get(&self, key: &VoxelKey) -> Option<DenseVoxel<'_>> {
        self.index.get(key).map(|&slot| self.slot(slot))
    }

    /// Current mean embedding and weight at `key`, if the voxel exists.
    pub fn dense_embedding_at(&self, key: &VoxelKey) -> Option<(Vec<f32>, f64)> {
        self.get(key).map(|v| (v.embedding.to_vec(), v.weight))
    }

    /// Weight at `key`, zero when absent.
    pub fn weight_at(&self, key: &VoxelKey) -> f64 {
        self.index.get(key).map_or(0.0, |&s| self.weights[s])
    }

    fn slot(&self, slot: usize) -> DenseVoxel<'_> {
        DenseVoxel {
            embedding: &self.embeddings[slot * self.dim..(slot + 1) * self.dim],
            weight: self.weights[slot],
        }
    }

    /// Iterates voxels in storage order (not sorted).
    pub fn iter(&self) -> impl Iterator<Item = (VoxelKey, DenseVoxel<'_>)> + '_ {
        self.keys.iter().enumerate().map(|(s, &k)| (k, self.slot(s)))
    }

    pub fn sorted_keys(&self) -> Vec<VoxelKey> {
        let mut keys = self.keys.clone();
        keys.sort_unstable();
        keys
    }

    /// Adds a batch of weighted points.
    ///
    /// Per touched voxel with incoming weighted sum `S` and weight `n`:
    /// `w ← w + n`, `f ← (w_old·f + S) / (w_old + n)`. The whole batch is
    /// validated before any voxel changes.
    pub fn integrate(&mut self, points: &[DensePoint<'_>]) -> Result<DenseUpdate> {
        for (i, p) in points.iter().enumerate() {
            if p.embedding.len() != self.dim {
                return Err(Error::InvalidInput(format!(
                    "point {i}: embedding length {} != {}",
                    p.embedding.len(),
                    self.dim
                )));
            }
            if !(p.weight > 0.0 && p.weight.is_finite()) {
                return Err(Error::InvalidInput(format!("point {i}: weight {} must be > 0", p.weight)));
            }
            if p.point.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidInput(format!("point {i}: non-finite coordinates")));
            }
            if p.embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("point {i}: non-finite embedding")));
            }
        }

        // Accumulate per-voxel sums in f64 first, then fold each voxel once.
        let d = self.dim;
        let mut groups: HashMap<VoxelKey, usize> = HashMap::new();
        let mut sums: Vec<f64> = Vec::new();
        let mut incoming: Vec<(VoxelKey, f64)> = Vec::new();
        for p in points {
            let key = voxel_of(p.point, self.voxel_size);
            let g = *groups.entry(key).or_insert_with(|| {
                incoming.push((key, 0.0));
                sums.resize(sums.len() + d, 0.0);
                incoming.len() - 1
            });
            incoming[g].1 += p.weight;
            for (acc, &x) in sums[g * d..(g + 1) * d].iter_mut().zip(p.embedding) {
                *acc += p.weight * x as f64;
            }
        }

        for (g, &(key, n)) in incoming.iter().enumerate() {
            let sum = &sums[g * d..(g + 1) * d];
            match self.index.get(&key) {
                Some(&slot) => {
                    let w_old = self.weights[slot];
                    let w_new = w_old + n;
                    for (f, &s) in self.embeddings[slot * d..(slot + 1) * d].iter_mut().zip(sum) {
                        *f = ((w_old * *f as f64 + s) / w_new) as f32;
                    }
                    self.weights[slot] = w_new;
                }
                None => {
                    self.index.insert(key, self.keys.len());
                    self.keys.push(key);
                    self.weights.push(n);
                    self.embeddings.extend(sum.iter().map(|&s| (s / n) as f32));
                }
            }
        }
        Ok(DenseUpdate { voxels_touched: incoming.len(), points_integrated: points.len() })
    }

    /// Inserts or replaces a voxel verbatim (snapshot loading).
    pub fn insert_raw(&mut self, key: VoxelKey, embedding: &[f32], weight: f64) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::InvalidInput("embedding length mismatch".into()));
        }
        match self.index.get(&key) {
            Some(&slot) => {
                self.embeddings[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(embedding);
                self.weights[slot] = weight;
            }
            None => {
                self.index.insert(key, self.keys.len());
                self.keys.push(key);
                self.weights.push(weight);
                self.embeddings.extend_from_slice(embedding);
            }
        }
        Ok(())
    }

    pub fn remove(&mut self, key: &VoxelKey) -> bool {
        let Some(slot) = self.index.remove(key) else {
            return false;
        };
        let last = self.keys.len() - 1;
        let d = self.dim;
        if slot != last {
            let moved = self.keys[last];
            self.keys[slot] = moved;
            self.weights[slot] = self.weights[last];
            self.embeddings.copy_within(last * d..(last + 1) * d, slot * d);
            self.index.insert(moved, slot);
        }
        self.keys.pop();
        self.weights.pop();
        self.embeddings.truncate(last * d);
        true
    }

    /// Keeps voxels for which `keep` returns true; returns how many were removed.
    pub fn retain(&mut self, mut keep: impl FnMut(&VoxelKey) -> bool) -> usize {
        let doomed: Vec<VoxelKey> = self.keys.iter().filter(|k| !keep(k)).copied().collect();
        for k in &doomed {
            self.remove(k);
        }
        doomed.len()
    }

    /// Bytes of semantic state: key, weight and embedding per voxel.
    pub fn semantic_bytes(&self) -> usize {
        self.len() * (3 * std::mem::size_of::<i64>() + std::mem::size_of::<f64>() + 4 * self.dim)
    }
}
