//! Text-prompt similarity and per-voxel class prediction.

use std::collections::BTreeMap;

use crate::dense::DenseLayer;
use crate::error::{Error, Result};
use crate::instance::InstanceLayer;
use crate::types::{dot, norm, VoxelKey};

/// Which embedding source answers a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSelection {
    Dense,
    DenseFused,
    Instance,
    InstanceFused,
}

impl LayerSelection {
    pub const ALL: [LayerSelection; 4] =
        [Self::Dense, Self::DenseFused, Self::Instance, Self::InstanceFused];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Dense => "dense",
            Self::DenseFused => "dense-fused",
            Self::Instance => "instance",
            Self::InstanceFused => "instance-fused",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == s)
    }
}

/// Text-encoder outputs for a label set.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub labels: Vec<String>,
    pub embeddings: Vec<Vec<f32>>,
    pub background: Vec<bool>,
}

impl PromptSet {
    pub fn new(labels: Vec<String>, embeddings: Vec<Vec<f32>>, background: Vec<bool>) -> Result<Self> {
        if labels.len() != embeddings.len() || labels.len() != background.len() {
            return Err(Error::InvalidInput("one embedding and flag per label required".into()));
        }
        if let Some(d) = embeddings.first().map(|e| e.len()) {
            if embeddings.iter().any(|e| e.len() != d) {
                return Err(Error::InvalidInput("prompt embeddings differ in length".into()));
            }
        }
        Ok(Self { labels, embeddings, background })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.embeddings.first().map(|e| e.len())
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Read-only view over both layers plus the materialized fused dense map.
#[derive(Clone, Copy)]
pub struct MapView<'a> {
    pub dense: &'a DenseLayer,
    pub instances: &'a InstanceLayer,
    pub fused_dense: Option<&'a BTreeMap<VoxelKey, Vec<f32>>>,
}

impl<'a> MapView<'a> {
    /// Visits each voxel of the selected layer with its embedding, in key order.
    ///
    /// Instance layers use the highest-count hypothesis per voxel; the
    /// fused variant falls back to the raw embedding when an instance was
    /// never fused. The fused dense variant falls back to the raw dense
    /// layer when no fused map is present.
    pub fn for_each_embedding(&self, layer: LayerSelection, mut f: impl FnMut(VoxelKey, &[f32])) {
        match layer {
            LayerSelection::Dense => {
                for k in self.dense.sorted_keys() {
                    f(k, self.dense.get(&k).expect("key from layer").embedding);
                }
            }
            LayerSelection::DenseFused => match self.fused_dense {
                Some(map) => {
                    for (k, e) in map {
                        f(*k, e);
                    }
                }
                None => {
                    for k in self.dense.sorted_keys() {
                        f(k, self.dense.get(&k).expect("key from layer").embedding);
                    }
                }
            },
            LayerSelection::Instance | LayerSelection::InstanceFused => {
                let fused = layer == LayerSelection::InstanceFused;
                for k in self.instances.sorted_voxel_keys() {
                    let Some(h) = self.instances.top_hypothesis(&k) else { continue };
                    let Some(rec) = self.instances.instance(h.instance_id) else { continue };
                    let emb: &[f32] = if fused { rec.best_embedding() } else { &rec.embedding };
                    f(k, emb);
                }
            }
        }
    }
}

/// Cosine similarity of every voxel with `prompt`. Zero-norm voxel
/// embeddings are skipped.
pub fn similarity_map(view: &MapView<'_>, layer: LayerSelection, prompt: &[f32]) -> Result<BTreeMap<VoxelKey, f32>> {
    let pn = norm(prompt);
    if pn == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    let mut out = BTreeMap::new();
    let mut err = None;
    view.for_each_embedding(layer, |k, e| {
        if e.len() != prompt.len() {
            err.get_or_insert_with(|| Error::InvalidInput("prompt dimension mismatch".into()));
            return;
        }
        let n = norm(e);
        if n > 0.0 {
            out.insert(k, (dot(e, prompt) / (n * pn)).clamp(-1.0, 1.0) as f32);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Argmax-cosine label per voxel; ties go to the lower class index.
pub fn predict_classes(view: &MapView<'_>, layer: LayerSelection, prompts: &PromptSet) -> Result<BTreeMap<VoxelKey, u16>> {
    let normed = normalized_prompts(prompts)?;
    let mut out = BTreeMap::new();
    let mut err = None;
    view.for_each_embedding(layer, |k, e| {
        if e.len() != normed[0].len() {
            err.get_or_insert_with(|| Error::InvalidInput("prompt dimension mismatch".into()));
            return;
        }
        if let Some(c) = argmax_class(e, &normed) {
            out.insert(k, c);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

pub(crate) fn normalized_prompts(prompts: &PromptSet) -> Result<Vec<Vec<f64>>> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("empty prompt set".into()));
    }
    prompts
        .embeddings
        .iter()
        .map(|e| {
            let n = norm(e);
            if n == 0.0 {
                Err(Error::UndefinedSimilarity)
            } else {
                Ok(e.iter().map(|&x| x as f64 / n).collect())
            }
        })
        .collect()
}

/// Voxel norm is a shared positive factor, so comparing raw dot products
/// with unit prompts gives the cosine argmax.
pub(crate) fn argmax_class(e: &[f32], normed: &[Vec<f64>]) -> Option<u16> {
    if norm(e) == 0.0 {
        return None;
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (c, p) in normed.iter().enumerate() {
        let s: f64 = e.iter().zip(p).map(|(&x, &y)| x as f64 * y).sum();
        if s > best.1 {
            best = (c, s);
        }
    }
    Some(best.0 as u16)
}
