//! Cross-layer precision-weighted fusion of the dense and instance layers.
//!
//! With per-observation variance ratio `λ = R_dense / R_instance`, a voxel
//! observed `w_d` times densely and `w_i` times by an instance has fused
//! embedding `(w_d·f_d + λ·w_i·f_i) / (w_d + λ·w_i)`. Everything here is a
//! pure function of the two layers; outputs never overwrite raw layers.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::dense::DenseLayer;
use crate::error::{Error, Result};
use crate::instance::{top_of, InstanceLayer, InstanceRecord};
use crate::types::VoxelKey;

/// Precision-weighted blend of one dense and one instance embedding.
pub fn fuse_voxel(f_d: &[f32], w_d: f64, f_i: &[f32], w_i: f64, lambda: f64) -> Result<Vec<f32>> {
    if f_d.len() != f_i.len() {
        return Err(Error::InvalidInput("embedding length mismatch".into()));
    }
    let a = w_d;
    let b = lambda * w_i;
    let total = a + b;
    if !(total > 0.0) {
        return Err(Error::UndefinedFusion);
    }
    if b == 0.0 {
        return Ok(f_d.to_vec());
    }
    if a == 0.0 {
        return Ok(f_i.to_vec());
    }
    Ok(f_d
        .iter()
        .zip(f_i)
        .map(|(&d, &i)| ((a * d as f64 + b * i as f64) / total) as f32)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedInstance {
    pub instance_id: u32,
    pub embedding: Vec<f32>,
    /// `Σ ρ_i` over contributing voxels; the candidate evidence score.
    pub total_precision: f64,
}

/// Spatial restriction of a fusion pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FusionScope {
    All,
    /// Closed ball around `center`. Instances qualify with at least one
    /// hypothesis voxel inside; `global_evidence` lets every hypothesis
    /// voxel contribute precision instead of only in-window ones.
    Window { center: [f64; 3], radius: f64, global_evidence: bool },
}

impl FusionScope {
    pub fn contains(&self, key: &VoxelKey, voxel_size: f64) -> bool {
        match *self {
            FusionScope::All => true,
            FusionScope::Window { center, radius, .. } => in_ball(key, voxel_size, center, radius),
        }
    }

    fn counts_evidence(&self, key: &VoxelKey, voxel_size: f64) -> bool {
        match *self {
            FusionScope::Window { global_evidence: true, .. } => true,
            _ => self.contains(key, voxel_size),
        }
    }

    /// Cheap rejection of instances whose key bounds miss the window.
    fn may_touch(&self, bounds: Option<(VoxelKey, VoxelKey)>, voxel_size: f64) -> bool {
        match (*self, bounds) {
            (_, None) => false,
            (FusionScope::All, _) => true,
            (FusionScope::Window { center, radius, .. }, Some((lo, hi))) => {
                if radius.is_infinite() {
                    return true;
                }
                let mut d2 = 0.0;
                let lo = [lo.ix, lo.iy, lo.iz];
                let hi = [hi.ix, hi.iy, hi.iz];
                for a in 0..3 {
                    let min_c = (lo[a] as f64 + 0.5) * voxel_size;
                    let max_c = (hi[a] as f64 + 0.5) * voxel_size;
                    let gap = (min_c - center[a]).max(center[a] - max_c).max(0.0);
                    d2 += gap * gap;
                }
                d2 <= radius * radius
            }
        }
    }
}

/// Closed-ball membership by voxel center.
pub fn in_ball(key: &VoxelKey, voxel_size: f64, center: [f64; 3], radius: f64) -> bool {
    if radius.is_infinite() {
        return true;
    }
    let c = key.center(voxel_size);
    let d2 = (c[0] - center[0]).powi(2) + (c[1] - center[1]).powi(2) + (c[2] - center[2]).powi(2);
    d2 <= radius * radius
}

fn any_hypothesis_in(rec: &InstanceRecord, scope: &FusionScope, voxel_size: f64) -> bool {
    match scope {
        FusionScope::All => !rec.voxels().is_empty(),
        _ => scope.may_touch(rec.bounds(), voxel_size) && rec.voxels().iter().any(|k| scope.contains(k, voxel_size)),
    }
}

/// Instance-level fusion via the closed-form blend.
///
/// Summing the per-voxel estimates weighted by `ρ_i = w_d,i + λ·w_i,id`
/// collapses to `(Σ w_d,i·f_d,i + λ·f_inst·Σ w_i,id) / Σ ρ_i`, which is
/// what this computes. Returns `None` when `Σ ρ_i = 0` or when the
/// instance has no hypothesis voxel in scope.
pub fn fuse_instance(
    instance: &InstanceRecord,
    instances: &InstanceLayer,
    dense: &DenseLayer,
    lambda: f64,
    scope: &FusionScope,
) -> Option<FusedInstance> {
    let vs = instances.voxel_size();
    if !any_hypothesis_in(instance, scope, vs) {
        return None;
    }
    let d = instance.embedding.len();
    let mut dense_sum = vec![0.0f64; d];
    let mut dense_w = 0.0;
    let mut inst_w = 0.0;
    for key in instance.voxels() {
        if !scope.counts_evidence(key, vs) {
            continue;
        }
        inst_w += instances.count_at(key, instance.id);
        if let Some(v) = dense.get(key) {
            if scope.contains(key, vs) {
                dense_w += v.weight;
                for (acc, &x) in dense_sum.iter_mut().zip(v.embedding) {
                    *acc += v.weight * x as f64;
                }
            }
        }
    }
    let inst_p = lambda * inst_w;
    let total = dense_w + inst_p;
    if !(total > 0.0) {
        return None;
    }
    let embedding = dense_sum
        .iter()
        .zip(&instance.embedding)
        .map(|(&s, &f)| ((s + inst_p * f as f64) / total) as f32)
        .collect();
    Some(FusedInstance { instance_id: instance.id, embedding, total_precision: total })
}

/// Two-stage form: fuse per voxel, then average with weights `ρ_i`.
///
/// Algebraically identical to [`fuse_instance`]; kept as an independent
/// route for cross-checking.
pub fn fuse_instance_two_stage(
    instance: &InstanceRecord,
    instances: &InstanceLayer,
    dense: &DenseLayer,
    lambda: f64,
    scope: &FusionScope,
) -> Option<FusedInstance> {
    let vs = instances.voxel_size();
    if !any_hypothesis_in(instance, scope, vs) {
        return None;
    }
    let d = instance.embedding.len();
    let mut acc = vec![0.0f64; d];
    let mut total = 0.0;
    for key in instance.voxels() {
        if !scope.counts_evidence(key, vs) {
            continue;
        }
        let w_i = instances.count_at(key, instance.id);
        let (f_d, w_d) = match dense.get(key).filter(|_| scope.contains(key, vs)) {
            Some(v) => (v.embedding, v.weight),
            None => (instance.embedding.as_slice(), 0.0),
        };
        let rho = w_d + lambda * w_i;
        if rho <= 0.0 {
            continue;
        }
        for c in 0..d {
            let local = (w_d * f_d[c] as f64 + lambda * w_i * instance.embedding[c] as f64) / rho;
            acc[c] += rho * local;
        }
        total += rho;
    }
    if !(total > 0.0) {
        return None;
    }
    Some(FusedInstance {
        instance_id: instance.id,
        embedding: acc.iter().map(|&a| (a / total) as f32).collect(),
        total_precision: total,
    })
}

/// Dense-voxel fusion with the highest-count hypothesis at that voxel.
///
/// Returns `None` when no dense voxel exists at `key`.
pub fn fuse_dense_voxel(
    key: &VoxelKey,
    dense: &DenseLayer,
    instances: &InstanceLayer,
    lambda: f64,
) -> Option<Vec<f32>> {
    let v = dense.get(key)?;
    match top_of(instances.hypotheses_at(key)) {
        Some(h) => {
            let rec = instances.instance(h.instance_id)?;
            fuse_voxel(v.embedding, v.weight, &rec.embedding, h.count, lambda).ok()
        }
        None => Some(v.embedding.to_vec()),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusionOutput {
    pub dense: BTreeMap<VoxelKey, Vec<f32>>,
    pub instances: BTreeMap<u32, FusedInstance>,
    /// Instances in scope whose total precision was zero.
    pub skipped_instances: Vec<u32>,
}

/// Fuses every in-scope dense voxel and instance. Pure and deterministic;
/// work is spread over the rayon pool.
pub fn fuse_all(dense: &DenseLayer, instances: &InstanceLayer, lambda: f64, scope: &FusionScope) -> FusionOutput {
    let vs = dense.voxel_size();
    let keys: Vec<VoxelKey> = dense.sorted_keys().into_iter().filter(|k| scope.contains(k, vs)).collect();
    let dense_out: BTreeMap<VoxelKey, Vec<f32>> = keys
        .par_iter()
        .filter_map(|k| fuse_dense_voxel(k, dense, instances, lambda).map(|f| (*k, f)))
        .collect();

    let results: Vec<(u32, Option<FusedInstance>)> = instances
        .instances()
        .par_iter()
        .filter(|rec| any_hypothesis_in(rec, scope, instances.voxel_size()))
        .map(|rec| (rec.id, fuse_instance(rec, instances, dense, lambda, scope)))
        .collect();
    let mut out = FusionOutput { dense: dense_out, ..Default::default() };
    for (id, r) in results {
        match r {
            Some(f) => {
                out.instances.insert(id, f);
            }
            None => out.skipped_instances.push(id),
        }
    }
    out
}
