//! Instance layer: multi-hypothesis voxels plus one embedding per instance.
//!
//! Every voxel carries at most `K` `(instance id, count)` hypotheses. The
//! voxel map doubles as an inverted index, so association only inspects
//! voxels of the incoming proposal.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use smallvec::SmallVec;

use crate::config::MapConfig;
use crate::error::{Error, Result};
use crate::frames::{backproject, sample_pixels, FrameRecord, SegmentProposal};
use crate::types::{voxel_of, CameraIntrinsics, VoxelKey};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hypothesis {
    pub instance_id: u32,
    pub count: f64,
}

pub type Hypotheses = SmallVec<[Hypothesis; 4]>;

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub id: u32,
    pub embedding: Vec<f32>,
    pub weight: f64,
    pub fused: Option<Vec<f32>>,
    pub evidence_score: f64,
    voxels: BTreeSet<VoxelKey>,
    bounds: Option<(VoxelKey, VoxelKey)>,
}

impl InstanceRecord {
    fn new(id: u32, embedding: Vec<f32>, weight: f64) -> Self {
        Self { id, embedding, weight, fused: None, evidence_score: 0.0, voxels: BTreeSet::new(), bounds: None }
    }

    /// Voxels currently holding a hypothesis for this instance, sorted.
    pub fn voxels(&self) -> &BTreeSet<VoxelKey> {
        &self.voxels
    }

    /// Conservative key-space bounding box of every voxel ever attached.
    pub fn bounds(&self) -> Option<(VoxelKey, VoxelKey)> {
        self.bounds
    }

    /// Fused embedding when available, raw otherwise.
    pub fn best_embedding(&self) -> &[f32] {
        self.fused.as_deref().unwrap_or(&self.embedding)
    }

    fn attach(&mut self, key: VoxelKey) {
        self.voxels.insert(key);
        self.bounds = Some(match self.bounds {
            None => (key, key),
            Some((lo, hi)) => (
                VoxelKey::new(lo.ix.min(key.ix), lo.iy.min(key.iy), lo.iz.min(key.iz)),
                VoxelKey::new(hi.ix.max(key.ix), hi.iy.max(key.iy), hi.iz.max(key.iz)),
            ),
        });
    }
}

/// A back-projected mask: its points, voxel footprint and crop embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceProposal {
    pub points: Vec<[f64; 3]>,
    pub crop_embedding: Vec<f32>,
    /// Voxel footprint with the number of points per voxel.
    pub voxels: BTreeMap<VoxelKey, u32>,
}

impl InstanceProposal {
    pub fn from_points(points: Vec<[f64; 3]>, crop_embedding: Vec<f32>, voxel_size: f64) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let mut voxels = BTreeMap::new();
        for p in &points {
            *voxels.entry(voxel_of(*p, voxel_size)).or_insert(0u32) += 1;
        }
        Some(Self { points, crop_embedding, voxels })
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }
}

/// Samples pixels inside the segment mask and lifts them into a proposal.
pub fn build_proposal(
    segment: &SegmentProposal,
    frame: &FrameRecord,
    intrinsics: &CameraIntrinsics,
    config: &MapConfig,
    seed: u64,
) -> Option<InstanceProposal> {
    let samples = sample_pixels(frame, config.instance_pixels_per_patch, Some(&segment.mask), seed);
    let points: Vec<[f64; 3]> = backproject(&samples, &frame.depth, intrinsics, &frame.pose)
        .into_iter()
        .map(|s| s.point)
        .collect();
    InstanceProposal::from_points(points, segment.crop_embedding.clone(), config.voxel_size)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Association {
    Match { instance_id: u32, iou: f64 },
    /// Best candidate below threshold, if any instance overlapped at all.
    NoMatch { best: Option<(u32, f64)> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InstanceUpdate {
    pub voxels_updated: usize,
    pub hypotheses_inserted: usize,
    pub hypotheses_evicted: usize,
    /// Incoming hypotheses that lost the eviction contest themselves.
    pub hypotheses_rejected: usize,
}

/// Outcome of inserting evidence into one voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
enum VoxelOutcome {
    Incremented,
    Inserted,
    Evicted(Hypothesis),
    Rejected,
}

#[derive(Clone, Debug)]
pub struct InstanceLayer {
    voxel_size: f64,
    dim: usize,
    max_hypotheses: usize,
    voxels: HashMap<VoxelKey, Hypotheses>,
    instances: Vec<InstanceRecord>,
}

impl InstanceLayer {
    pub fn new(voxel_size: f64, dim: usize, max_hypotheses: usize) -> Self {
        Self { voxel_size, dim, max_hypotheses, voxels: HashMap::new(), instances: Vec::new() }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_hypotheses(&self) -> usize {
        self.max_hypotheses
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    pub fn instance(&self, id: u32) -> Option<&InstanceRecord> {
        self.instances.get(id as usize)
    }

    pub fn instance_mut(&mut self, id: u32) -> Option<&mut InstanceRecord> {
        self.instances.get_mut(id as usize)
    }

    /// Instances in id order.
    pub fn instances(&self) -> &[InstanceRecord] {
        &self.instances
    }

    pub fn hypotheses_at(&self, key: &VoxelKey) -> &[Hypothesis] {
        self.voxels.get(key).map_or(&[], |h| h.as_slice())
    }

    /// Hypothesis with the highest count; ties go to the lower id.
    pub fn top_hypothesis(&self, key: &VoxelKey) -> Option<Hypothesis> {
        top_of(self.hypotheses_at(key))
    }

    pub fn count_at(&self, key: &VoxelKey, instance_id: u32) -> f64 {
        self.hypotheses_at(key)
            .iter()
            .find(|h| h.instance_id == instance_id)
            .map_or(0.0, |h| h.count)
    }

    pub fn iter_voxels(&self) -> impl Iterator<Item = (&VoxelKey, &Hypotheses)> {
        self.voxels.iter()
    }

    pub fn sorted_voxel_keys(&self) -> Vec<VoxelKey> {
        let mut k: Vec<_> = self.voxels.keys().copied().collect();
        k.sort_unstable();
        k
    }

    fn check_proposal(&self, proposal: &InstanceProposal) -> Result<()> {
        if proposal.voxels.is_empty() {
            return Err(Error::InvalidInput("empty instance proposal".into()));
        }
        if proposal.crop_embedding.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "crop embedding length {} != {}",
                proposal.crop_embedding.len(),
                self.dim
            )));
        }
        if proposal.crop_embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite crop embedding".into()));
        }
        Ok(())
    }

    /// Voxel IoU against the most-overlapping instance.
    ///
    /// Ties in IoU go to the lower instance id. The threshold is closed:
    /// `IoU ≥ τ` matches.
    pub fn associate(&self, proposal: &InstanceProposal, iou_threshold: f64) -> Association {
        let mut overlap: HashMap<u32, u64> = HashMap::new();
        for key in proposal.voxels.keys() {
            for h in self.hypotheses_at(key) {
                *overlap.entry(h.instance_id).or_default() += 1;
            }
        }
        let m = proposal.voxels.len() as u64;
        let mut best: Option<(u32, u64, u64)> = None;
        for (&id, &inter) in &overlap {
            let union = m + self.instances[id as usize].voxels.len() as u64 - inter;
            let better = match best {
                None => true,
                // inter/union > b_inter/b_union, exact in integers
                Some((b_id, b_inter, b_union)) => {
                    let lhs = inter as u128 * b_union as u128;
                    let rhs = b_inter as u128 * union as u128;
                    lhs > rhs || (lhs == rhs && id < b_id)
                }
            };
            if better {
                best = Some((id, inter, union));
            }
        }
        match best {
            Some((id, inter, union)) => {
                let iou = inter as f64 / union as f64;
                if iou >= iou_threshold {
                    Association::Match { instance_id: id, iou }
                } else {
                    Association::NoMatch { best: Some((id, iou)) }
                }
            }
            None => Association::NoMatch { best: None },
        }
    }

    /// Adds the proposal's evidence to an existing instance.
    pub fn apply_match(&mut self, proposal: &InstanceProposal, instance_id: u32) -> Result<InstanceUpdate> {
        self.check_proposal(proposal)?;
        let rec = self
            .instances
            .get_mut(instance_id as usize)
            .ok_or_else(|| Error::InvalidInput(format!("unknown instance {instance_id}")))?;
        let n_p = proposal.num_points() as f64;
        let w_old = rec.weight;
        let w_new = w_old + n_p;
        for (f, &p) in rec.embedding.iter_mut().zip(&proposal.crop_embedding) {
            *f = ((w_old * *f as f64 + n_p * p as f64) / w_new) as f32;
        }
        rec.weight = w_new;
        Ok(self.add_evidence(proposal, instance_id))
    }

    /// Starts a new instance from an unmatched proposal.
    pub fn create_instance(&mut self, proposal: &InstanceProposal) -> Result<(u32, InstanceUpdate)> {
        self.check_proposal(proposal)?;
        let id = u32::try_from(self.instances.len())
            .map_err(|_| Error::InvalidInput("instance id space exhausted".into()))?;
        self.instances.push(InstanceRecord::new(
            id,
            proposal.crop_embedding.clone(),
            proposal.num_points() as f64,
        ));
        Ok((id, self.add_evidence(proposal, id)))
    }

    /// Associates, then either updates the matched instance or creates one.
    pub fn integrate(
        &mut self,
        proposal: &InstanceProposal,
        iou_threshold: f64,
    ) -> Result<(Association, u32, InstanceUpdate)> {
        self.check_proposal(proposal)?;
        let assoc = self.associate(proposal, iou_threshold);
        let (id, update) = match assoc {
            Association::Match { instance_id, .. } => (instance_id, self.apply_match(proposal, instance_id)?),
            Association::NoMatch { .. } => self.create_instance(proposal)?,
        };
        Ok((assoc, id, update))
    }

    fn add_evidence(&mut self, proposal: &InstanceProposal, id: u32) -> InstanceUpdate {
        let mut up = InstanceUpdate::default();
        for (&key, &n) in &proposal.voxels {
            up.voxels_updated += 1;
            match self.add_hypothesis(key, id, n as f64) {
                VoxelOutcome::Incremented => {}
                VoxelOutcome::Inserted => up.hypotheses_inserted += 1,
                VoxelOutcome::Evicted(_) => {
                    up.hypotheses_inserted += 1;
                    up.hypotheses_evicted += 1;
                }
                VoxelOutcome::Rejected => up.hypotheses_rejected += 1,
            }
        }
        up
    }

    fn add_hypothesis(&mut self, key: VoxelKey, id: u32, n: f64) -> VoxelOutcome {
        let k = self.max_hypotheses;
        let hyps = self.voxels.entry(key).or_default();
        if let Some(h) = hyps.iter_mut().find(|h| h.instance_id == id) {
            h.count += n;
            return VoxelOutcome::Incremented;
        }
        let incoming = Hypothesis { instance_id: id, count: n };
        if hyps.len() < k {
            hyps.push(incoming);
            self.instances[id as usize].attach(key);
            return VoxelOutcome::Inserted;
        }
        // Full: the lowest count leaves; ties evict the larger id.
        let (slot, weakest) = hyps
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| evict_order(&a.1, &b.1))
            .expect("voxel at capacity has hypotheses");
        if evict_order(&incoming, &weakest).is_le() {
            return VoxelOutcome::Rejected;
        }
        hyps[slot] = incoming;
        self.instances[weakest.instance_id as usize].voxels.remove(&key);
        self.instances[id as usize].attach(key);
        VoxelOutcome::Evicted(weakest)
    }

    /// Rebuilds a layer from serialized parts; voxel sets are derived.
    pub fn restore(
        voxel_size: f64,
        dim: usize,
        max_hypotheses: usize,
        voxels: Vec<(VoxelKey, Vec<Hypothesis>)>,
        records: Vec<RestoredInstance>,
    ) -> Result<Self> {
        let mut layer = Self::new(voxel_size, dim, max_hypotheses);
        for (i, r) in records.into_iter().enumerate() {
            if r.id as usize != i {
                return Err(Error::InvalidInput("instance ids must be dense and sorted".into()));
            }
            let mut rec = InstanceRecord::new(r.id, r.embedding, r.weight);
            rec.fused = r.fused;
            rec.evidence_score = r.evidence_score;
            layer.instances.push(rec);
        }
        for (key, hyps) in voxels {
            if hyps.len() > max_hypotheses {
                return Err(Error::InvalidInput(format!("voxel {key} exceeds hypothesis cap")));
            }
            for h in &hyps {
                let rec = layer
                    .instances
                    .get_mut(h.instance_id as usize)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown instance {}", h.instance_id)))?;
                rec.attach(key);
            }
            layer.voxels.insert(key, hyps.into_iter().collect());
        }
        Ok(layer)
    }

    /// Semantic bytes: voxel keys with hypotheses, plus per-instance
    /// raw and fused embeddings.
    pub fn semantic_bytes(&self) -> usize {
        let key = 3 * std::mem::size_of::<i64>();
        let hyp = std::mem::size_of::<u32>() + std::mem::size_of::<f64>();
        let voxels: usize = self.voxels.values().map(|h| key + h.len() * hyp).sum();
        let per_inst = 4 + 8 + 8 + 4 * self.dim;
        let insts: usize = self
            .instances
            .iter()
            .map(|r| per_inst + r.fused.as_ref().map_or(0, |f| 4 * f.len()))
            .sum();
        voxels + insts
    }
}

/// Serialized form of an instance record.
#[derive(Clone, Debug, PartialEq)]
pub struct RestoredInstance {
    pub id: u32,
    pub embedding: Vec<f32>,
    pub weight: f64,
    pub fused: Option<Vec<f32>>,
    pub evidence_score: f64,
}

/// Ordering where `Less` means "evicted first": lower count, then larger id.
fn evict_order(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    a.count.total_cmp(&b.count).then(b.instance_id.cmp(&a.instance_id))
}

pub(crate) fn top_of(hyps: &[Hypothesis]) -> Option<Hypothesis> {
    hyps.iter().copied().max_by(|a, b| a.count.total_cmp(&b.count).then(b.instance_id.cmp(&a.instance_id)))
}
