//! Egocentric sliding window over the dense layer.

use crate::config::{EvidenceScope, MapConfig};
use crate::dense::DenseLayer;
use crate::fusion::{fuse_all, in_ball, FusedInstance, FusionOutput, FusionScope};
use crate::instance::{InstanceLayer, InstanceRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct WindowState {
    pub center: [f64; 3],
    pub radius: f64,
    pub frames_since_fusion: u32,
}

impl WindowState {
    pub fn new(radius: f64) -> Self {
        Self { center: [0.0; 3], radius, frames_since_fusion: 0 }
    }

    pub fn scope(&self, evidence: EvidenceScope) -> FusionScope {
        FusionScope::Window {
            center: self.center,
            radius: self.radius,
            global_evidence: evidence == EvidenceScope::Global,
        }
    }
}

/// Removes dense voxels whose center lies farther than the radius from the
/// window center. The ball is closed.
pub fn prune_outside(dense: &mut DenseLayer, window: &WindowState) -> usize {
    if window.radius.is_infinite() {
        return 0;
    }
    let vs = dense.voxel_size();
    dense.retain(|k| in_ball(k, vs, window.center, window.radius))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateDecision {
    Updated,
    Rejected,
}

/// Accepts a fused candidate only when its evidence strictly exceeds the
/// stored score.
pub fn evidence_gate(instance: &mut InstanceRecord, candidate: &FusedInstance) -> GateDecision {
    if candidate.total_precision > instance.evidence_score {
        instance.fused = Some(candidate.embedding.clone());
        instance.evidence_score = candidate.total_precision;
        GateDecision::Updated
    } else {
        GateDecision::Rejected
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowFusionSummary {
    pub output: FusionOutput,
    pub instances_updated: usize,
    pub instances_rejected: usize,
}

/// Counts one processed frame; fuses inside the window once the period is
/// reached, then resets the counter.
pub fn maybe_fuse_window(
    window: &mut WindowState,
    dense: &DenseLayer,
    instances: &mut InstanceLayer,
    config: &MapConfig,
) -> Option<WindowFusionSummary> {
    window.frames_since_fusion += 1;
    if window.frames_since_fusion < config.fusion_period {
        return None;
    }
    window.frames_since_fusion = 0;
    Some(fuse_window_now(window, dense, instances, config))
}

/// Unconditional windowed fusion pass followed by the evidence gate (or a
/// plain overwrite when gating is disabled).
pub fn fuse_window_now(
    window: &WindowState,
    dense: &DenseLayer,
    instances: &mut InstanceLayer,
    config: &MapConfig,
) -> WindowFusionSummary {
    let output = fuse_all(dense, instances, config.lambda, &window.scope(config.evidence_scope));
    let mut summary = WindowFusionSummary::default();
    for cand in output.instances.values() {
        let rec = instances.instance_mut(cand.instance_id).expect("fused instance exists");
        let decision = if config.evidence_gating {
            evidence_gate(rec, cand)
        } else {
            rec.fused = Some(cand.embedding.clone());
            rec.evidence_score = cand.total_precision;
            GateDecision::Updated
        };
        match decision {
            GateDecision::Updated => summary.instances_updated += 1,
            GateDecision::Rejected => summary.instances_rejected += 1,
        }
    }
    summary.output = output;
    summary
}
