//! Frame-by-frame mapping: keyframe gating, both layer pipelines, and the
//! sliding-window schedule.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::Serialize;

use crate::config::MapConfig;
use crate::dense::{DenseLayer, DensePoint};
use crate::error::{Error, Result};
use crate::frames::{backproject, derive_seed, filter_segments, sample_pixels, FrameRecord, KeyframeGate, WorldSample};
use crate::fusion::{fuse_all, FusionOutput, FusionScope};
use crate::instance::{build_proposal, Association, InstanceLayer};
use crate::query::MapView;
use crate::snapshot::MapSnapshot;
use crate::stream::StreamReader;
use crate::types::{CameraIntrinsics, VoxelKey};
use crate::window::{fuse_window_now, maybe_fuse_window, prune_outside, WindowState};

const DENSE_STREAM: u64 = 0;
const INSTANCE_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingMode {
    Global,
    SlidingWindow,
}

impl MappingMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::SlidingWindow => "sliding-window",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "global" => Some(Self::Global),
            "sliding-window" => Some(Self::SlidingWindow),
            _ => None,
        }
    }
}

/// One proposal's trip through association.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationEvent {
    pub frame_index: u64,
    pub segment: u32,
    pub voxels: BTreeMap<VoxelKey, u32>,
    pub crop_embedding: Vec<f32>,
    pub num_points: usize,
    pub decision: Association,
    pub instance_id: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameOutcome {
    pub dense_processed: bool,
    pub instance_processed: bool,
    pub dense_points: usize,
    pub proposals: usize,
    pub fused: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub mode: String,
    pub frames_total: u64,
    pub frames_dense: u64,
    pub frames_instance: u64,
    pub dense_points: u64,
    pub proposals: u64,
    pub dense_voxels: usize,
    pub instance_voxels: usize,
    pub instances: usize,
    pub fusion_passes: u64,
    pub gate_updates: u64,
    pub gate_rejections: u64,
    pub voxels_pruned: u64,
    /// Analytic semantic memory: keys, counts and embeddings of both layers.
    pub peak_semantic_bytes: usize,
    pub final_semantic_bytes: usize,
    /// Dense-layer share of the above.
    pub peak_dense_bytes: usize,
    pub final_dense_bytes: usize,
    /// Peak resident set size from the OS, informational only.
    pub peak_rss_bytes: Option<u64>,
}

/// Incremental dual-layer mapper.
#[derive(Clone, Debug)]
pub struct Mapper {
    config: MapConfig,
    intrinsics: CameraIntrinsics,
    mode: MappingMode,
    seed: u64,
    dense: DenseLayer,
    instances: InstanceLayer,
    window: WindowState,
    dense_gate: KeyframeGate,
    instance_gate: KeyframeGate,
    fused_dense: Option<BTreeMap<VoxelKey, Vec<f32>>>,
    report: RunReport,
    log: Option<Vec<AssociationEvent>>,
}

impl Mapper {
    pub fn new(config: MapConfig, intrinsics: CameraIntrinsics, mode: MappingMode, seed: u64) -> Result<Self> {
        config.validate()?;
        intrinsics.validate()?;
        let radius = match mode {
            MappingMode::Global => f64::INFINITY,
            MappingMode::SlidingWindow => config.window_radius,
        };
        Ok(Self {
            dense: DenseLayer::new(config.voxel_size, config.embedding_dim),
            instances: InstanceLayer::new(config.voxel_size, config.embedding_dim, config.max_hypotheses),
            window: WindowState::new(radius),
            dense_gate: KeyframeGate::new(config.dense_motion.translation, config.dense_motion.rotation),
            instance_gate: KeyframeGate::new(config.instance_motion.translation, config.instance_motion.rotation),
            fused_dense: None,
            report: RunReport { mode: mode.name().into(), ..Default::default() },
            log: None,
            config,
            intrinsics,
            mode,
            seed,
        })
    }

    /// Records every association decision for later replay.
    pub fn with_association_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn mode(&self) -> MappingMode {
        self.mode
    }

    pub fn dense(&self) -> &DenseLayer {
        &self.dense
    }

    pub fn instances(&self) -> &InstanceLayer {
        &self.instances
    }

    pub fn window(&self) -> &WindowState {
        &self.window
    }

    pub fn association_log(&self) -> Option<&[AssociationEvent]> {
        self.log.as_deref()
    }

    pub fn report(&self) -> &RunReport {
        &self.report
    }

    pub fn fused_dense(&self) -> Option<&BTreeMap<VoxelKey, Vec<f32>>> {
        self.fused_dense.as_ref()
    }

    pub fn view(&self) -> MapView<'_> {
        MapView { dense: &self.dense, instances: &self.instances, fused_dense: self.fused_dense.as_ref() }
    }

    /// Checks a stream's frame layout against the configuration.
    pub fn check_geometry(config: &MapConfig, dim: usize, patch_size: u32) -> Result<()> {
        if dim != config.embedding_dim {
            return Err(Error::Config(format!("stream embedding dimension {dim} differs from configured {}", config.embedding_dim)));
        }
        if patch_size != config.patch_size {
            return Err(Error::Config(format!("stream patch size {patch_size} differs from configured {}", config.patch_size)));
        }
        Ok(())
    }

    /// World points the dense pipeline draws from a frame, with the patch
    /// each one reads its embedding from.
    pub fn dense_samples(frame: &FrameRecord, config: &MapConfig, intrinsics: &CameraIntrinsics, seed: u64) -> Vec<WorldSample> {
        let seed = derive_seed(seed, &[frame.frame_index, DENSE_STREAM]);
        let samples = sample_pixels(frame, config.dense_pixels_per_patch, None, seed);
        backproject(&samples, &frame.depth, intrinsics, &frame.pose)
            .into_iter()
            .filter(|s| s.weight > 0.0)
            .collect()
    }

    pub fn process_frame(&mut self, frame: &FrameRecord) -> Result<FrameOutcome> {
        Self::check_geometry(&self.config, frame.geometry.dim, frame.geometry.patch_size)?;
        if frame.geometry.width != self.intrinsics.width || frame.geometry.height != self.intrinsics.height {
            return Err(Error::Config("frame size differs from camera intrinsics".into()));
        }
        frame.validate()?;
        let mut out = FrameOutcome::default();
        self.report.frames_total += 1;

        if self.dense_gate.should_process(&frame.pose) {
            out.dense_processed = true;
            let samples = Self::dense_samples(frame, &self.config, &self.intrinsics, self.seed);
            let points: Vec<DensePoint<'_>> = samples
                .iter()
                .map(|s| DensePoint { point: s.point, embedding: frame.patch_embedding(s.patch), weight: s.weight as f64 })
                .collect();
            out.dense_points = self.dense.integrate(&points)?.points_integrated;
            self.report.frames_dense += 1;
            self.report.dense_points += out.dense_points as u64;
        }

        if self.instance_gate.should_process(&frame.pose) {
            out.instance_processed = true;
            self.report.frames_instance += 1;
            let segments = filter_segments(
                &frame.segments,
                &frame.geometry,
                self.config.mask_min_area_frac,
                self.config.mask_border_contact_frac,
            );
            for (j, seg) in segments.iter().enumerate() {
                let seed = derive_seed(self.seed, &[frame.frame_index, INSTANCE_STREAM, j as u64]);
                let Some(proposal) = build_proposal(seg, frame, &self.intrinsics, &self.config, seed) else { continue };
                let (decision, id, _) = self.instances.integrate(&proposal, self.config.iou_threshold)?;
                out.proposals += 1;
                if let Some(log) = &mut self.log {
                    log.push(AssociationEvent {
                        frame_index: frame.frame_index,
                        segment: j as u32,
                        num_points: proposal.num_points(),
                        voxels: proposal.voxels,
                        crop_embedding: proposal.crop_embedding,
                        decision,
                        instance_id: id,
                    });
                }
            }
            self.report.proposals += out.proposals as u64;
        }

        if self.mode == MappingMode::SlidingWindow {
            self.window.center = frame.pose.position();
            if out.dense_processed {
                self.report.voxels_pruned += prune_outside(&mut self.dense, &self.window) as u64;
            }
            if out.dense_processed || out.instance_processed {
                if let Some(summary) = maybe_fuse_window(&mut self.window, &self.dense, &mut self.instances, &self.config) {
                    out.fused = true;
                    self.record_fusion(summary.instances_updated, summary.instances_rejected, summary.output);
                }
            }
        }
        self.track_memory();
        Ok(out)
    }

    fn record_fusion(&mut self, updated: usize, rejected: usize, output: FusionOutput) {
        self.report.fusion_passes += 1;
        self.report.gate_updates += updated as u64;
        self.report.gate_rejections += rejected as u64;
        self.fused_dense = Some(output.dense);
    }

    fn semantic_bytes(&self) -> usize {
        let fused = self.fused_dense.as_ref().map_or(0, |m| m.len() * (24 + 4 * self.config.embedding_dim));
        self.dense.semantic_bytes() + self.instances.semantic_bytes() + fused
    }

    fn track_memory(&mut self) {
        let b = self.semantic_bytes();
        self.report.peak_semantic_bytes = self.report.peak_semantic_bytes.max(b);
        self.report.final_semantic_bytes = b;
        let d = self.dense.semantic_bytes();
        self.report.peak_dense_bytes = self.report.peak_dense_bytes.max(d);
        self.report.final_dense_bytes = d;
        self.report.dense_voxels = self.dense.len();
        self.report.instance_voxels = self.instances.voxel_count();
        self.report.instances = self.instances.instance_count();
    }

    /// Ends a run. In sliding-window mode a last windowed fusion runs
    /// through the gate so frames since the previous pass are not lost.
    pub fn finish(&mut self) {
        if self.mode == MappingMode::SlidingWindow && self.report.frames_total > 0 {
            let s = fuse_window_now(&self.window, &self.dense, &mut self.instances, &self.config);
            self.window.frames_since_fusion = 0;
            self.record_fusion(s.instances_updated, s.instances_rejected, s.output);
        }
        self.track_memory();
        self.report.peak_rss_bytes = peak_rss_bytes();
    }

    /// Whole-map fusion on demand: stores every fused instance embedding and
    /// its evidence unconditionally, plus the fused dense map.
    pub fn fuse_global(&mut self) -> FusionOutput {
        let out = fuse_global(&self.dense, &mut self.instances, self.config.lambda);
        self.fused_dense = Some(out.dense.clone());
        self.report.fusion_passes += 1;
        self.track_memory();
        out
    }

    pub fn snapshot(&self) -> MapSnapshot {
        MapSnapshot {
            config: self.config.clone(),
            dense: self.dense.clone(),
            instances: self.instances.clone(),
            fused_dense: self.fused_dense.clone(),
        }
    }

    pub fn into_snapshot(self) -> MapSnapshot {
        MapSnapshot { config: self.config, dense: self.dense, instances: self.instances, fused_dense: self.fused_dense }
    }
}

/// Runs `fuse_all` over everything and writes the instance results back.
pub fn fuse_global(dense: &DenseLayer, instances: &mut InstanceLayer, lambda: f64) -> FusionOutput {
    let out = fuse_all(dense, instances, lambda, &FusionScope::All);
    for f in out.instances.values() {
        let rec = instances.instance_mut(f.instance_id).expect("fused instance exists");
        rec.fused = Some(f.embedding.clone());
        rec.evidence_score = f.total_precision;
    }
    out
}

/// Maps every frame of a stream.
pub fn map_stream<R: Read>(reader: R, config: MapConfig, mode: MappingMode, seed: u64) -> Result<Mapper> {
    let mut stream = StreamReader::new(reader)?;
    let h = *stream.header();
    Mapper::check_geometry(&config, h.geometry.dim, h.geometry.patch_size)?;
    let mut mapper = Mapper::new(config, h.intrinsics, mode, seed)?;
    while let Some(frame) = stream.next_frame()? {
        mapper.process_frame(&frame)?;
    }
    mapper.finish();
    Ok(mapper)
}

/// Maps a stream file into a snapshot plus run report.
pub fn run_mapping(path: &Path, config: MapConfig, mode: MappingMode, seed: u64) -> Result<(MapSnapshot, RunReport)> {
    let mapper = map_stream(BufReader::new(File::open(path)?), config, mode, seed)?;
    let report = mapper.report().clone();
    Ok((mapper.into_snapshot(), report))
}

/// `VmHWM` from `/proc/self/status`, where available.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}
