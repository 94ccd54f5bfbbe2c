//! Corridor memory sweep: analytic semantic bytes per mode and length.

use serde::Serialize;

use crate::config::MapConfig;
use crate::error::Result;
use crate::pipeline::{Mapper, MappingMode};
use crate::synth::{default_intrinsics, generate_frames, scenes, NoiseModel, Synthesizer};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryRun {
    pub length_m: f64,
    pub mode: String,
    pub frames: u64,
    pub peak_dense_bytes: usize,
    pub final_dense_bytes: usize,
    pub peak_semantic_bytes: usize,
    pub final_semantic_bytes: usize,
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemorySweep {
    pub window_radius: f64,
    pub runs: Vec<MemoryRun>,
}

impl MemorySweep {
    pub fn runs_for(&self, mode: MappingMode) -> impl Iterator<Item = &MemoryRun> {
        self.runs.iter().filter(move |r| r.mode == mode.name())
    }
}

/// Generates one corridor per length and maps it in both modes.
///
/// The stream dimension and patch size follow `config`.
pub fn corridor_sweep(lengths: &[f64], objects_per_meter: f64, config: &MapConfig, seed: u64) -> Result<MemorySweep> {
    config.validate()?;
    let mut runs = Vec::new();
    for &length in lengths {
        let (scene, traj) = scenes::corridor(length, objects_per_meter, config.embedding_dim, seed)?;
        let synth = Synthesizer {
            scene: &scene,
            intrinsics: default_intrinsics(),
            patch_size: config.patch_size,
            noise: NoiseModel::default_profile(),
            seed,
        };
        let (frames, _) = generate_frames(&synth, &traj, config.voxel_size)?;
        for mode in [MappingMode::Global, MappingMode::SlidingWindow] {
            let mut m = Mapper::new(config.clone(), synth.intrinsics, mode, seed)?;
            for f in &frames {
                m.process_frame(f)?;
            }
            m.finish();
            let r = m.report();
            runs.push(MemoryRun {
                length_m: length,
                mode: mode.name().into(),
                frames: r.frames_total,
                peak_dense_bytes: r.peak_dense_bytes,
                final_dense_bytes: r.final_dense_bytes,
                peak_semantic_bytes: r.peak_semantic_bytes,
                final_semantic_bytes: r.final_semantic_bytes,
                instances: r.instances,
            });
        }
    }
    Ok(MemorySweep { window_radius: config.window_radius, runs })
}
