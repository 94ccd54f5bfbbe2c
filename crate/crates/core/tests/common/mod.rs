#![allow(dead_code)]

use std::collections::BTreeMap;

use fus3d_core::synth::scenes::{self, OrbitOptions};
use fus3d_core::synth::{default_intrinsics, generate_frames, NoiseModel, SynthOutput, SynthScene, Synthesizer};
use fus3d_core::{
    evaluate, predict_classes, CameraIntrinsics, FrameRecord, GroundTruthVolume, LayerSelection, MapConfig, Mapper,
    MappingMode, Pose, PromptSet, VoxelKey,
};

pub const VOXEL: f64 = 0.05;

pub struct Case {
    pub frames: Vec<FrameRecord>,
    pub out: SynthOutput,
    pub intrinsics: CameraIntrinsics,
}

pub fn generate(scene: &SynthScene, traj: &[Pose], intrinsics: CameraIntrinsics, noise: NoiseModel, seed: u64) -> Case {
    let synth = Synthesizer { scene, intrinsics, patch_size: 16, noise, seed };
    let (frames, out) = generate_frames(&synth, traj, VOXEL).expect("generation succeeds");
    Case { frames, out, intrinsics }
}

pub fn orbit(seed: u64, noise: NoiseModel, opts: OrbitOptions) -> Case {
    let (scene, traj) = scenes::orbit_room(64, seed, opts).expect("orbit scene");
    generate(&scene, &traj, default_intrinsics(), noise, seed)
}

pub fn apartment(seed: u64, noise: NoiseModel) -> Case {
    let (scene, traj) = scenes::apartment(64, seed).expect("apartment scene");
    generate(&scene, &traj, default_intrinsics(), noise, seed)
}

pub fn run(case: &Case, config: MapConfig, mode: MappingMode, seed: u64) -> Mapper {
    let mut m = Mapper::new(config, case.intrinsics, mode, seed).expect("valid mapper");
    for f in &case.frames {
        m.process_frame(f).expect("frame maps");
    }
    m.finish();
    m
}

pub fn miou(m: &Mapper, out: &SynthOutput, layer: LayerSelection, exclude_background: bool) -> f64 {
    let pred = predict_classes(&m.view(), layer, &out.prompts).expect("prediction");
    evaluate(&pred, &out.gt, &out.prompts, exclude_background).expect("evaluation").miou
}

pub struct BruteMetrics {
    pub miou: f64,
    pub fmiou: f64,
    pub acc: f64,
}

/// Straight-from-the-definition metrics: one pass over the domain per class.
pub fn brute_force_metrics(
    pred: &BTreeMap<VoxelKey, u16>,
    gt: &GroundTruthVolume,
    prompts: &PromptSet,
    exclude_background: bool,
) -> Option<BruteMetrics> {
    let in_domain = |c: u16| !(exclude_background && prompts.background[c as usize]);
    let domain: Vec<(&VoxelKey, u16)> = gt.labels.iter().filter(|(_, &c)| in_domain(c)).map(|(k, &c)| (k, c)).collect();
    if domain.is_empty() {
        return None;
    }
    let (mut ious, mut weights, mut recalls) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..prompts.len() as u16 {
        let support = domain.iter().filter(|(_, g)| *g == c).count();
        if support == 0 || !in_domain(c) {
            continue;
        }
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for (k, g) in &domain {
            let p = pred.get(k).copied();
            match (*g == c, p == Some(c)) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        ious.push(tp as f64 / (tp + fp + fn_) as f64);
        weights.push(support as f64);
        recalls.push(tp as f64 / support as f64);
    }
    let n = ious.len() as f64;
    let total: f64 = weights.iter().sum();
    Some(BruteMetrics {
        miou: ious.iter().sum::<f64>() / n,
        fmiou: ious.iter().zip(&weights).map(|(i, w)| i * w).sum::<f64>() / total,
        acc: recalls.iter().sum::<f64>() / n,
    })
}

pub fn rel_err(a: &[f32], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}
