mod common;

use common::*;
use fus3d_core::synth::scenes::{self, OrbitOptions};
use fus3d_core::synth::{default_intrinsics, NoiseModel};
use fus3d_core::{
    evaluate, predict_classes, similarity_map, LayerSelection, MapConfig, MapSnapshot, Mapper, MappingMode,
};

#[test]
fn noiseless_separated_objects_are_labeled_perfectly() {
    for seed in [0u64, 3] {
        let case = orbit(seed, NoiseModel::none(), OrbitOptions { separated: true, ..OrbitOptions::default() });
        let m = run(&case, MapConfig::default(), MappingMode::Global, seed);
        let pred = predict_classes(&m.view(), LayerSelection::Instance, &case.out.prompts).unwrap();
        // the instance layer is sparse by design: score the voxels it covers
        let gt = case.out.gt.restricted_to(&pred);
        let r = evaluate(&pred, &gt, &case.out.prompts, true).unwrap();
        assert_eq!(r.miou, 1.0, "seed {seed}: {:?}", r.per_class_iou);
        assert_eq!(r.acc, 1.0);
    }
}

#[test]
fn class_prompt_ranks_its_voxels_first() {
    let case = orbit(2, NoiseModel::none(), OrbitOptions { separated: true, ..OrbitOptions::default() });
    let m = run(&case, MapConfig::default(), MappingMode::Global, 2);
    let prompts = &case.out.prompts;
    let chair = prompts.index_of("chair").unwrap();
    for layer in [LayerSelection::Instance, LayerSelection::InstanceFused] {
        let sims = similarity_map(&m.view(), layer, &prompts.embeddings[chair]).unwrap();
        let pred = predict_classes(&m.view(), layer, prompts).unwrap();
        let (mut lo_in, mut hi_out) = (f32::INFINITY, f32::NEG_INFINITY);
        for (k, s) in &sims {
            match case.out.gt.labels.get(k) {
                Some(&c) if c as usize == chair && pred[k] as usize == chair => lo_in = lo_in.min(*s),
                Some(&c) if c as usize != chair && pred[k] == c => hi_out = hi_out.max(*s),
                _ => {}
            }
        }
        if lo_in.is_finite() {
            assert!(lo_in > hi_out, "{}: {lo_in} <= {hi_out}", layer.name());
        }
    }
}

#[test]
fn report_counts_match_snapshot_contents() {
    let case = orbit(4, NoiseModel::default_profile(), OrbitOptions { frames: 60, ..OrbitOptions::default() });
    for mode in [MappingMode::Global, MappingMode::SlidingWindow] {
        let m = run(&case, MapConfig { window_radius: 2.0, ..MapConfig::default() }, mode, 4);
        let r = m.report().clone();
        let snap = MapSnapshot::read(m.snapshot().to_bytes().as_slice()).unwrap();
        assert_eq!(r.dense_voxels, snap.dense.len());
        assert_eq!(r.instance_voxels, snap.instances.voxel_count());
        assert_eq!(r.instances, snap.instances.instance_count());
        assert_eq!(r.frames_total, case.frames.len() as u64);
        assert!(r.frames_dense > 0 && r.frames_instance > 0);
        assert!(r.peak_semantic_bytes >= r.final_semantic_bytes);
        assert!(r.peak_dense_bytes >= r.final_dense_bytes);
    }
}

#[test]
fn sliding_window_session_invariants() {
    let (scene, traj) = scenes::corridor(12.0, 1.0, 64, 9).unwrap();
    let case = generate(&scene, &traj, default_intrinsics(), NoiseModel::default_profile(), 9);
    let cfg = MapConfig { window_radius: 3.0, ..MapConfig::default() };
    let mut w = Mapper::new(cfg.clone(), case.intrinsics, MappingMode::SlidingWindow, 9).unwrap();
    let mut g = Mapper::new(cfg.clone(), case.intrinsics, MappingMode::Global, 9).unwrap();
    let bound = 4.0 / 3.0 * std::f64::consts::PI * (cfg.window_radius + cfg.voxel_size * 3f64.sqrt()).powi(3)
        / cfg.voxel_size.powi(3);
    let mut evidence: Vec<f64> = Vec::new();
    let mut pruned_any = false;
    for f in &case.frames {
        let out = w.process_frame(f).unwrap();
        g.process_frame(f).unwrap();
        if out.dense_processed {
            let center = f.pose.position();
            assert_eq!(w.window().center, center);
            for (k, _) in w.dense().iter() {
                let c = k.center(cfg.voxel_size);
                let d2: f64 = (0..3).map(|a| (c[a] - center[a]).powi(2)).sum();
                assert!(d2 <= cfg.window_radius.powi(2));
            }
            assert!((w.dense().len() as f64) <= bound);
        }
        let now: Vec<f64> = w.instances().instances().iter().map(|r| r.evidence_score).collect();
        for (a, b) in evidence.iter().zip(&now) {
            assert!(b >= a, "evidence decreased");
        }
        evidence = now;
        pruned_any |= w.report().voxels_pruned > 0;
    }
    assert!(pruned_any);
    assert!(w.dense().len() < g.dense().len());
    // pruning never touches the instance layer's raw state
    let (wi, gi) = (w.instances().instances(), g.instances().instances());
    assert_eq!(wi.len(), gi.len());
    for (a, b) in wi.iter().zip(gi) {
        assert_eq!((a.id, &a.embedding, a.weight, a.voxels()), (b.id, &b.embedding, b.weight, b.voxels()));
    }
}

#[test]
fn noiseless_single_box_is_one_instance() {
    let (scene, traj) = scenes::single_box(16, 0).unwrap();
    let case = generate(&scene, &traj, default_intrinsics(), NoiseModel::none(), 0);
    let cfg = MapConfig { embedding_dim: 16, ..MapConfig::default() };
    for mode in [MappingMode::Global, MappingMode::SlidingWindow] {
        let m = run(&case, cfg.clone(), mode, 0);
        assert_eq!(m.instances().instance_count(), 1);
    }
}
