mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use common::brute_force_metrics;
use fus3d_core::dense::DensePoint;
use fus3d_core::frames::{backproject, sample_pixels, PixelSample};
use fus3d_core::fusion::{fuse_voxel, FusedInstance};
use fus3d_core::instance::{Association, InstanceProposal};
use fus3d_core::pipeline::fuse_global;
use fus3d_core::stream::{StreamHeader, StreamReader, StreamWriter};
use fus3d_core::window::{evidence_gate, prune_outside, WindowState};
use fus3d_core::{
    evaluate, fuse_all, predict_classes, CameraIntrinsics, DenseLayer, FrameGeometry, FrameRecord, FusionScope,
    GroundTruthVolume, InstanceLayer, LayerSelection, Mask, MapConfig, MapSnapshot, MapView, Pose, PromptSet,
    SegmentProposal, VoxelKey,
};

const VS: f64 = 0.05;

fn arb_pose() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-1.0f64..1.0), 0.0f64..3.1, prop::array::uniform3(-5.0f64..5.0)).prop_map(|(axis, angle, t)| {
        let axis = if axis.iter().all(|a| a.abs() < 1e-3) { [0.0, 0.0, 1.0] } else { axis };
        Pose::from_axis_angle(axis, angle, t)
    })
}

/// Random points clustered on a small voxel block, as (points, crop).
fn arb_proposal(dim: usize) -> impl Strategy<Value = InstanceProposal> {
    (
        prop::array::uniform3(0i64..6),
        prop::collection::vec(prop::array::uniform3(0.0f64..0.2), 1..40),
        prop::collection::vec(-1.0f32..1.0, dim),
    )
        .prop_map(|(c, offs, crop)| {
            let pts = offs
                .into_iter()
                .map(|o| [c[0] as f64 * VS + o[0], c[1] as f64 * VS + o[1], c[2] as f64 * VS + o[2]])
                .collect();
            InstanceProposal::from_points(pts, crop, VS).unwrap()
        })
}

fn small_frame(dim: usize, seed: u64, invalid_every: usize, pose: Pose) -> FrameRecord {
    let g = FrameGeometry { width: 40, height: 30, patch_size: 8, dim };
    let depth = (0..g.pixel_count())
        .map(|i| if invalid_every > 0 && i % invalid_every == 0 { 0.0 } else { 0.5 + ((i as u64 * 7 + seed) % 13) as f32 * 0.1 })
        .collect();
    let patches = (0..g.patch_count() * dim).map(|i| (((i as u64 + seed) % 17) as f32 - 8.0) / 8.0).collect();
    let mask = Mask::from_fn(40, 30, |u, v| !(u + v + seed as u32).is_multiple_of(3) && u > 3 && v > 2);
    FrameRecord {
        frame_index: seed,
        geometry: g,
        pose,
        depth,
        patches,
        patch_weights: Some((0..g.patch_count()).map(|i| 0.1 + (i % 9) as f32 * 0.1).collect()),
        segments: vec![SegmentProposal::new(mask, vec![0.25; dim])],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weighted_means_stay_finite(
        embs in prop::collection::vec(prop::collection::vec(-1e30f32..1e30, 4), 1..30),
        weights in prop::collection::vec(1e-6f64..1e6, 30),
    ) {
        let mut layer = DenseLayer::new(VS, 4);
        let pts: Vec<DensePoint<'_>> = embs
            .iter()
            .zip(&weights)
            .map(|(e, &w)| DensePoint { point: [0.01, 0.01, 0.01], embedding: e, weight: w })
            .collect();
        layer.integrate(&pts).unwrap();
        let v = layer.get(&VoxelKey::new(0, 0, 0)).unwrap();
        prop_assert!(v.embedding.iter().all(|x| x.is_finite()));
        prop_assert!(v.weight.is_finite() && v.weight > 0.0);
    }

    #[test]
    fn sampling_is_a_function_of_its_inputs(seed in any::<u64>(), ppp in 1usize..12, masked in any::<bool>(), invalid in 0usize..7) {
        let f = small_frame(3, 5, invalid, Pose::identity());
        let mask = masked.then(|| f.segments[0].mask.clone());
        let a = sample_pixels(&f, ppp, mask.as_ref(), seed);
        let b = sample_pixels(&f.clone(), ppp, mask.as_ref(), seed);
        prop_assert_eq!(&a, &b);
        for s in &a {
            prop_assert!(f.has_depth(s.u, s.v));
            prop_assert!(mask.as_ref().is_none_or(|m| m.get(s.u, s.v)));
        }
    }

    #[test]
    fn backprojection_reprojects(
        pose in arb_pose(),
        fx in 50.0f32..600.0,
        fy in 50.0f32..600.0,
        u in 0u32..320,
        v in 0u32..240,
        z in 0.1f32..20.0,
    ) {
        let k = CameraIntrinsics::new(fx, fy, 159.5, 119.5, 320, 240).unwrap();
        let mut depth = vec![0.0f32; 320 * 240];
        depth[(v * 320 + u) as usize] = z;
        let s = PixelSample { u, v, patch: 0, weight: 1.0 };
        let w = backproject(&[s], &depth, &k, &pose)[0];
        let (pu, pv, pz) = k.project(pose.inverse_transform_point(w.point));
        prop_assert!((pu - u as f64).abs() < 1e-4);
        prop_assert!((pv - v as f64).abs() < 1e-4);
        prop_assert!((pz - z as f64).abs() < 1e-6);
    }

    #[test]
    fn instance_layer_invariants(proposals in prop::collection::vec(arb_proposal(4), 1..30), tau in 0.05f64..1.0) {
        let mut layer = InstanceLayer::new(VS, 4, 3);
        let mut expected_weight: BTreeMap<u32, f64> = BTreeMap::new();
        for p in &proposals {
            let assoc = layer.associate(p, tau);
            prop_assert_eq!(assoc, layer.clone().associate(p, tau));
            if let Association::Match { instance_id, iou } | Association::NoMatch { best: Some((instance_id, iou)) } = assoc {
                let set: BTreeSet<VoxelKey> = layer.instance(instance_id).unwrap().voxels().clone();
                let fp: BTreeSet<VoxelKey> = p.voxels.keys().copied().collect();
                let brute = set.intersection(&fp).count() as f64 / set.union(&fp).count() as f64;
                prop_assert_eq!(iou, brute);
            }
            let (_, id, _) = layer.integrate(p, tau).unwrap();
            *expected_weight.entry(id).or_default() += p.num_points() as f64;
            for (_, h) in layer.iter_voxels() {
                prop_assert!(h.len() <= 3);
                prop_assert!(h.iter().all(|x| x.count > 0.0));
            }
        }
        for rec in layer.instances() {
            prop_assert_eq!(rec.weight, expected_weight[&rec.id]);
        }
    }

    #[test]
    fn fuse_voxel_is_a_monotone_convex_blend(
        fd in prop::collection::vec(-10.0f32..10.0, 6),
        fi in prop::collection::vec(-10.0f32..10.0, 6),
        wd in 0.0f64..100.0,
        wi in 0.001f64..100.0,
        lambda in 0.01f64..50.0,
        grow in 1.0f64..10.0,
        alpha in 0.001f64..1000.0,
    ) {
        let out = fuse_voxel(&fd, wd, &fi, wi, lambda).unwrap();
        let more = fuse_voxel(&fd, wd, &fi, wi, lambda * grow).unwrap();
        let scaled = fuse_voxel(&fd, alpha * wd, &fi, alpha * wi, lambda).unwrap();
        for c in 0..6 {
            prop_assert!(out[c] >= fd[c].min(fi[c]) - 1e-5 && out[c] <= fd[c].max(fi[c]) + 1e-5);
            prop_assert!((more[c] - fi[c]).abs() <= (out[c] - fi[c]).abs() + 1e-5);
            prop_assert!((scaled[c] - out[c]).abs() <= 1e-5);
        }
        prop_assert_eq!(fuse_voxel(&fd, wd, &fi, 0.0, lambda).ok(), (wd > 0.0).then(|| fd.clone()));
        prop_assert_eq!(fuse_voxel(&fd, 0.0, &fi, wi, lambda).unwrap(), fi);
    }

    #[test]
    fn fuse_all_is_pure(proposals in prop::collection::vec(arb_proposal(3), 1..12), lambda in 0.1f64..5.0) {
        let mut layer = InstanceLayer::new(VS, 3, 3);
        let mut dense = DenseLayer::new(VS, 3);
        for p in &proposals {
            layer.integrate(p, 0.3).unwrap();
        }
        for (i, k) in layer.sorted_voxel_keys().into_iter().enumerate() {
            if i % 3 != 0 {
                dense.insert_raw(k, &[i as f32 * 0.1, 1.0, -0.5], 1.0 + i as f64).unwrap();
            }
        }
        let before = layer.clone();
        let a = fuse_all(&dense, &layer, lambda, &FusionScope::All);
        let b = fuse_all(&dense.clone(), &layer.clone(), lambda, &FusionScope::All);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(layer.instances(), before.instances());
    }

    #[test]
    fn pruning_keeps_only_the_window(
        keys in prop::collection::vec(prop::array::uniform3(-60i64..60), 1..300),
        center in prop::array::uniform3(-2.0f64..2.0),
        radius in 0.05f64..3.0,
    ) {
        let mut dense = DenseLayer::new(VS, 2);
        for k in &keys {
            dense.insert_raw(VoxelKey::new(k[0], k[1], k[2]), &[1.0, 0.0], 1.0).unwrap();
        }
        let mut instances = InstanceLayer::new(VS, 2, 3);
        let p = InstanceProposal::from_points(vec![[0.0, 0.0, 0.0], [2.9, 0.1, 0.0]], vec![0.0, 1.0], VS).unwrap();
        instances.integrate(&p, 0.2).unwrap();
        let inst_before = instances.clone();
        let window = WindowState { center, radius, frames_since_fusion: 0 };
        let n_before = dense.len();
        let removed = prune_outside(&mut dense, &window);
        prop_assert_eq!(n_before - removed, dense.len());
        let bound = 4.0 / 3.0 * std::f64::consts::PI * (radius + VS * 3f64.sqrt()).powi(3) / VS.powi(3);
        prop_assert!((dense.len() as f64) <= bound);
        for (k, _) in dense.iter() {
            let c = k.center(VS);
            let d2: f64 = (0..3).map(|a| (c[a] - center[a]).powi(2)).sum();
            prop_assert!(d2 <= radius * radius);
        }
        for k in &keys {
            let k = VoxelKey::new(k[0], k[1], k[2]);
            let c = k.center(VS);
            let d2: f64 = (0..3).map(|a| (c[a] - center[a]).powi(2)).sum();
            prop_assert_eq!(dense.contains(&k), d2 <= radius * radius);
        }
        prop_assert_eq!(instances.instances(), inst_before.instances());
    }

    #[test]
    fn evidence_never_decreases(scores in prop::collection::vec(0.0f64..100.0, 1..50)) {
        let mut layer = InstanceLayer::new(VS, 1, 3);
        let p = InstanceProposal::from_points(vec![[0.0; 3]], vec![1.0], VS).unwrap();
        layer.integrate(&p, 0.2).unwrap();
        let rec = layer.instance_mut(0).unwrap();
        let mut last = rec.evidence_score;
        for (i, s) in scores.into_iter().enumerate() {
            evidence_gate(rec, &FusedInstance { instance_id: 0, embedding: vec![i as f32], total_precision: s });
            prop_assert!(rec.evidence_score >= last);
            last = rec.evidence_score;
        }
    }

    #[test]
    fn prediction_ignores_positive_rescaling(
        voxels in prop::collection::vec((prop::array::uniform3(-20i64..20), prop::collection::vec(-1.0f32..1.0, 5)), 1..40),
        prompts in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 5), 1..6),
        voxel_scale in prop::collection::vec(0.01f32..100.0, 40),
        prompt_scale in prop::collection::vec(0.01f32..100.0, 6),
    ) {
        prop_assume!(prompts.iter().all(|p| p.iter().any(|x| x.abs() > 1e-3)));
        let build = |scaled: bool| {
            let mut d = DenseLayer::new(VS, 5);
            for (i, (k, e)) in voxels.iter().enumerate() {
                let s = if scaled { voxel_scale[i] } else { 1.0 };
                let e: Vec<f32> = e.iter().map(|x| x * s).collect();
                d.insert_raw(VoxelKey::new(k[0], k[1], k[2]), &e, 1.0).unwrap();
            }
            d
        };
        let labels: Vec<String> = (0..prompts.len()).map(|i| format!("c{i}")).collect();
        let ps = |scaled: bool| {
            let e = prompts
                .iter()
                .enumerate()
                .map(|(i, p)| p.iter().map(|x| x * if scaled { prompt_scale[i] } else { 1.0 }).collect())
                .collect();
            PromptSet::new(labels.clone(), e, vec![false; prompts.len()]).unwrap()
        };
        let (d0, d1) = (build(false), build(true));
        let inst = InstanceLayer::new(VS, 5, 3);
        let v0 = MapView { dense: &d0, instances: &inst, fused_dense: None };
        let v1 = MapView { dense: &d1, instances: &inst, fused_dense: None };
        let a = predict_classes(&v0, LayerSelection::Dense, &ps(false)).unwrap();
        let b = predict_classes(&v1, LayerSelection::Dense, &ps(true)).unwrap();
        // rescaling may flip exact float ties, so compare only clear winners
        for (k, e) in &voxels {
            let key = VoxelKey::new(k[0], k[1], k[2]);
            let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let mut sims: Vec<f64> = prompts
                .iter()
                .map(|p| p.iter().zip(e).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>() / (norm(p) * norm(e)).max(1e-30))
                .collect();
            sims.sort_by(|x, y| y.total_cmp(x));
            if sims.len() < 2 || sims[0] - sims[1] > 1e-4 {
                prop_assert_eq!(a.get(&key), b.get(&key));
            }
        }
    }

    #[test]
    fn metrics_match_brute_force(
        cells in prop::collection::vec((0u8..5, prop::option::of(0u8..5)), 1..1000),
        classes in 1usize..=5,
        background in prop::collection::vec(any::<bool>(), 5),
        exclude in any::<bool>(),
    ) {
        let prompts = PromptSet::new(
            (0..classes).map(|i| format!("c{i}")).collect(),
            vec![vec![1.0]; classes],
            background[..classes].to_vec(),
        )
        .unwrap();
        let mut gt = GroundTruthVolume::new(VS);
        let mut pred = BTreeMap::new();
        for (i, (g, p)) in cells.iter().enumerate() {
            let k = VoxelKey::new(i as i64, 0, 0);
            gt.labels.insert(k, (*g as usize % classes) as u16);
            if let Some(p) = p {
                pred.insert(k, (*p as usize % classes) as u16);
            }
        }
        match (brute_force_metrics(&pred, &gt, &prompts, exclude), evaluate(&pred, &gt, &prompts, exclude)) {
            (Some(b), Ok(r)) => {
                prop_assert_eq!(b.miou, r.miou);
                prop_assert_eq!(b.fmiou, r.fmiou);
                prop_assert_eq!(b.acc, r.acc);
                for x in [r.miou, r.fmiou, r.acc] {
                    prop_assert!((0.0..=1.0).contains(&x));
                }
            }
            (None, Err(_)) => {}
            (b, r) => prop_assert!(false, "brute force {:?} vs engine {:?}", b.is_some(), r.is_ok()),
        }
    }

    #[test]
    fn equal_frequencies_make_fmiou_equal_miou(per_class in 1usize..40, classes in 1usize..5, seed in any::<u64>()) {
        let prompts = PromptSet::new((0..classes).map(|i| format!("c{i}")).collect(), vec![vec![1.0]; classes], vec![false; classes]).unwrap();
        let mut gt = GroundTruthVolume::new(VS);
        let mut pred = BTreeMap::new();
        for c in 0..classes {
            for j in 0..per_class {
                let k = VoxelKey::new(c as i64, j as i64, 0);
                gt.labels.insert(k, c as u16);
                let h = fus3d_core::frames::derive_seed(seed, &[c as u64, j as u64]);
                if !h.is_multiple_of(4) {
                    pred.insert(k, (h % classes as u64) as u16);
                }
            }
        }
        let r = evaluate(&pred, &gt, &prompts, false).unwrap();
        prop_assert!((r.fmiou - r.miou).abs() < 1e-12);
    }

    #[test]
    fn streams_round_trip_bit_exactly(poses in prop::collection::vec(arb_pose(), 0..4), weighted in any::<bool>()) {
        let k = CameraIntrinsics::new(30.0, 30.0, 19.5, 14.5, 40, 30).unwrap();
        let header = StreamHeader::new(k, 8, 3, weighted);
        let frames: Vec<FrameRecord> = poses
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut f = small_frame(3, i as u64, 5, p);
                if !weighted {
                    f.patch_weights = None;
                }
                f
            })
            .collect();
        let mut w = StreamWriter::new(Vec::new(), header).unwrap();
        for f in &frames {
            w.write_frame(f).unwrap();
        }
        let bytes = w.finish().unwrap();
        let r = StreamReader::new(bytes.as_slice()).unwrap();
        prop_assert_eq!(*r.header(), header);
        let back: Vec<FrameRecord> = r.collect::<Result<_, _>>().unwrap();
        prop_assert_eq!(back.len(), frames.len());
        for (a, b) in back.iter().zip(&frames) {
            prop_assert_eq!(a.pose.to_row_major().map(f64::to_bits), b.pose.to_row_major().map(f64::to_bits));
            prop_assert_eq!(a.depth.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.depth.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(&a.patches, &b.patches);
            prop_assert_eq!(&a.patch_weights, &b.patch_weights);
            prop_assert_eq!(&a.segments, &b.segments);
        }
    }

    #[test]
    fn snapshots_round_trip_byte_identically(proposals in prop::collection::vec(arb_proposal(3), 0..10), fuse in any::<bool>()) {
        let config = MapConfig { embedding_dim: 3, ..MapConfig::default() };
        let mut instances = InstanceLayer::new(VS, 3, 3);
        let mut dense = DenseLayer::new(VS, 3);
        for (i, p) in proposals.iter().enumerate() {
            instances.integrate(p, 0.2).unwrap();
            for k in p.voxels.keys() {
                dense.insert_raw(*k, &[i as f32, 0.5, -1.0 / (i + 1) as f32], 1.0 + i as f64).unwrap();
            }
        }
        let fused_dense = fuse.then(|| fuse_global(&dense, &mut instances, config.lambda).dense);
        let snap = MapSnapshot { config, dense, instances, fused_dense };
        let bytes = snap.to_bytes();
        let back = MapSnapshot::read(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.instances.instances(), snap.instances.instances());
    }
}
