//! Frame records, keyframe gating, pixel sampling and back-projection.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::types::{CameraIntrinsics, Pose};

/// Image and patch-grid dimensions shared by every frame of a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameGeometry {
    pub width: u32,
    pub height: u32,
    pub patch_size: u32,
    pub dim: usize,
}

impl FrameGeometry {
    pub fn patch_cols(&self) -> u32 {
        self.width.div_ceil(self.patch_size)
    }

    pub fn patch_rows(&self) -> u32 {
        self.height.div_ceil(self.patch_size)
    }

    pub fn patch_count(&self) -> usize {
        (self.patch_cols() * self.patch_rows()) as usize
    }

    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    #[inline]
    pub fn patch_of(&self, u: u32, v: u32) -> u32 {
        (v / self.patch_size) * self.patch_cols() + u / self.patch_size
    }
}

/// A segmentation mask proposal together with its crop embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentProposal {
    pub mask: Mask,
    pub crop_embedding: Vec<f32>,
    pub mask_area: u32,
    pub border_contact: f32,
}

impl SegmentProposal {
    pub fn new(mask: Mask, crop_embedding: Vec<f32>) -> Self {
        let mask_area = mask.area();
        let border_contact = mask.border_contact();
        Self { mask, crop_embedding, mask_area, border_contact }
    }
}

/// One RGB-D keyframe candidate as seen by the engine.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub geometry: FrameGeometry,
    pub pose: Pose,
    /// Row-major `H·W` depth in meters; 0 or NaN marks invalid pixels.
    pub depth: Vec<f32>,
    /// Row-major `Hp·Wp·d` patch embeddings.
    pub patches: Vec<f32>,
    pub patch_weights: Option<Vec<f32>>,
    pub segments: Vec<SegmentProposal>,
}

impl FrameRecord {
    #[inline]
    pub fn depth_at(&self, u: u32, v: u32) -> f32 {
        self.depth[(v * self.geometry.width + u) as usize]
    }

    #[inline]
    pub fn has_depth(&self, u: u32, v: u32) -> bool {
        valid_depth(self.depth_at(u, v))
    }

    pub fn patch_embedding(&self, patch: u32) -> &[f32] {
        let d = self.geometry.dim;
        &self.patches[patch as usize * d..(patch as usize + 1) * d]
    }

    pub fn patch_weight(&self, patch: u32) -> f32 {
        self.patch_weights.as_ref().map_or(1.0, |w| w[patch as usize])
    }

    /// Checks array sizes, finiteness of embeddings and weight ranges.
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        let bad = |m: String| Err(Error::InvalidInput(format!("frame {}: {m}", self.frame_index)));
        if self.depth.len() != g.pixel_count() {
            return bad(format!("depth has {} values, expected {}", self.depth.len(), g.pixel_count()));
        }
        if self.patches.len() != g.patch_count() * g.dim {
            return bad(format!("patch grid has {} values", self.patches.len()));
        }
        if let Some(i) = self.patches.iter().position(|x| !x.is_finite()) {
            return bad(format!("non-finite patch embedding value in patch {}", i / g.dim));
        }
        if let Some(w) = &self.patch_weights {
            if w.len() != g.patch_count() || w.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return bad("patch weights must be Hp·Wp values in [0, 1]".into());
            }
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.crop_embedding.len() != g.dim || s.crop_embedding.iter().any(|x| !x.is_finite()) {
                return bad(format!("segment {i} crop embedding invalid"));
            }
            if s.mask.width() != g.width || s.mask.height() != g.height {
                return bad(format!("segment {i} mask size mismatch"));
            }
        }
        self.pose.validate()
    }
}

#[inline]
pub fn valid_depth(z: f32) -> bool {
    z.is_finite() && z > 0.0
}

/// Translation/rotation keyframe gate.
#[derive(Clone, Debug)]
pub struct KeyframeGate {
    pub last_pose: Option<Pose>,
    pub translation_threshold: f64,
    pub rotation_threshold: f64,
}

impl KeyframeGate {
    pub fn new(translation_threshold: f64, rotation_threshold: f64) -> Self {
        Self { last_pose: None, translation_threshold, rotation_threshold }
    }

    /// True when the pose moved enough since the last accepted one; the
    /// gate then remembers `pose`.
    pub fn should_process(&mut self, pose: &Pose) -> bool {
        let accept = match &self.last_pose {
            None => true,
            Some(last) => {
                last.translation_distance(pose) >= self.translation_threshold
                    || last.rotation_angle_to(pose) >= self.rotation_threshold
            }
        };
        if accept {
            self.last_pose = Some(*pose);
        }
        accept
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelSample {
    pub u: u32,
    pub v: u32,
    pub patch: u32,
    pub weight: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldSample {
    pub point: [f64; 3],
    pub patch: u32,
    pub weight: f32,
}

/// Picks up to `pixels_per_patch` valid-depth pixels from every patch,
/// restricted to `mask` when given.
///
/// Selection is a seeded draw without replacement; the same inputs always
/// give the same samples in the same order.
pub fn sample_pixels(
    frame: &FrameRecord,
    pixels_per_patch: usize,
    mask: Option<&Mask>,
    seed: u64,
) -> Vec<PixelSample> {
    let g = &frame.geometry;
    let ps = g.patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pr0, pc0, pr1, pc1) = match mask.map(|m| m.bbox()) {
        Some(None) => return Vec::new(),
        Some(Some((u0, v0, u1, v1))) => (v0 / ps, u0 / ps, v1 / ps, u1 / ps),
        None => (0, 0, g.patch_rows() - 1, g.patch_cols() - 1),
    };
    let mut out = Vec::new();
    let mut candidates: Vec<(u32, u32)> = Vec::with_capacity((ps * ps) as usize);
    for pr in pr0..=pr1 {
        for pc in pc0..=pc1 {
            candidates.clear();
            let patch = pr * g.patch_cols() + pc;
            for v in pr * ps..((pr + 1) * ps).min(g.height) {
                for u in pc * ps..((pc + 1) * ps).min(g.width) {
                    if mask.is_none_or(|m| m.get(u, v)) && frame.has_depth(u, v) {
                        candidates.push((u, v));
                    }
                }
            }
            if candidates.is_empty() {
                continue;
            }
            let weight = frame.patch_weight(patch);
            if candidates.len() <= pixels_per_patch {
                out.extend(candidates.iter().map(|&(u, v)| PixelSample { u, v, patch, weight }));
            } else {
                let mut picks = index::sample(&mut rng, candidates.len(), pixels_per_patch).into_vec();
                picks.sort_unstable();
                out.extend(picks.into_iter().map(|i| {
                    let (u, v) = candidates[i];
                    PixelSample { u, v, patch, weight }
                }));
            }
        }
    }
    out
}

/// Pinhole back-projection of samples into the world frame. Samples on
/// invalid depth are dropped.
pub fn backproject(
    samples: &[PixelSample],
    depth: &[f32],
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
) -> Vec<WorldSample> {
    let w = intrinsics.width;
    samples
        .iter()
        .filter_map(|s| {
            let z = depth[(s.v * w + s.u) as usize];
            if !valid_depth(z) {
                return None;
            }
            let cam = intrinsics.unproject(s.u as f64, s.v as f64, z as f64);
            Some(WorldSample { point: pose.transform_point(cam), patch: s.patch, weight: s.weight })
        })
        .collect()
}

/// Drops masks that are too small or touch the image border too much.
pub fn filter_segments(
    segments: &[SegmentProposal],
    geometry: &FrameGeometry,
    min_area_frac: f64,
    border_contact_frac: f64,
) -> Vec<SegmentProposal> {
    let min_area = min_area_frac * geometry.pixel_count() as f64;
    segments
        .iter()
        .filter(|s| {
            s.mask_area > 0
                && s.mask_area as f64 >= min_area
                && s.border_contact as f64 <= border_contact_frac
        })
        .cloned()
        .collect()
}

/// Mixes a base seed with stream coordinates (splitmix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn geometry() -> FrameGeometry {
        FrameGeometry { width: 48, height: 40, patch_size: 16, dim: 4 }
    }

    fn frame(depth: f32) -> FrameRecord {
        let g = geometry();
        FrameRecord {
            frame_index: 0,
            geometry: g,
            pose: Pose::identity(),
            depth: vec![depth; g.pixel_count()],
            patches: vec![0.5; g.patch_count() * g.dim],
            patch_weights: None,
            segments: vec![],
        }
    }

    #[test]
    fn patch_grid_uses_ceiling() {
        let g = geometry();
        assert_eq!((g.patch_rows(), g.patch_cols()), (3, 3));
    }

    #[test]
    fn gate_examples() {
        let mut gate = KeyframeGate::new(0.08, 0.06);
        assert!(gate.should_process(&Pose::identity()));
        assert!(!gate.should_process(&Pose::from_translation([0.05, 0.0, 0.0])));
        let rotated = Pose::from_axis_angle([0.0, 0.0, 1.0], 0.07, [0.0; 3]);
        assert!(gate.should_process(&rotated));
        assert_eq!(gate.last_pose, Some(rotated));
    }

    #[test]
    fn gate_translation_boundary_is_inclusive() {
        let mut gate = KeyframeGate::new(0.08, 0.06);
        gate.should_process(&Pose::identity());
        assert!(gate.should_process(&Pose::from_translation([0.08, 0.0, 0.0])));
    }

    #[test]
    fn five_samples_per_patch_deterministic() {
        let f = frame(1.5);
        let a = sample_pixels(&f, 5, None, 42);
        let b = sample_pixels(&f, 5, None, 42);
        assert_eq!(a, b);
        let mut per_patch: HashMap<u32, usize> = HashMap::new();
        for s in &a {
            *per_patch.entry(s.patch).or_default() += 1;
            assert_eq!(s.patch, f.geometry.patch_of(s.u, s.v));
            assert_eq!(s.weight, 1.0);
        }
        assert_eq!(per_patch.len(), 9);
        assert!(per_patch.values().all(|&c| c == 5));
        assert_ne!(a, sample_pixels(&f, 5, None, 43));
    }

    #[test]
    fn invalid_depth_gives_no_samples() {
        assert!(sample_pixels(&frame(0.0), 5, None, 1).is_empty());
        assert!(sample_pixels(&frame(f32::NAN), 5, None, 1).is_empty());
    }

    #[test]
    fn masked_sampling_stays_inside_mask() {
        let f = frame(2.0);
        let mask = Mask::from_fn(48, 40, |u, v| (16..32).contains(&u) && (16..32).contains(&v));
        let s = sample_pixels(&f, 9, Some(&mask), 3);
        assert_eq!(s.len(), 9);
        assert!(s.iter().all(|p| mask.get(p.u, p.v) && p.patch == 4));
        assert!(sample_pixels(&f, 9, Some(&Mask::new(48, 40)), 3).is_empty());
    }

    #[test]
    fn sampling_uses_patch_weights() {
        let mut f = frame(2.0);
        f.patch_weights = Some((0..9).map(|i| i as f32 / 10.0).collect());
        for s in sample_pixels(&f, 2, None, 9) {
            assert_eq!(s.weight, s.patch as f32 / 10.0);
        }
    }

    #[test]
    fn sparse_patch_returns_all_available() {
        let mut f = frame(0.0);
        f.depth[0] = 1.0;
        f.depth[1] = 1.0;
        let s = sample_pixels(&f, 5, None, 0);
        assert_eq!(s.len(), 2);
    }

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 110.0, 24.0, 20.0, 48, 40).unwrap()
    }

    fn sample(u: u32, v: u32) -> PixelSample {
        PixelSample { u, v, patch: 0, weight: 1.0 }
    }

    #[test]
    fn backproject_examples() {
        let k = intrinsics();
        let mut depth = vec![0.0f32; 48 * 40];
        depth[(20 * 48 + 24) as usize] = 2.0;
        let out = backproject(&[sample(24, 20)], &depth, &k, &Pose::identity());
        assert_eq!(out[0].point, [0.0, 0.0, 2.0]);

        // one focal length to the right of the principal point: unit tangent
        let k = CameraIntrinsics::new(20.0, 20.0, 10.0, 20.0, 48, 40).unwrap();
        depth[(20 * 48 + 30) as usize] = 1.0;
        let out = backproject(&[sample(30, 20)], &depth, &k, &Pose::identity());
        assert_eq!(out[0].point, [1.0, 0.0, 1.0]);
        let out = backproject(&[sample(30, 20)], &depth, &k, &Pose::from_translation([0.0, 0.0, 5.0]));
        assert_eq!(out[0].point, [1.0, 0.0, 6.0]);

        // invalid depth is dropped
        assert!(backproject(&[sample(0, 0)], &depth, &k, &Pose::identity()).is_empty());
    }

    #[test]
    fn backproject_reprojects() {
        let k = intrinsics();
        let pose = Pose::from_axis_angle([0.3, -0.5, 0.8], 1.1, [0.4, 2.0, -1.0]);
        let mut depth = vec![0.0f32; 48 * 40];
        let mut samples = vec![];
        for (i, (u, v)) in [(0u32, 0u32), (47, 39), (13, 7), (30, 22)].into_iter().enumerate() {
            depth[(v * 48 + u) as usize] = 0.3 + i as f32 * 1.7;
            samples.push(sample(u, v));
        }
        for (s, w) in samples.iter().zip(backproject(&samples, &depth, &k, &pose)) {
            let (u, v, z) = k.project(pose.inverse_transform_point(w.point));
            assert!((u - s.u as f64).abs() < 1e-4);
            assert!((v - s.v as f64).abs() < 1e-4);
            assert!((z - depth[(s.v * 48 + s.u) as usize] as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn filter_examples() {
        let g = FrameGeometry { width: 100, height: 100, patch_size: 16, dim: 2 };
        let seg = |area: u32, contact: f32| SegmentProposal {
            mask: Mask::from_fn(100, 100, |u, v| v * 100 + u < area),
            crop_embedding: vec![1.0, 0.0],
            mask_area: area,
            border_contact: contact,
        };
        let kept = filter_segments(&[seg(1000, 0.0)], &g, 0.002, 0.15);
        assert_eq!(kept.len(), 1);
        assert!(filter_segments(&[seg(10, 0.0)], &g, 0.002, 0.15).is_empty());
        assert!(filter_segments(&[seg(1000, 0.5)], &g, 0.002, 0.15).is_empty());
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, &[0, 0]), derive_seed(1, &[0, 1]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gate_monotone_in_motion(t in 0.0f64..0.3, a in 0.0f64..0.3, dt in 0.001f64..0.2, da in 0.001f64..0.2) {
                let mut g1 = KeyframeGate::new(0.08, 0.06);
                g1.should_process(&Pose::identity());
                let mut g2 = g1.clone();
                let p1 = Pose::from_axis_angle([0.0, 0.0, 1.0], a, [t, 0.0, 0.0]);
                let p2 = Pose::from_axis_angle([0.0, 0.0, 1.0], a + da, [t + dt, 0.0, 0.0]);
                if g1.should_process(&p1) {
                    prop_assert!(g2.should_process(&p2));
                }
            }
        }
    }
}
