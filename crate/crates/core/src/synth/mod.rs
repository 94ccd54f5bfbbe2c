//! Deterministic synthetic scenes and frame streams with ground truth.
//!
//! Scenes are sets of labelled axis-aligned boxes. Frames are rendered by
//! exact ray casting; patch and crop embeddings are derived from the class
//! embeddings of what each pixel hits, then corrupted by a [`NoiseModel`].

pub mod raycast;
pub mod scenes;

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::frames::{backproject, derive_seed, FrameGeometry, FrameRecord, PixelSample, SegmentProposal};
use crate::mask::Mask;
use crate::metrics::GroundTruthVolume;
use crate::query::PromptSet;
use crate::stream::{StreamHeader, StreamWriter};
use crate::types::{voxel_of, CameraIntrinsics, Pose, VoxelKey};

pub use raycast::Aabb;

const NO_HIT: u32 = u32::MAX;
const RENDER_MIN_T: f64 = 1e-6;
/// Hits farther than this produce invalid depth.
pub const MAX_RANGE: f64 = 10.0;
const CROP_PADDING: f64 = 0.05;
const MAX_CONTEXT_MIX: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBox {
    pub aabb: Aabb,
    pub class: u16,
    pub instance: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub boxes: Vec<SceneBox>,
    pub class_names: Vec<String>,
    pub background: Vec<bool>,
    pub class_embeddings: Vec<Vec<f32>>,
    /// Region the camera must stay inside.
    pub bounds: Aabb,
}

impl SynthScene {
    pub fn new(
        boxes: Vec<SceneBox>,
        class_names: Vec<String>,
        background: Vec<bool>,
        bounds: Aabb,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let scene = Self {
            class_embeddings: class_embeddings(class_names.len(), dim, seed)?,
            boxes,
            class_names,
            background,
            bounds,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.class_names.len();
        if self.background.len() != n || self.class_embeddings.len() != n {
            return Err(Error::InvalidInput("class table lengths differ".into()));
        }
        if self.bounds.is_degenerate() {
            return Err(Error::InvalidInput("degenerate scene bounds".into()));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.aabb.is_degenerate() {
                return Err(Error::InvalidInput(format!("box {i} is degenerate")));
            }
            if b.class as usize >= n {
                return Err(Error::InvalidInput(format!("box {i} has unknown class {}", b.class)));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.class_embeddings.first().map_or(0, |e| e.len())
    }

    /// The class embeddings double as text prompts.
    pub fn prompts(&self) -> PromptSet {
        PromptSet::new(self.class_names.clone(), self.class_embeddings.clone(), self.background.clone())
            .expect("scene tables validated")
    }

    pub fn instance_count(&self) -> usize {
        let mut ids: Vec<u32> = self.boxes.iter().map(|b| b.instance).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn check_trajectory(&self, trajectory: &[Pose]) -> Result<()> {
        if trajectory.is_empty() {
            return Err(Error::InvalidInput("empty trajectory".into()));
        }
        for (i, p) in trajectory.iter().enumerate() {
            if !self.bounds.contains(p.position()) {
                return Err(Error::InvalidInput(format!("trajectory pose {i} leaves the scene bounds")));
            }
        }
        Ok(())
    }
}

/// Seeded orthonormal class embeddings (Gram-Schmidt on Gaussian draws).
/// When there are more classes than dimensions, falls back to random unit
/// vectors with pairwise |cos| ≤ 0.1 by rejection.
pub fn class_embeddings(n: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    if dim == 0 {
        return Err(Error::InvalidInput("embedding dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC1A55]));
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidInput(format!("cannot place {n} near-orthogonal classes in {dim} dimensions")));
        }
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if out.len() < dim {
            for u in &out {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        if out.iter().all(|u| u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().abs() <= 0.1) {
            out.push(v);
        }
    }
    Ok(out.into_iter().map(|v| v.into_iter().map(|x| x as f32).collect()).collect())
}

/// Segmentation and encoder failure modes applied per frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    /// Probability that a patch covering two or more classes emits the
    /// pixel-share mix of their embeddings instead of the majority class.
    pub patch_bleed: f64,
    pub embed_noise_sigma: f64,
    pub seg_split_prob: f64,
    pub seg_merge_prob: f64,
    /// Base weight of the strongest neighbouring class in crop embeddings.
    /// It is scaled by padded-crop area over mask area, so crops that are
    /// mostly context bleed more.
    pub crop_context_bleed: f64,
}

impl NoiseModel {
    pub const PROFILES: [&'static str; 3] = ["none", "default", "split-heavy"];

    pub fn none() -> Self {
        Self { patch_bleed: 0.0, embed_noise_sigma: 0.0, seg_split_prob: 0.0, seg_merge_prob: 0.0, crop_context_bleed: 0.0 }
    }

    pub fn default_profile() -> Self {
        Self { patch_bleed: 0.3, embed_noise_sigma: 0.2, seg_split_prob: 0.3, seg_merge_prob: 0.1, crop_context_bleed: 0.2 }
    }

    pub fn split_heavy() -> Self {
        Self { seg_split_prob: 0.7, ..Self::default_profile() }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Self::none()),
            "default" => Ok(Self::default_profile()),
            "split-heavy" => Ok(Self::split_heavy()),
            _ => Err(Error::Config(format!("unknown noise profile {name:?}; expected one of {:?}", Self::PROFILES))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("patch_bleed", self.patch_bleed),
            ("seg_split_prob", self.seg_split_prob),
            ("seg_merge_prob", self.seg_merge_prob),
            ("crop_context_bleed", self.crop_context_bleed),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.embed_noise_sigma >= 0.0 && self.embed_noise_sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("embed_noise_sigma = {} invalid", self.embed_noise_sigma)));
        }
        Ok(())
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::default_profile()
    }
}

/// Per-pixel depth and hit box index for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub depth: Vec<f32>,
    /// Index into the scene's boxes, `u32::MAX` for no hit.
    pub hit: Vec<u32>,
}

pub fn render(scene: &SynthScene, intrinsics: &CameraIntrinsics, pose: &Pose) -> Rendered {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let aabbs: Vec<Aabb> = scene.boxes.iter().map(|b| b.aabb).collect();
    let n = (w * h) as usize;
    let mut depth = vec![0.0f32; n];
    let mut hit = vec![NO_HIT; n];
    let r = &pose.rotation;
    for v in 0..h {
        for u in 0..w {
            let c = intrinsics.unproject(u as f64, v as f64, 1.0);
            let dir = [
                r[0][0] * c[0] + r[0][1] * c[1] + r[0][2] * c[2],
                r[1][0] * c[0] + r[1][1] * c[1] + r[1][2] * c[2],
                r[2][0] * c[0] + r[2][1] * c[1] + r[2][2] * c[2],
            ];
            // camera-frame direction has z = 1, so t is the depth
            if let Some((t, i)) = raycast::first_hit(&aabbs, pose.translation, dir, RENDER_MIN_T) {
                if t <= MAX_RANGE {
                    let idx = (v * w + u) as usize;
                    depth[idx] = t as f32;
                    hit[idx] = i as u32;
                }
            }
        }
    }
    Rendered { depth, hit }
}

/// Frame synthesis for one scene, camera and noise model.
#[derive(Clone, Debug)]
pub struct Synthesizer<'a> {
    pub scene: &'a SynthScene,
    pub intrinsics: CameraIntrinsics,
    pub patch_size: u32,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl<'a> Synthesizer<'a> {
    pub fn geometry(&self) -> FrameGeometry {
        FrameGeometry {
            width: self.intrinsics.width,
            height: self.intrinsics.height,
            patch_size: self.patch_size,
            dim: self.scene.dim(),
        }
    }

    pub fn header(&self) -> StreamHeader {
        StreamHeader::new(self.intrinsics, self.patch_size, self.scene.dim(), false)
    }

    /// Renders and encodes one frame. Randomness comes from a per-frame
    /// stream, so frames can be produced in any order.
    pub fn frame(&self, index: u64, pose: &Pose) -> (FrameRecord, Rendered) {
        let rendered = render(self.scene, &self.intrinsics, pose);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x5_1237, index]));
        let patches = self.patch_grid(&rendered, &mut rng);
        let segments = self.segments(&rendered, &mut rng);
        let frame = FrameRecord {
            frame_index: index,
            geometry: self.geometry(),
            pose: *pose,
            depth: rendered.depth.clone(),
            patches,
            patch_weights: None,
            segments,
        };
        (frame, rendered)
    }

    fn class_at(&self, rendered: &Rendered, idx: usize) -> Option<u16> {
        match rendered.hit[idx] {
            NO_HIT => None,
            b => Some(self.scene.boxes[b as usize].class),
        }
    }

    fn add_noise(&self, v: &mut [f32], rng: &mut ChaCha8Rng) {
        let s = self.noise.embed_noise_sigma;
        if s > 0.0 {
            for x in v {
                *x += (s * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
        }
    }

    fn patch_grid(&self, rendered: &Rendered, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let g = self.geometry();
        let d = g.dim;
        let nclass = self.scene.class_names.len();
        let mut out = vec![0.0f32; g.patch_count() * d];
        let mut counts = vec![0u32; nclass];
        for pr in 0..g.patch_rows() {
            for pc in 0..g.patch_cols() {
                counts.iter_mut().for_each(|c| *c = 0);
                for v in pr * g.patch_size..((pr + 1) * g.patch_size).min(g.height) {
                    for u in pc * g.patch_size..((pc + 1) * g.patch_size).min(g.width) {
                        if let Some(c) = self.class_at(rendered, (v * g.width + u) as usize) {
                            counts[c as usize] += 1;
                        }
                    }
                }
                let total: u32 = counts.iter().sum();
                if total == 0 {
                    continue;
                }
                let slot = &mut out[(pr * g.patch_cols() + pc) as usize * d..][..d];
                let present = counts.iter().filter(|&&c| c > 0).count();
                let mixed = present >= 2 && self.noise.patch_bleed > 0.0 && rng.random_bool(self.noise.patch_bleed);
                if mixed {
                    for (k, &c) in counts.iter().enumerate() {
                        if c > 0 {
                            let f = c as f64 / total as f64;
                            for (s, &e) in slot.iter_mut().zip(&self.scene.class_embeddings[k]) {
                                *s = (*s as f64 + f * e as f64) as f32;
                            }
                        }
                    }
                } else {
                    slot.copy_from_slice(&self.scene.class_embeddings[argmax(&counts)]);
                }
                self.add_noise(slot, rng);
            }
        }
        out
    }

    fn segments(&self, rendered: &Rendered, rng: &mut ChaCha8Rng) -> Vec<SegmentProposal> {
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        let inst_of = |idx: usize| match rendered.hit[idx] {
            NO_HIT => None,
            b => Some(self.scene.boxes[b as usize].instance),
        };
        let is_bg_inst: HashMap<u32, bool> = self
            .scene
            .boxes
            .iter()
            .map(|b| (b.instance, self.scene.background[b.class as usize]))
            .collect();

        // visible instances and their masks, by id
        let mut masks: std::collections::BTreeMap<u32, Mask> = std::collections::BTreeMap::new();
        for v in 0..h {
            for u in 0..w {
                if let Some(i) = inst_of((v * w + u) as usize) {
                    masks.entry(i).or_insert_with(|| Mask::new(w, h)).set(u, v, true);
                }
            }
        }

        // merge adjacent object instances
        let mut groups: Vec<Vec<u32>> = Vec::new();
        if self.noise.seg_merge_prob > 0.0 {
            let mut pairs = std::collections::BTreeSet::new();
            for v in 0..h {
                for u in 0..w {
                    let Some(a) = inst_of((v * w + u) as usize) else { continue };
                    for (du, dv) in [(1, 0), (0, 1)] {
                        if u + du >= w || v + dv >= h {
                            continue;
                        }
                        if let Some(b) = inst_of(((v + dv) * w + u + du) as usize) {
                            if a != b && !is_bg_inst[&a] && !is_bg_inst[&b] {
                                pairs.insert((a.min(b), a.max(b)));
                            }
                        }
                    }
                }
            }
            let mut merged = std::collections::BTreeSet::new();
            for (a, b) in pairs {
                if merged.contains(&a) || merged.contains(&b) {
                    continue;
                }
                if rng.random_bool(self.noise.seg_merge_prob) {
                    merged.insert(a);
                    merged.insert(b);
                    groups.push(vec![a, b]);
                }
            }
            groups.extend(masks.keys().filter(|i| !merged.contains(*i)).map(|&i| vec![i]));
            groups.sort();
        } else {
            groups = masks.keys().map(|&i| vec![i]).collect();
        }

        let mut out = Vec::new();
        for group in groups {
            let mut mask = masks[&group[0]].clone();
            for i in &group[1..] {
                mask = mask.union(&masks[i]);
            }
            let pieces = if self.noise.seg_split_prob > 0.0 && rng.random_bool(self.noise.seg_split_prob) {
                split_mask(&mask, rng)
            } else {
                vec![mask]
            };
            for m in pieces {
                let crop = self.crop_embedding(&m, rendered, rng);
                out.push(SegmentProposal::new(m, crop));
            }
        }
        out
    }

    fn crop_embedding(&self, mask: &Mask, rendered: &Rendered, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let w = self.intrinsics.width;
        let nclass = self.scene.class_names.len();
        let mut own_counts = vec![0u32; nclass];
        for (u, v) in mask.pixels() {
            if let Some(c) = self.class_at(rendered, (v * w + u) as usize) {
                own_counts[c as usize] += 1;
            }
        }
        let own = argmax(&own_counts);
        let (u0, v0, u1, v1) = mask.bbox().expect("segment masks are non-empty");
        let pu = ((u1 - u0 + 1) as f64 * CROP_PADDING).ceil() as u32;
        let pv = ((v1 - v0 + 1) as f64 * CROP_PADDING).ceil() as u32;
        let (cu0, cv0) = (u0.saturating_sub(pu), v0.saturating_sub(pv));
        let (cu1, cv1) = ((u1 + pu).min(w - 1), (v1 + pv).min(self.intrinsics.height - 1));
        let mut ctx_counts = vec![0u32; nclass];
        for v in cv0..=cv1 {
            for u in cu0..=cu1 {
                if mask.get(u, v) {
                    continue;
                }
                if let Some(c) = self.class_at(rendered, (v * w + u) as usize) {
                    if c as usize != own {
                        ctx_counts[c as usize] += 1;
                    }
                }
            }
        }
        let crop_area = ((cu1 - cu0 + 1) * (cv1 - cv0 + 1)) as f64;
        let mix = if ctx_counts.iter().any(|&c| c > 0) {
            (self.noise.crop_context_bleed * crop_area / mask.area() as f64).min(MAX_CONTEXT_MIX)
        } else {
            0.0
        };
        let e_own = &self.scene.class_embeddings[own];
        let mut out: Vec<f32> = if mix > 0.0 {
            let e_ctx = &self.scene.class_embeddings[argmax(&ctx_counts)];
            e_own.iter().zip(e_ctx).map(|(&a, &b)| ((1.0 - mix) * a as f64 + mix * b as f64) as f32).collect()
        } else {
            e_own.clone()
        };
        self.add_noise(&mut out, rng);
        out
    }
}

/// Index of the largest count; ties go to the lower index.
fn argmax(counts: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Cuts a mask by a random line through its pixel centroid. Masks that the
/// line fails to divide are halved in row-major order instead.
fn split_mask(mask: &Mask, rng: &mut ChaCha8Rng) -> Vec<Mask> {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let pixels: Vec<(u32, u32)> = mask.pixels().collect();
    if pixels.len() < 2 {
        return vec![mask.clone()];
    }
    let n = pixels.len() as f64;
    let cu = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cv = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let (s, c) = theta.sin_cos();
    let (w, h) = (mask.width(), mask.height());
    let mut a = Mask::new(w, h);
    let mut b = Mask::new(w, h);
    for &(u, v) in &pixels {
        if (u as f64 - cu) * c + (v as f64 - cv) * s >= 0.0 {
            a.set(u, v, true);
        } else {
            b.set(u, v, true);
        }
    }
    if a.is_empty() || b.is_empty() {
        a = Mask::new(w, h);
        b = Mask::new(w, h);
        let half = pixels.len() / 2;
        for (i, &(u, v)) in pixels.iter().enumerate() {
            if i < half { a.set(u, v, true) } else { b.set(u, v, true) }
        }
    }
    vec![a, b]
}

/// Majority-vote voxelization of every rendered surface pixel.
#[derive(Clone, Debug, Default)]
pub struct GroundTruthBuilder {
    voxel_size: f64,
    votes: HashMap<VoxelKey, SmallVec<[(u16, u32); 2]>>,
}

impl GroundTruthBuilder {
    pub fn new(voxel_size: f64) -> Self {
        Self { voxel_size, votes: HashMap::new() }
    }

    /// Per-pixel `(voxel, class)` pairs for one view, lifted through the
    /// same back-projection the mapper uses.
    pub fn view_votes(
        scene: &SynthScene,
        rendered: &Rendered,
        intrinsics: &CameraIntrinsics,
        pose: &Pose,
        voxel_size: f64,
    ) -> Vec<(VoxelKey, u16)> {
        let w = intrinsics.width;
        let samples: Vec<PixelSample> = rendered
            .hit
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != NO_HIT)
            .map(|(i, _)| PixelSample { u: i as u32 % w, v: i as u32 / w, patch: 0, weight: 1.0 })
            .collect();
        let classes = samples.iter().map(|s| scene.boxes[rendered.hit[(s.v * w + s.u) as usize] as usize].class);
        backproject(&samples, &rendered.depth, intrinsics, pose)
            .into_iter()
            .zip(classes)
            .map(|(p, c)| (voxel_of(p.point, voxel_size), c))
            .collect()
    }

    pub fn add(&mut self, votes: &[(VoxelKey, u16)]) {
        for &(k, c) in votes {
            let slot = self.votes.entry(k).or_default();
            match slot.iter_mut().find(|(cc, _)| *cc == c) {
                Some(e) => e.1 += 1,
                None => slot.push((c, 1)),
            }
        }
    }

    /// Most-voted class per voxel; ties go to the lower class.
    pub fn finish(self) -> GroundTruthVolume {
        let mut gt = GroundTruthVolume::new(self.voxel_size);
        for (k, v) in self.votes {
            let best = v.iter().copied().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).expect("voted voxel");
            gt.labels.insert(k, best.0);
        }
        gt
    }
}

/// Everything a generated stream comes with.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub header: StreamHeader,
    pub prompts: PromptSet,
    pub gt: GroundTruthVolume,
    pub frames: u64,
}

const RENDER_CHUNK: usize = 16;

/// Renders frames in parallel chunks and hands them to `sink` in order.
pub fn generate_with(
    synth: &Synthesizer<'_>,
    trajectory: &[Pose],
    voxel_size: f64,
    mut sink: impl FnMut(FrameRecord) -> Result<()>,
) -> Result<SynthOutput> {
    synth.scene.validate()?;
    synth.noise.validate()?;
    synth.intrinsics.validate()?;
    synth.scene.check_trajectory(trajectory)?;
    if synth.patch_size == 0 {
        return Err(Error::InvalidInput("patch size must be positive".into()));
    }
    let mut gt = GroundTruthBuilder::new(voxel_size);
    for (c, chunk) in trajectory.chunks(RENDER_CHUNK).enumerate() {
        let rendered: Vec<(FrameRecord, Vec<(VoxelKey, u16)>)> = chunk
            .par_iter()
            .enumerate()
            .map(|(j, pose)| {
                let (frame, r) = synth.frame((c * RENDER_CHUNK + j) as u64, pose);
                let votes = GroundTruthBuilder::view_votes(synth.scene, &r, &synth.intrinsics, pose, voxel_size);
                (frame, votes)
            })
            .collect();
        for (frame, votes) in rendered {
            gt.add(&votes);
            sink(frame)?;
        }
    }
    Ok(SynthOutput {
        header: synth.header(),
        prompts: synth.scene.prompts(),
        gt: gt.finish(),
        frames: trajectory.len() as u64,
    })
}

/// Writes the stream to `out` and returns the prompts and ground truth.
pub fn generate_stream<W: Write>(
    synth: &Synthesizer<'_>,
    trajectory: &[Pose],
    voxel_size: f64,
    out: W,
) -> Result<SynthOutput> {
    let mut writer = StreamWriter::new(out, synth.header())?;
    let result = generate_with(synth, trajectory, voxel_size, |f| writer.write_frame(&f))?;
    writer.finish()?;
    Ok(result)
}

/// In-memory variant of [`generate_stream`].
pub fn generate_frames(
    synth: &Synthesizer<'_>,
    trajectory: &[Pose],
    voxel_size: f64,
) -> Result<(Vec<FrameRecord>, SynthOutput)> {
    let mut frames = Vec::with_capacity(trajectory.len());
    let out = generate_with(synth, trajectory, voxel_size, |f| {
        frames.push(f);
        Ok(())
    })?;
    Ok((frames, out))
}

/// Standard test camera: 320×240, f = 240 px, principal point at the center.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(240.0, 240.0, 159.5, 119.5, 320, 240).expect("valid constants")
}
