//! Scene layouts and camera trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Aabb, SceneBox, SynthScene};
use crate::error::{Error, Result};
use crate::frames::derive_seed;
use crate::types::Pose;

pub const CLASS_NAMES: [&str; 12] =
    ["floor", "wall", "chair", "table", "sofa", "cabinet", "bed", "lamp", "monitor", "plant", "shelf", "crate"];
pub const FLOOR: u16 = 0;
pub const WALL: u16 = 1;
const TABLE: u16 = 3;
const MONITOR: u16 = 8;
const CRATE: u16 = 11;

const WALL_THICKNESS: f64 = 0.1;
/// Moves every layout off the voxel grid so box faces do not coincide with
/// voxel boundaries.
const GRID_OFFSET: [f64; 3] = [0.0123, 0.0171, 0.0137];
const ROOM_HEIGHT: f64 = 2.5;
const CAMERA_HEIGHT: f64 = 1.4;

/// Footprint and height ranges `(w, d, h)` per object class.
fn size_range(class: u16) -> [(f64, f64); 3] {
    match class {
        2 => [(0.4, 0.55), (0.4, 0.55), (0.8, 1.0)],
        3 => [(0.8, 1.4), (0.6, 0.9), (0.7, 0.78)],
        4 => [(1.4, 2.0), (0.8, 0.95), (0.7, 0.9)],
        5 => [(0.5, 1.0), (0.4, 0.6), (0.8, 1.8)],
        6 => [(1.4, 2.0), (1.9, 2.1), (0.4, 0.6)],
        7 => [(0.25, 0.35), (0.25, 0.35), (1.2, 1.7)],
        8 => [(0.5, 0.7), (0.08, 0.15), (0.3, 0.45)],
        9 => [(0.3, 0.5), (0.3, 0.5), (0.5, 1.0)],
        10 => [(0.8, 1.2), (0.3, 0.4), (1.5, 2.0)],
        _ => [(0.3, 0.6), (0.3, 0.6), (0.3, 0.6)],
    }
}

/// Classes that stand on the floor.
const FLOOR_CLASSES: [u16; 9] = [2, 3, 4, 5, 6, 7, 9, 10, 11];

fn class_table() -> (Vec<String>, Vec<bool>) {
    (
        CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        (0..CLASS_NAMES.len() as u16).map(|c| c == FLOOR || c == WALL).collect(),
    )
}

struct Builder {
    boxes: Vec<SceneBox>,
    next_instance: u32,
}

impl Builder {
    fn new() -> Self {
        Self { boxes: Vec::new(), next_instance: 0 }
    }

    fn add(&mut self, aabb: Aabb, class: u16) {
        self.boxes.push(SceneBox { aabb, class, instance: self.next_instance });
        self.next_instance += 1;
    }

    /// Floor slab and four walls around the interior `[x0, x1] × [y0, y1]`.
    fn room_shell(&mut self, x0: f64, x1: f64, y0: f64, y1: f64) {
        let t = WALL_THICKNESS;
        self.add(Aabb::new([x0 - t, y0 - t, -t], [x1 + t, y1 + t, 0.0]), FLOOR);
        self.add(Aabb::new([x0 - t, y0 - t, 0.0], [x0, y1 + t, ROOM_HEIGHT]), WALL);
        self.add(Aabb::new([x1, y0 - t, 0.0], [x1 + t, y1 + t, ROOM_HEIGHT]), WALL);
        self.add(Aabb::new([x0, y0 - t, 0.0], [x1, y0, ROOM_HEIGHT]), WALL);
        self.add(Aabb::new([x0, y1, 0.0], [x1, y1 + t, ROOM_HEIGHT]), WALL);
    }

    fn objects(&self) -> impl Iterator<Item = &SceneBox> {
        self.boxes.iter().filter(|b| b.class != FLOOR && b.class != WALL)
    }

    fn free(&self, candidate: &Aabb, gap: f64) -> bool {
        self.objects().all(|b| b.aabb.gap(candidate) >= gap)
    }

    /// Tries to drop a random floor object inside `region` (xy only).
    fn place_floor_object(
        &mut self,
        rng: &mut ChaCha8Rng,
        region: ([f64; 2], [f64; 2]),
        gap: f64,
        keep_out: &dyn Fn(&Aabb) -> bool,
        classes: &[u16],
    ) -> Option<Aabb> {
        for _ in 0..200 {
            let class = classes[rng.random_range(0..classes.len())];
            let [rw, rd, rh] = size_range(class);
            let (mut w, mut d) = (rng.random_range(rw.0..rw.1), rng.random_range(rd.0..rd.1));
            if rng.random_bool(0.5) {
                std::mem::swap(&mut w, &mut d);
            }
            let h = rng.random_range(rh.0..rh.1);
            let (lo, hi) = region;
            if hi[0] - lo[0] < w || hi[1] - lo[1] < d {
                continue;
            }
            let x = rng.random_range(lo[0]..=hi[0] - w);
            let y = rng.random_range(lo[1]..=hi[1] - d);
            let aabb = Aabb::new([x, y, 0.0], [x + w, y + d, h]);
            if keep_out(&aabb) || !self.free(&aabb, gap) {
                continue;
            }
            self.add(aabb, class);
            return Some(aabb);
        }
        None
    }

    /// Puts a monitor or crate on top of a table.
    fn stack_on(&mut self, rng: &mut ChaCha8Rng, base: &Aabb) {
        let class = if rng.random_bool(0.5) { MONITOR } else { CRATE };
        let [rw, rd, rh] = size_range(class);
        let w = rng.random_range(rw.0..rw.1).min(base.max[0] - base.min[0] - 0.1);
        let d = rng.random_range(rd.0..rd.1).min(base.max[1] - base.min[1] - 0.1);
        let h = rng.random_range(rh.0..rh.1);
        // slack clamps at zero so a clamped size cannot invert the range
        let sx = (base.max[0] - base.min[0] - 0.1 - w).max(0.0);
        let sy = (base.max[1] - base.min[1] - 0.1 - d).max(0.0);
        let x = base.min[0] + 0.05 + rng.random_range(0.0..=sx);
        let y = base.min[1] + 0.05 + rng.random_range(0.0..=sy);
        let z = base.max[2];
        self.add(Aabb::new([x, y, z], [x + w, y + d, z + h]), class);
    }
}

fn scene_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5CE4E, tag]))
}

fn off_grid(mut scene: SynthScene, traj: Vec<Pose>) -> (SynthScene, Vec<Pose>) {
    let shift = |p: [f64; 3]| [p[0] + GRID_OFFSET[0], p[1] + GRID_OFFSET[1], p[2] + GRID_OFFSET[2]];
    for b in &mut scene.boxes {
        b.aabb = Aabb::new(shift(b.aabb.min), shift(b.aabb.max));
    }
    scene.bounds = Aabb::new(shift(scene.bounds.min), shift(scene.bounds.max));
    let traj = traj.into_iter().map(|p| Pose { translation: shift(p.translation), ..p }).collect();
    (scene, traj)
}

fn camera(eye: [f64; 3], yaw: f64, pitch_drop: f64) -> Pose {
    let target = [eye[0] + 3.0 * yaw.cos(), eye[1] + 3.0 * yaw.sin(), eye[2] - pitch_drop];
    Pose::look_at(eye, target).expect("non-vertical view")
}

/// One crate-sized box in empty space, orbited by a camera looking at it.
pub fn single_box(dim: usize, seed: u64) -> Result<(SynthScene, Vec<Pose>)> {
    let (names, bg) = class_table();
    let boxes = vec![SceneBox { aabb: Aabb::new([-0.3, -0.3, -0.3], [0.3, 0.3, 0.3]), class: CRATE, instance: 0 }];
    let scene = SynthScene::new(boxes, names, bg, Aabb::new([-5.0; 3], [5.0; 3]), dim, seed)?;
    let traj = (0..60)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 60.0;
            Pose::look_at([2.0 * a.cos(), 2.0 * a.sin(), 0.8], [0.0, 0.0, 0.0]).expect("valid view")
        })
        .collect();
    Ok(off_grid(scene, traj))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrbitOptions {
    pub frames: usize,
    pub objects: usize,
    /// Keeps objects apart and unstacked, so no two objects touch.
    pub separated: bool,
    pub turns: f64,
}

impl Default for OrbitOptions {
    fn default() -> Self {
        Self { frames: 120, objects: 12, separated: false, turns: 1.0 }
    }
}

/// A 6 m square room with furniture along the walls; the camera circles
/// the middle looking outward.
pub fn orbit_room(dim: usize, seed: u64, opts: OrbitOptions) -> Result<(SynthScene, Vec<Pose>)> {
    if opts.frames == 0 {
        return Err(Error::InvalidInput("orbit needs at least one frame".into()));
    }
    let half = 3.0;
    let mut rng = scene_rng(seed, 1);
    let mut b = Builder::new();
    b.room_shell(-half, half, -half, half);
    let gap = if opts.separated { 0.3 } else { 0.1 };
    // keep the camera circle clear
    let keep_out = |a: &Aabb| {
        let dx = a.min[0].max(-a.max[0]).max(0.0);
        let dy = a.min[1].max(-a.max[1]).max(0.0);
        dx.hypot(dy) < 1.4
    };
    let region = ([-half + 0.1, -half + 0.1], [half - 0.1, half - 0.1]);
    for _ in 0..opts.objects {
        if let Some(a) = b.place_floor_object(&mut rng, region, gap, &keep_out, &FLOOR_CLASSES) {
            let is_table = b.boxes.last().map(|x| x.class) == Some(TABLE);
            if is_table && !opts.separated && rng.random_bool(0.6) {
                b.stack_on(&mut rng, &a);
            }
        }
    }
    let (names, bg) = class_table();
    let bounds = Aabb::new([-half, -half, 0.0], [half, half, ROOM_HEIGHT]);
    let scene = SynthScene::new(b.boxes, names, bg, bounds, dim, seed)?;
    let traj = (0..opts.frames)
        .map(|i| {
            let phi = opts.turns * std::f64::consts::TAU * i as f64 / opts.frames as f64;
            camera([0.5 * phi.cos(), 0.5 * phi.sin(), CAMERA_HEIGHT], phi, 0.9)
        })
        .collect();
    Ok(off_grid(scene, traj))
}

/// Three 5 m rooms in a row joined by doorways. The camera walks down the
/// middle to the far end and back, sweeping its heading side to side.
pub fn apartment(dim: usize, seed: u64) -> Result<(SynthScene, Vec<Pose>)> {
    let (len, width) = (15.0, 5.0);
    let (door_lo, door_hi) = (2.0, 3.0);
    let mut rng = scene_rng(seed, 2);
    let mut b = Builder::new();
    b.room_shell(0.0, len, 0.0, width);
    for x in [5.0, 10.0] {
        let t = WALL_THICKNESS / 2.0;
        b.add(Aabb::new([x - t, 0.0, 0.0], [x + t, door_lo, ROOM_HEIGHT]), WALL);
        b.add(Aabb::new([x - t, door_hi, 0.0], [x + t, width, ROOM_HEIGHT]), WALL);
    }
    for room in 0..3 {
        let x0 = room as f64 * 5.0 + 0.15;
        let x1 = x0 + 4.7;
        for _ in 0..7 {
            let side = if rng.random_bool(0.5) { ([x0, 0.1], [x1, 1.7]) } else { ([x0, 3.3], [x1, width - 0.1]) };
            if let Some(a) = b.place_floor_object(&mut rng, side, 0.1, &|_| false, &FLOOR_CLASSES) {
                if b.boxes.last().map(|x| x.class) == Some(TABLE) && rng.random_bool(0.6) {
                    b.stack_on(&mut rng, &a);
                }
            }
        }
    }
    let (names, bg) = class_table();
    let scene = SynthScene::new(b.boxes, names, bg, Aabb::new([0.0, 0.0, 0.0], [len, width, ROOM_HEIGHT]), dim, seed)?;

    let (start, end, step) = (0.6, len - 0.6, 0.05);
    let n = ((end - start) / step).round() as usize;
    let sweep = |s: f64| 1.0 * (std::f64::consts::TAU * s / 2.0).sin();
    let mut traj = Vec::with_capacity(2 * n + 2);
    for i in 0..=n {
        let s = i as f64 * step;
        traj.push(camera([start + s, width / 2.0, CAMERA_HEIGHT], sweep(s), 0.9));
    }
    for i in 0..=n {
        let s = i as f64 * step;
        traj.push(camera([end - s, width / 2.0, CAMERA_HEIGHT], std::f64::consts::PI + sweep(s), 0.9));
    }
    Ok(off_grid(scene, traj))
}

/// A straight 2.4 m wide corridor of the given length with objects along
/// both walls; the camera walks its length looking ahead.
pub fn corridor(length: f64, objects_per_meter: f64, dim: usize, seed: u64) -> Result<(SynthScene, Vec<Pose>)> {
    if !(length > 0.0 && length.is_finite()) {
        return Err(Error::InvalidInput(format!("corridor length must be positive, got {length}")));
    }
    if !(objects_per_meter >= 0.0 && objects_per_meter.is_finite()) {
        return Err(Error::InvalidInput(format!("invalid object density {objects_per_meter}")));
    }
    let width = 2.4;
    let mut rng = scene_rng(seed, 3);
    let mut b = Builder::new();
    b.room_shell(0.0, length, 0.0, width);
    let count = (length * objects_per_meter).round() as usize;
    let classes = [2, 5, 7, 9, 10, 11];
    for _ in 0..count {
        let side = if rng.random_bool(0.5) { ([0.05, 0.05], [length - 0.05, 0.65]) } else { ([0.05, width - 0.65], [length - 0.05, width - 0.05]) };
        b.place_floor_object(&mut rng, side, 0.1, &|_| false, &classes);
    }
    let (names, bg) = class_table();
    let scene = SynthScene::new(b.boxes, names, bg, Aabb::new([0.0, 0.0, 0.0], [length, width, ROOM_HEIGHT]), dim, seed)?;
    let (start, end, step) = (0.3_f64.min(length / 2.0), (length - 0.3).max(length / 2.0), 0.1);
    let n = ((end - start) / step).floor() as usize;
    let traj = (0..=n).map(|i| camera([start + i as f64 * step, width / 2.0, CAMERA_HEIGHT], 0.0, 0.6)).collect();
    Ok(off_grid(scene, traj))
}
