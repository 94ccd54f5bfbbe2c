//! Shared value types: embeddings, voxel addressing, poses and intrinsics.

use std::fmt;

use crate::error::{Error, Result};

/// A semantic embedding in the joint vision-language space.
///
/// Entries are always finite; the length is fixed per session.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite embedding entry at index {pos}"
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

pub(crate) fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity `a·b / (|a||b|)`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "embedding length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Integer grid coordinate shared by the dense and instance layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VoxelKey {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl VoxelKey {
    pub const fn new(ix: i64, iy: i64, iz: i64) -> Self {
        Self { ix, iy, iz }
    }

    /// World-space center of the cell.
    pub fn center(&self, voxel_size: f64) -> [f64; 3] {
        [
            (self.ix as f64 + 0.5) * voxel_size,
            (self.iy as f64 + 0.5) * voxel_size,
            (self.iz as f64 + 0.5) * voxel_size,
        ]
    }
}

impl fmt::Display for VoxelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.ix, self.iy, self.iz)
    }
}

/// Floor-quantizes a world point onto the voxel grid.
pub fn world_to_voxel(point: [f64; 3], voxel_size: f64) -> Result<VoxelKey> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::InvalidInput(format!("voxel size {voxel_size} must be > 0")));
    }
    if point.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite point {point:?}")));
    }
    Ok(voxel_of(point, voxel_size))
}

/// Unchecked variant for hot loops whose inputs are already validated.
#[inline]
pub(crate) fn voxel_of(point: [f64; 3], voxel_size: f64) -> VoxelKey {
    VoxelKey {
        ix: (point[0] / voxel_size).floor() as i64,
        iy: (point[1] / voxel_size).floor() as i64,
        iz: (point[2] / voxel_size).floor() as i64,
    }
}

pub type Mat3 = [[f64; 3]; 3];

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

const ORTHONORMAL_TOL: f64 = 1e-5;

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: Mat3, translation: [f64; 3]) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(translation: [f64; 3]) -> Self {
        Self { translation, ..Self::identity() }
    }

    /// Rotation of `angle` radians about a unit `axis` (Rodrigues).
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Self {
            rotation: [
                [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
                [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
                [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
            ],
            translation,
        }
    }

    /// Camera looking from `eye` towards `target` with world +z up.
    ///
    /// Camera axes follow the pinhole convention: x right, y down, z forward.
    pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Result<Self> {
        let fwd = normalize3(sub3(target, eye))
            .ok_or_else(|| Error::InvalidInput("look_at eye equals target".into()))?;
        let right = normalize3(cross3(fwd, [0.0, 0.0, 1.0]))
            .ok_or_else(|| Error::InvalidInput("look_at direction parallel to up".into()))?;
        let down = cross3(fwd, right);
        Ok(Self {
            rotation: [
                [right[0], down[0], fwd[0]],
                [right[1], down[1], fwd[1]],
                [right[2], down[2], fwd[2]],
            ],
            translation: eye,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if r.iter().flatten().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pose".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > ORTHONORMAL_TOL {
                    return Err(Error::InvalidInput("rotation is not orthonormal".into()));
                }
            }
        }
        if (det3(r) - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidInput("rotation determinant is not +1".into()));
        }
        Ok(())
    }

    pub fn position(&self) -> [f64; 3] {
        self.translation
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// World point into the camera frame.
    pub fn inverse_transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let d = sub3(p, self.translation);
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        let d = sub3(self.translation, other.translation);
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }

    /// Geodesic angle of the relative rotation `R_selfᵀ · R_other`.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let a = &self.rotation;
        let b = &other.rotation;
        // trace(Aᵀ B) = Σ_ij A_ij B_ij
        let trace: f64 = (0..3).flat_map(|i| (0..3).map(move |j| a[i][j] * b[i][j])).sum();
        ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2],
        ]
    }

    pub fn from_row_major(m: [f64; 12]) -> Result<Self> {
        Self::new(
            [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            [m[3], m[7], m[11]],
        )
    }
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize3(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 1e-12).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

fn det3(r: &Mat3) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f32, fy: f32, cx: f32, cy: f32, width: u32, height: u32) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && (self.cx as f64) < self.width as f64
            && (self.cy as f64) < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Camera-frame point to (u, v, depth).
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let z = p[2];
        (
            p[0] * self.fx as f64 / z + self.cx as f64,
            p[1] * self.fy as f64 / z + self.cy as f64,
            z,
        )
    }

    /// Pixel and depth to a camera-frame point.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [
            (u - self.cx as f64) * z / self.fx as f64,
            (v - self.cy as f64) * z / self.fy as f64,
            z,
        ]
    }
}
