//! Exact ray / axis-aligned box intersection.

/// Axis-aligned box `[min, max]` in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|a| !(self.max[a] > self.min[a]) || !self.min[a].is_finite() || !self.max[a].is_finite())
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] < other.max[a] && other.min[a] < self.max[a])
    }

    /// Gap between the two boxes along their most separated axis; negative
    /// when they overlap.
    pub fn gap(&self, other: &Aabb) -> f64 {
        (0..3)
            .map(|a| (other.min[a] - self.max[a]).max(self.min[a] - other.max[a]))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Entry distance of the ray `origin + t·dir` for `t > t_min`, slab method.
    pub fn ray_entry(&self, origin: [f64; 3], inv_dir: [f64; 3], t_min: f64) -> Option<f64> {
        let mut t0 = t_min;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let (mut near, mut far) = ((self.min[a] - origin[a]) * inv_dir[a], (self.max[a] - origin[a]) * inv_dir[a]);
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            // NaN from 0·∞ (ray in the slab plane) leaves the interval unchanged.
            if near > t0 {
                t0 = near;
            }
            if far < t1 {
                t1 = far;
            }
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

/// Nearest box hit along the ray; returns `(t, index)`.
pub fn first_hit(boxes: &[Aabb], origin: [f64; 3], dir: [f64; 3], t_min: f64) -> Option<(f64, usize)> {
    let inv = [1.0 / dir[0], 1.0 / dir[1], 1.0 / dir[2]];
    let mut best: Option<(f64, usize)> = None;
    for (i, b) in boxes.iter().enumerate() {
        if let Some(t) = b.ray_entry(origin, inv, t_min) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hits_front_face() {
        let b = Aabb::new([1.0, -1.0, -1.0], [2.0, 1.0, 1.0]);
        let hit = first_hit(&[b], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], 0.0).unwrap();
        assert_eq!(hit, (1.0, 0));
        assert!(first_hit(&[b], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0], 0.0).is_none());
        assert!(first_hit(&[b], [0.0, 2.0, 0.0], [1.0, 0.0, 0.0], 0.0).is_none());
    }

    #[test]
    fn nearest_box_wins_and_inside_origin_exits() {
        let near = Aabb::new([1.0, -1.0, -1.0], [2.0, 1.0, 1.0]);
        let far = Aabb::new([3.0, -1.0, -1.0], [4.0, 1.0, 1.0]);
        assert_eq!(first_hit(&[far, near], [0.0; 3], [1.0, 0.1, 0.0], 0.0).unwrap().1, 1);
        // origin inside: entry clamps to t_min
        assert_eq!(near.ray_entry([1.5, 0.0, 0.0], [1.0, f64::INFINITY, f64::INFINITY], 1e-9), Some(1e-9));
    }

    #[test]
    fn oblique_ray_distance() {
        let b = Aabb::new([-1.0, -1.0, 2.0], [1.0, 1.0, 3.0]);
        let dir = [0.3, -0.2, 1.0];
        let (t, _) = first_hit(&[b], [0.0; 3], dir, 0.0).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
    }
}
