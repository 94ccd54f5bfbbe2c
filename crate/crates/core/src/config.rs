//! Mapping parameters and their flat `key = value` file form.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Motion thresholds for keyframe gating.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionThresholds {
    pub translation: f64,
    pub rotation: f64,
}

/// Which hypothesis voxels contribute precision to a windowed instance fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvidenceScope {
    /// Only hypothesis voxels whose center lies inside the window.
    InWindow,
    /// Every hypothesis voxel of the instance; out-of-window voxels carry no dense weight.
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapConfig {
    pub voxel_size: f64,
    pub embedding_dim: usize,
    pub max_hypotheses: usize,
    pub iou_threshold: f64,
    pub lambda: f64,
    pub dense_motion: MotionThresholds,
    pub instance_motion: MotionThresholds,
    pub dense_pixels_per_patch: usize,
    pub instance_pixels_per_patch: usize,
    /// Sliding-window radius in meters; `f64::INFINITY` disables pruning.
    pub window_radius: f64,
    pub fusion_period: u32,
    pub patch_size: u32,
    pub mask_min_area_frac: f64,
    pub mask_border_contact_frac: f64,
    pub crop_padding_frac: f64,
    pub evidence_gating: bool,
    pub evidence_scope: EvidenceScope,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            embedding_dim: 64,
            max_hypotheses: 3,
            iou_threshold: 0.2,
            lambda: 1.0,
            dense_motion: MotionThresholds { translation: 0.08, rotation: 0.06 },
            instance_motion: MotionThresholds { translation: 0.14, rotation: 0.11 },
            dense_pixels_per_patch: 5,
            instance_pixels_per_patch: 9,
            window_radius: 6.0,
            fusion_period: 5,
            patch_size: 16,
            mask_min_area_frac: 0.002,
            mask_border_contact_frac: 0.15,
            crop_padding_frac: 0.05,
            evidence_gating: true,
            evidence_scope: EvidenceScope::InWindow,
        }
    }
}

impl MapConfig {
    /// Defaults tuned for the NARADIO encoder pair (λ = 1).
    pub fn naradio() -> Self {
        Self::default()
    }

    /// Defaults tuned for the CLIP-DINOiser / OpenCLIP pair (λ = 5).
    pub fn clip_dinoiser() -> Self {
        Self { lambda: 5.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return fail("voxel_size must be > 0");
        }
        if self.embedding_dim == 0 {
            return fail("embedding_dim must be >= 1");
        }
        if self.max_hypotheses == 0 {
            return fail("max_hypotheses must be >= 1");
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return fail("iou_threshold must be in (0, 1]");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be > 0");
        }
        for m in [self.dense_motion, self.instance_motion] {
            if !(m.translation >= 0.0 && m.rotation >= 0.0) {
                return fail("motion thresholds must be >= 0");
            }
        }
        if self.dense_pixels_per_patch == 0 || self.instance_pixels_per_patch == 0 {
            return fail("pixels_per_patch must be >= 1");
        }
        if !(self.window_radius > 0.0) {
            return fail("window_radius must be > 0 or inf");
        }
        if self.fusion_period == 0 {
            return fail("fusion_period must be >= 1");
        }
        if self.patch_size == 0 {
            return fail("patch_size must be >= 1");
        }
        for f in [self.mask_min_area_frac, self.mask_border_contact_frac, self.crop_padding_frac] {
            if !(0.0..=1.0).contains(&f) {
                return fail("fractions must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Applies a single `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value {value:?} for {key}"));
        let f = |v: &str| parse_f64(v).ok_or_else(bad);
        let u = |v: &str| v.parse::<usize>().map_err(|_| bad());
        match key {
            "voxel_size" => self.voxel_size = f(value)?,
            "embedding_dim" => self.embedding_dim = u(value)?,
            "max_hypotheses" => self.max_hypotheses = u(value)?,
            "iou_threshold" => self.iou_threshold = f(value)?,
            "lambda" => self.lambda = f(value)?,
            "dense_translation_threshold" => self.dense_motion.translation = f(value)?,
            "dense_rotation_threshold" => self.dense_motion.rotation = f(value)?,
            "instance_translation_threshold" => self.instance_motion.translation = f(value)?,
            "instance_rotation_threshold" => self.instance_motion.rotation = f(value)?,
            "dense_pixels_per_patch" => self.dense_pixels_per_patch = u(value)?,
            "instance_pixels_per_patch" => self.instance_pixels_per_patch = u(value)?,
            "window_radius" => self.window_radius = f(value)?,
            "fusion_period" => self.fusion_period = value.parse().map_err(|_| bad())?,
            "patch_size" => self.patch_size = value.parse().map_err(|_| bad())?,
            "mask_min_area_frac" => self.mask_min_area_frac = f(value)?,
            "mask_border_contact_frac" => self.mask_border_contact_frac = f(value)?,
            "crop_padding_frac" => self.crop_padding_frac = f(value)?,
            "evidence_gating" => self.evidence_gating = value.parse().map_err(|_| bad())?,
            "evidence_scope" => {
                self.evidence_scope = match value {
                    "in_window" => EvidenceScope::InWindow,
                    "global" => EvidenceScope::Global,
                    _ => return Err(bad()),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a flat key-value file over the defaults. `#` starts a comment.
    ///
    /// Returns the config plus the list of keys that were set explicitly.
    pub fn parse_kv(text: &str) -> Result<(Self, Vec<String>)> {
        let mut cfg = Self::default();
        let mut keys = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .or_else(|| line.split_once(char::is_whitespace))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let k = k.trim();
            cfg.set(k, v.trim())?;
            keys.push(k.to_string());
        }
        cfg.validate()?;
        Ok((cfg, keys))
    }

    /// Lossless text form; floats use the shortest round-trip representation.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("voxel_size", fmt_f64(self.voxel_size));
        put("embedding_dim", self.embedding_dim.to_string());
        put("max_hypotheses", self.max_hypotheses.to_string());
        put("iou_threshold", fmt_f64(self.iou_threshold));
        put("lambda", fmt_f64(self.lambda));
        put("dense_translation_threshold", fmt_f64(self.dense_motion.translation));
        put("dense_rotation_threshold", fmt_f64(self.dense_motion.rotation));
        put("instance_translation_threshold", fmt_f64(self.instance_motion.translation));
        put("instance_rotation_threshold", fmt_f64(self.instance_motion.rotation));
        put("dense_pixels_per_patch", self.dense_pixels_per_patch.to_string());
        put("instance_pixels_per_patch", self.instance_pixels_per_patch.to_string());
        put("window_radius", fmt_f64(self.window_radius));
        put("fusion_period", self.fusion_period.to_string());
        put("patch_size", self.patch_size.to_string());
        put("mask_min_area_frac", fmt_f64(self.mask_min_area_frac));
        put("mask_border_contact_frac", fmt_f64(self.mask_border_contact_frac));
        put("crop_padding_frac", fmt_f64(self.crop_padding_frac));
        put("evidence_gating", self.evidence_gating.to_string());
        put(
            "evidence_scope",
            match self.evidence_scope {
                EvidenceScope::InWindow => "in_window",
                EvidenceScope::Global => "global",
            }
            .to_string(),
        );
        s
    }
}

/// Accepts `inf` / `infinity` in addition to ordinary floats.
pub fn parse_f64(v: &str) -> Option<f64> {
    match v.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "+inf" => Some(f64::INFINITY),
        other => other.parse().ok(),
    }
}

fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_parameters() {
        let c = MapConfig::default();
        assert_eq!(c.voxel_size, 0.05);
        assert_eq!(c.max_hypotheses, 3);
        assert_eq!(c.iou_threshold, 0.2);
        assert_eq!(c.lambda, 1.0);
        assert_eq!(MapConfig::clip_dinoiser().lambda, 5.0);
        assert_eq!(c.dense_motion, MotionThresholds { translation: 0.08, rotation: 0.06 });
        assert_eq!(c.instance_motion, MotionThresholds { translation: 0.14, rotation: 0.11 });
        assert_eq!((c.dense_pixels_per_patch, c.instance_pixels_per_patch), (5, 9));
        assert_eq!(c.window_radius, 6.0);
        assert_eq!(c.fusion_period, 5);
        c.validate().unwrap();
    }

    #[test]
    fn kv_roundtrip() {
        let c = MapConfig {
            window_radius: f64::INFINITY,
            lambda: 0.1 + 0.2,
            evidence_scope: EvidenceScope::Global,
            ..MapConfig::default()
        };
        let (back, keys) = MapConfig::parse_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert_eq!(keys.len(), 19);
    }

    #[test]
    fn kv_errors() {
        assert!(MapConfig::parse_kv("nope = 1").is_err());
        assert!(MapConfig::parse_kv("lambda = abc").is_err());
        assert!(MapConfig::parse_kv("lambda = -1").is_err());
        let (c, _) = MapConfig::parse_kv("# comment\nwindow_radius inf\n").unwrap();
        assert!(c.window_radius.is_infinite());
    }
}
