//! 3D semantic segmentation metrics over voxelized ground truth.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::query::PromptSet;
use crate::types::VoxelKey;

/// Voxel-aligned class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruthVolume {
    pub voxel_size: f64,
    pub labels: BTreeMap<VoxelKey, u16>,
}

impl GroundTruthVolume {
    pub fn new(voxel_size: f64) -> Self {
        Self { voxel_size, labels: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keeps only voxels present in `keys`.
    pub fn restricted_to<V>(&self, keys: &BTreeMap<VoxelKey, V>) -> Self {
        Self {
            voxel_size: self.voxel_size,
            labels: self.labels.iter().filter(|(k, _)| keys.contains_key(k)).map(|(k, v)| (*k, *v)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentationReport {
    pub labels: Vec<String>,
    /// `None` for classes outside the averaging set.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub fmiou: f64,
    /// Mean per-class recall.
    pub acc: f64,
    /// Rows: gt class; columns: predicted class, last column "unpredicted".
    pub confusion: Vec<Vec<u64>>,
    pub exclude_background: bool,
    pub evaluated_voxels: u64,
}

/// Scores predictions against ground truth.
///
/// Only gt voxels are scored. A gt voxel without a prediction is a false
/// negative for its class. With `exclude_background`, background classes
/// leave the averaging set and their gt voxels leave the domain.
pub fn evaluate(
    predictions: &BTreeMap<VoxelKey, u16>,
    gt: &GroundTruthVolume,
    prompts: &PromptSet,
    exclude_background: bool,
) -> Result<SegmentationReport> {
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let c = prompts.len();
    let is_bg = |k: usize| exclude_background && prompts.background[k];
    let mut confusion = vec![vec![0u64; c + 1]; c];
    let mut evaluated = 0u64;
    for (key, &g) in &gt.labels {
        let g = g as usize;
        if g >= c {
            return Err(Error::InvalidInput(format!("gt class {g} out of range at {key}")));
        }
        if is_bg(g) {
            continue;
        }
        let col = match predictions.get(key) {
            Some(&p) if (p as usize) < c => p as usize,
            Some(&p) => return Err(Error::InvalidInput(format!("predicted class {p} out of range"))),
            None => c,
        };
        confusion[g][col] += 1;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::EmptyGroundTruth);
    }

    let mut per_class_iou = vec![None; c];
    let (mut iou_sum, mut fw_sum, mut freq_sum, mut recall_sum, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for k in 0..c {
        let gt_count: u64 = confusion[k].iter().sum();
        if gt_count == 0 || is_bg(k) {
            continue;
        }
        let tp = confusion[k][k];
        let fp: u64 = (0..c).filter(|&r| r != k).map(|r| confusion[r][k]).sum();
        let fn_ = gt_count - tp;
        let iou = tp as f64 / (tp + fp + fn_) as f64;
        per_class_iou[k] = Some(iou);
        iou_sum += iou;
        fw_sum += gt_count as f64 * iou;
        freq_sum += gt_count as f64;
        recall_sum += tp as f64 / gt_count as f64;
        n += 1;
    }
    Ok(SegmentationReport {
        labels: prompts.labels.clone(),
        per_class_iou,
        miou: iou_sum / n as f64,
        fmiou: fw_sum / freq_sum,
        acc: recall_sum / n as f64,
        confusion,
        exclude_background,
        evaluated_voxels: evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompts(n: usize, bg: &[usize]) -> PromptSet {
        PromptSet::new(
            (0..n).map(|i| format!("c{i}")).collect(),
            vec![vec![1.0]; n],
            (0..n).map(|i| bg.contains(&i)).collect(),
        )
        .unwrap()
    }

    fn key(i: i64) -> VoxelKey {
        VoxelKey::new(i, 0, 0)
    }

    #[test]
    fn perfect_prediction() {
        let mut gt = GroundTruthVolume::new(0.05);
        for i in 0..12 {
            gt.labels.insert(key(i), (i % 3) as u16);
        }
        let r = evaluate(&gt.labels, &gt, &prompts(3, &[]), false).unwrap();
        assert_eq!((r.miou, r.fmiou, r.acc), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_class_hand_example() {
        let mut gt = GroundTruthVolume::new(0.05);
        let mut pred = BTreeMap::new();
        for i in 0..10 {
            gt.labels.insert(key(i), 0);
            pred.insert(key(i), 0);
        }
        for i in 10..20 {
            gt.labels.insert(key(i), 1);
            pred.insert(key(i), if i < 15 { 1 } else { 0 });
        }
        let r = evaluate(&pred, &gt, &prompts(2, &[]), false).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(10.0 / 15.0), Some(0.5)]);
        assert!((r.miou - (10.0 / 15.0 + 0.5) / 2.0).abs() < 1e-12);
        assert!((r.miou - 0.5833).abs() < 1e-4);
        assert!((r.fmiou - r.miou).abs() < 1e-12);
        assert_eq!(r.acc, 0.75);
    }

    #[test]
    fn excluding_wrong_background_raises_miou() {
        // class 0 background (all predicted as 1); classes 1 and 2 mostly right
        let mut gt = GroundTruthVolume::new(0.05);
        let mut pred = BTreeMap::new();
        for i in 0..6 {
            gt.labels.insert(key(i), 0);
            pred.insert(key(i), 1);
        }
        for i in 6..12 {
            gt.labels.insert(key(i), 1);
            pred.insert(key(i), 1);
        }
        for i in 12..18 {
            gt.labels.insert(key(i), 2);
            pred.insert(key(i), if i < 16 { 2 } else { 1 });
        }
        let p = prompts(3, &[0]);
        let with = evaluate(&pred, &gt, &p, false).unwrap();
        let without = evaluate(&pred, &gt, &p, true).unwrap();
        // with bg: IoU0 = 0, IoU1 = 6/14, IoU2 = 4/6
        assert!((with.miou - (0.0 + 6.0 / 14.0 + 4.0 / 6.0) / 3.0).abs() < 1e-12);
        // without: bg voxels leave the domain, IoU1 = 6/8, IoU2 = 4/6
        assert!((without.miou - (6.0 / 8.0 + 4.0 / 6.0) / 2.0).abs() < 1e-12);
        assert!(without.miou > with.miou);
        assert_eq!(without.per_class_iou[0], None);
    }

    #[test]
    fn unpredicted_voxels_are_false_negatives_and_extra_predictions_ignored() {
        let mut gt = GroundTruthVolume::new(0.05);
        gt.labels.insert(key(0), 0);
        gt.labels.insert(key(1), 0);
        let mut pred = BTreeMap::new();
        pred.insert(key(0), 0);
        pred.insert(key(99), 0);
        let r = evaluate(&pred, &gt, &prompts(1, &[]), false).unwrap();
        assert_eq!(r.miou, 0.5);
        assert_eq!(r.acc, 0.5);
    }

    #[test]
    fn empty_gt_is_error() {
        let gt = GroundTruthVolume::new(0.05);
        assert!(matches!(evaluate(&BTreeMap::new(), &gt, &prompts(1, &[]), false), Err(Error::EmptyGroundTruth)));
    }
}
