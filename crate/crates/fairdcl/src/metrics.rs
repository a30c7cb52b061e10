//! Segmentation accuracy and group-parity metrics: per-class IoU from
//! pixel confusion counts, group means, the two-group ratio gap and the
//! K-group distance-from-parity, plus per-group class distributions.

use ndarray::Array2;

use crate::data::ImageTile;
use crate::error::{FairdclError, Result};

/// Pixel confusion counts for one class; `iou` is None when the class is
/// absent from both masks (0/0), and such entries are excluded from means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassIou {
    pub tp: u64,
    pub fp: u64,
    pub fne: u64,
    pub iou: Option<f64>,
}

fn iou_of(tp: u64, fp: u64, fne: u64) -> Option<f64> {
    let denom = tp + fp + fne;
    if denom == 0 {
        None
    } else {
        Some(tp as f64 / denom as f64)
    }
}

/// Per-class TP/FP/FN/IoU over all pixels of one mask pair.
pub fn confusion_iou(pred: &Array2<u8>, gt: &Array2<u8>, num_classes: usize) -> Result<Vec<ClassIou>> {
    if pred.dim() != gt.dim() {
        return Err(FairdclError::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fne = vec![0u64; num_classes];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(FairdclError::Metric(format!(
                "class index out of range (num_classes = {num_classes})"
            )));
        }
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fne[g] += 1;
        }
    }
    Ok((0..num_classes)
        .map(|c| ClassIou {
            tp: tp[c],
            fp: fp[c],
            fne: fne[c],
            iou: iou_of(tp[c], fp[c], fne[c]),
        })
        .collect())
}

/// μ_g: arithmetic mean over the defined class IoUs only.
pub fn group_mean_iou(ious: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = ious.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(FairdclError::Metric(
            "all class IoUs undefined for this group".into(),
        ));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Two-group gap: |μ1 − μ2| / min(μ1, μ2).
pub fn diff_two(mu1: f64, mu2: f64) -> Result<f64> {
    if mu1 <= 0.0 || mu2 <= 0.0 {
        return Err(FairdclError::Metric(format!(
            "group means must be positive, got ({mu1}, {mu2})"
        )));
    }
    Ok((mu1 - mu2).abs() / mu1.min(mu2))
}

/// K-group distance from parity: (K/(K−1)) Σ_i |μ_i/Σμ − 1/K|; in [0, 2].
pub fn diff_k(mus: &[f64]) -> Result<f64> {
    let k = mus.len();
    if k < 3 {
        return Err(FairdclError::Metric(format!(
            "parity distance needs K >= 3 groups, got {k}"
        )));
    }
    if mus.iter().any(|&m| m <= 0.0) {
        return Err(FairdclError::Metric("group means must be positive".into()));
    }
    let total: f64 = mus.iter().sum();
    let sum: f64 = mus.iter().map(|m| (m / total - 1.0 / k as f64).abs()).sum();
    Ok(k as f64 / (k as f64 - 1.0) * sum)
}

/// K-appropriate gap: ratio form for two groups, parity distance otherwise.
pub fn diff_metric(mus: &[f64]) -> Result<f64> {
    match mus.len() {
        0 | 1 => Err(FairdclError::Metric("need at least 2 groups".into())),
        2 => diff_two(mus[0], mus[1]),
        _ => diff_k(mus),
    }
}

/// Group-wise segmentation fairness summary.
#[derive(Debug, Clone)]
pub struct FairnessReport {
    pub per_group_class_iou: Vec<Vec<ClassIou>>,
    pub group_means: Vec<f64>,
    pub diff: f64,
    pub wst: f64,
    pub acc: f64,
}

impl FairnessReport {
    /// Aggregate confusion counts over (prediction, truth, group) triples,
    /// pooling pixels within each group before computing IoUs.
    pub fn from_mask_pairs(
        pairs: &[(Array2<u8>, Array2<u8>, usize)],
        k: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if k < 2 {
            return Err(FairdclError::Metric("need at least 2 groups".into()));
        }
        let mut counts = vec![vec![(0u64, 0u64, 0u64); num_classes]; k];
        for (pred, gt, group) in pairs {
            if *group >= k {
                return Err(FairdclError::Metric(format!("group {group} out of range")));
            }
            for (c, e) in confusion_iou(pred, gt, num_classes)?.iter().enumerate() {
                counts[*group][c].0 += e.tp;
                counts[*group][c].1 += e.fp;
                counts[*group][c].2 += e.fne;
            }
        }
        let per_group_class_iou: Vec<Vec<ClassIou>> = counts
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&(tp, fp, fne)| ClassIou {
                        tp,
                        fp,
                        fne,
                        iou: iou_of(tp, fp, fne),
                    })
                    .collect()
            })
            .collect();
        let group_means = per_group_class_iou
            .iter()
            .map(|row| group_mean_iou(&row.iter().map(|e| e.iou).collect::<Vec<_>>()))
            .collect::<Result<Vec<f64>>>()?;
        let diff = diff_metric(&group_means)?;
        let wst = group_means.iter().cloned().fold(f64::INFINITY, f64::min);
        let acc = group_means.iter().sum::<f64>() / group_means.len() as f64;
        Ok(FairnessReport {
            per_group_class_iou,
            group_means,
            diff,
            wst,
            acc,
        })
    }
}

/// Per-group fraction of pixels in each class; rows sum to 1.
pub fn class_distribution(tiles: &[ImageTile], k: usize, num_classes: usize) -> Result<Array2<f64>> {
    let mut counts = Array2::<f64>::zeros((k, num_classes));
    for t in tiles {
        let mask = t.mask.as_ref().ok_or_else(|| {
            FairdclError::Metric(format!("tile {} has no mask", t.id))
        })?;
        if t.group >= k {
            return Err(FairdclError::Metric(format!("group {} out of range", t.group)));
        }
        for &v in mask.iter() {
            let c = v as usize;
            if c >= num_classes {
                return Err(FairdclError::Metric("class index out of range".into()));
            }
            counts[[t.group, c]] += 1.0;
        }
    }
    for mut row in counts.rows_mut() {
        let total: f64 = row.sum();
        if total > 0.0 {
            row.mapv_inplace(|v| v / total);
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use ndarray::array;

    #[test]
    fn perfect_prediction_gives_unit_iou() {
        let m = array![[0u8, 1], [2, 1]];
        let r = confusion_iou(&m, &m, 3).unwrap();
        for e in &r {
            assert_eq!(e.iou, Some(1.0));
        }
    }

    #[test]
    fn arithmetic_check_tp5_fp3_fn2() {
        // build masks yielding TP=5, FP=3, FN=2 for class 1
        let gt = array![[1u8, 1, 1, 1, 1], [1, 1, 0, 0, 0]];
        let pred = array![[1u8, 1, 1, 1, 1], [0, 0, 1, 1, 1]];
        let r = confusion_iou(&pred, &gt, 2).unwrap();
        assert_eq!((r[1].tp, r[1].fp, r[1].fne), (5, 3, 2));
        assert_eq!(r[1].iou, Some(0.5));
    }

    #[test]
    fn absent_class_is_undefined_and_excluded() {
        let m = array![[0u8, 0], [0, 0]];
        let r = confusion_iou(&m, &m, 3).unwrap();
        assert_eq!(r[1].iou, None);
        assert_eq!(r[2].iou, None);
        let mu = group_mean_iou(&[Some(0.2), Some(0.4), None]).unwrap();
        assert!((mu - 0.3).abs() < 1e-12);
        assert!(group_mean_iou(&[None, None]).is_err());
    }

    #[test]
    fn iou_symmetric_under_pred_gt_swap() {
        let a = array![[0u8, 1, 2], [1, 1, 0]];
        let b = array![[0u8, 2, 2], [1, 0, 0]];
        let r1 = confusion_iou(&a, &b, 3).unwrap();
        let r2 = confusion_iou(&b, &a, 3).unwrap();
        for (x, y) in r1.iter().zip(&r2) {
            assert_eq!(x.iou, y.iou);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Array2::<u8>::zeros((2, 2));
        let b = Array2::<u8>::zeros((2, 3));
        assert!(confusion_iou(&a, &b, 2).is_err());
    }

    #[test]
    fn diff_two_examples_and_errors() {
        assert_eq!(diff_two(0.4, 0.4).unwrap(), 0.0);
        assert!((diff_two(0.5, 0.4).unwrap() - 0.25).abs() < 1e-12);
        assert!(diff_two(0.0, 0.4).is_err());
        // symmetric
        assert_eq!(diff_two(0.3, 0.7).unwrap(), diff_two(0.7, 0.3).unwrap());
    }

    #[test]
    fn diff_two_consistent_with_published_two_group_row() {
        // Wst 0.329, Acc 0.362 => other group 0.395; gap = 2(0.395−0.329)/…
        // ratio form: (0.395 − 0.329)/0.329 = 0.2006, table reports 0.206
        let acc: f64 = 0.362;
        let wst: f64 = 0.329;
        let other = 2.0 * acc - wst;
        let d = diff_two(other, wst).unwrap();
        assert!((d - 0.2006).abs() < 0.0005, "d = {d}");
        assert!((d - 0.206).abs() <= 0.01);
    }

    #[test]
    fn diff_k_pinned_three_group_value() {
        let d = diff_k(&[0.577, 0.613, 0.617]).unwrap();
        assert!((d - 0.0421).abs() <= 0.0005, "d = {d}");
    }

    #[test]
    fn diff_k_bounds_and_degenerate_cases() {
        assert!(diff_k(&[0.5, 0.5, 0.5]).unwrap().abs() < 1e-15);
        // one group carries everything: approaches the upper bound 2
        let d = diff_k(&[1.0, 1e-12, 1e-12]).unwrap();
        assert!((d - 2.0).abs() < 1e-9, "d = {d}");
        assert!(diff_k(&[0.5, 0.5]).is_err());
        assert!(diff_k(&[0.5, -0.1, 0.2]).is_err());
    }

    #[test]
    fn diff_metrics_scale_and_permutation_invariant() {
        for c in [0.1, 1.0, 7.3] {
            let a = diff_two(0.3, 0.5).unwrap();
            let b = diff_two(0.3 * c, 0.5 * c).unwrap();
            assert!((a - b).abs() < 1e-12);
            let p = diff_k(&[0.2, 0.5, 0.9]).unwrap();
            let q = diff_k(&[0.2 * c, 0.5 * c, 0.9 * c]).unwrap();
            assert!((p - q).abs() < 1e-12);
        }
        let p = diff_k(&[0.2, 0.5, 0.9]).unwrap();
        let q = diff_k(&[0.9, 0.2, 0.5]).unwrap();
        assert!((p - q).abs() < 1e-12);
    }

    #[test]
    fn report_aggregates_and_wst_le_acc() {
        // group 0 predicted perfectly, group 1 half-wrong on class 1
        let gt = array![[0u8, 1], [1, 0]];
        let bad = array![[0u8, 1], [0, 0]];
        let pairs = vec![
            (gt.clone(), gt.clone(), 0usize),
            (bad.clone(), gt.clone(), 1usize),
        ];
        let r = FairnessReport::from_mask_pairs(&pairs, 2, 2).unwrap();
        assert_eq!(r.group_means[0], 1.0);
        assert!(r.group_means[1] < 1.0);
        assert!((r.wst - r.group_means[1]).abs() < 1e-12);
        assert!(r.wst <= r.acc);
        assert!(r.diff > 0.0);
    }

    fn tile_with_mask(mask: Array2<u8>, group: usize) -> ImageTile {
        ImageTile {
            pixels: ndarray::Array3::zeros((2, 2, 3)),
            mask: Some(mask),
            group,
            split: Split::Test,
            id: format!("g{group}"),
        }
    }

    #[test]
    fn class_distribution_rows() {
        let t0 = tile_with_mask(array![[0u8, 0], [0, 0]], 0);
        let t1 = tile_with_mask(array![[0u8, 1], [1, 1]], 1);
        let d = class_distribution(&[t0, t1], 2, 2).unwrap();
        assert_eq!(d[[0, 0]], 1.0);
        assert_eq!(d[[0, 1]], 0.0);
        assert!((d[[1, 0]] - 0.25).abs() < 1e-12);
        for row in d.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_masks_give_identical_rows() {
        let m = array![[0u8, 1], [2, 1]];
        let t0 = tile_with_mask(m.clone(), 0);
        let t1 = tile_with_mask(m, 1);
        let d = class_distribution(&[t0, t1], 2, 3).unwrap();
        assert_eq!(d.row(0), d.row(1));
    }

    #[test]
    fn missing_mask_rejected() {
        let mut t = tile_with_mask(array![[0u8]], 0);
        t.mask = None;
        assert!(class_distribution(&[t], 2, 2).is_err());
    }
}
