//! Pixel-level segmentation metrics and the necrosis-rate estimate.

use serde::{Deserialize, Serialize};

use crate::classes::{ClassId, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tiling::{class_counts, LabelMap};

/// `counts[gt][pred]` pixel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    /// Pixels predicted as `c` that belong elsewhere.
    pub fn false_positives(&self, c: usize) -> u64 {
        (0..NUM_CLASSES)
            .filter(|&g| g != c)
            .map(|g| self.counts[g][c])
            .sum()
    }

    /// Pixels of class `c` predicted as something else.
    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..NUM_CLASSES)
            .filter(|&p| p != c)
            .map(|p| self.counts[c][p])
            .sum()
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl std::ops::AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, rhs: Self) {
        for (row, other) in self.counts.iter_mut().zip(rhs.counts) {
            for (a, b) in row.iter_mut().zip(other) {
                *a += b;
            }
        }
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap) -> Result<ConfusionMatrix> {
    if pred.dimensions() != gt.dimensions() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dimensions(),
            gt.dimensions()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &g) in pred.as_raw().iter().zip(gt.as_raw()) {
        if p as usize >= NUM_CLASSES {
            return Err(Error::InvalidClass(p));
        }
        if g as usize >= NUM_CLASSES {
            return Err(Error::InvalidClass(g));
        }
        cm.counts[g as usize][p as usize] += 1;
    }
    Ok(cm)
}

/// How classes with a zero denominator enter the macro means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbsentClassPolicy {
    /// Skip them.
    #[default]
    Exclude,
    /// Count them as 0.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    /// `None` where the denominator is zero.
    pub per_class_iou: [Option<f64>; NUM_CLASSES],
    pub per_class_precision: [Option<f64>; NUM_CLASSES],
    pub per_class_recall: [Option<f64>; NUM_CLASSES],
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn macro_mean(values: &[Option<f64>; NUM_CLASSES], policy: AbsentClassPolicy) -> f64 {
    let present: Vec<f64> = match policy {
        AbsentClassPolicy::Exclude => values.iter().flatten().copied().collect(),
        AbsentClassPolicy::Zero => values.iter().map(|v| v.unwrap_or(0.0)).collect(),
    };
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Macro-averaged IoU, precision and recall with absent classes excluded.
pub fn segmentation_metrics(cm: &ConfusionMatrix) -> Result<SegmentationMetrics> {
    segmentation_metrics_with(cm, AbsentClassPolicy::Exclude)
}

pub fn segmentation_metrics_with(
    cm: &ConfusionMatrix,
    policy: AbsentClassPolicy,
) -> Result<SegmentationMetrics> {
    if cm.total() == 0 {
        return Err(Error::Empty("confusion matrix has no pixels".into()));
    }
    let mut iou = [None; NUM_CLASSES];
    let mut precision = [None; NUM_CLASSES];
    let mut recall = [None; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let (tp, fp, fn_) = (
            cm.true_positives(c),
            cm.false_positives(c),
            cm.false_negatives(c),
        );
        iou[c] = ratio(tp, tp + fp + fn_);
        precision[c] = ratio(tp, tp + fp);
        recall[c] = ratio(tp, tp + fn_);
    }
    Ok(SegmentationMetrics {
        miou: macro_mean(&iou, policy),
        precision: macro_mean(&precision, policy),
        recall: macro_mean(&recall, policy),
        per_class_iou: iou,
        per_class_precision: precision,
        per_class_recall: recall,
    })
}

const TUMOR_BED: [ClassId; 5] = [
    ClassId::Vt,
    ClassId::Nc,
    ClassId::Fh,
    ClassId::Hc,
    ClassId::If,
];
const NECROTIC: [ClassId; 4] = [ClassId::Nc, ClassId::Fh, ClassId::Hc, ClassId::If];

/// Necrotic fraction of the tumor bed; background and non-tumor tissue are
/// ignored.
pub fn necrosis_rate_from_counts(counts: &[u64; NUM_CLASSES]) -> Result<f64> {
    let den: u64 = TUMOR_BED.iter().map(|c| counts[c.index()]).sum();
    if den == 0 {
        return Err(Error::UndefinedRate);
    }
    let num: u64 = NECROTIC.iter().map(|c| counts[c.index()]).sum();
    Ok(num as f64 / den as f64)
}

pub fn necrosis_rate(labels: &LabelMap) -> Result<f64> {
    necrosis_rate_from_counts(&class_counts(labels)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NecrosisReport {
    /// Predicted per-class pixel counts.
    pub p: [u64; NUM_CLASSES],
    pub r_dl: f64,
    /// Reference rate (from the ground-truth raster).
    pub r_pr: f64,
    pub abs_diff: f64,
    /// `|pred fraction − gt fraction|` of all pixels, per class.
    pub class_fraction_diff: [f64; NUM_CLASSES],
}

pub fn tnr_report(pred: &LabelMap, gt: &LabelMap) -> Result<NecrosisReport> {
    if pred.dimensions() != gt.dimensions() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dimensions(),
            gt.dimensions()
        )));
    }
    let gt_counts = class_counts(gt)?;
    let r_pr = necrosis_rate_from_counts(&gt_counts)?;
    let p = class_counts(pred)?;
    let r_dl = necrosis_rate_from_counts(&p)?;
    let total = gt.as_raw().len() as f64;
    let class_fraction_diff =
        std::array::from_fn(|c| (p[c] as f64 / total - gt_counts[c] as f64 / total).abs());
    Ok(NecrosisReport {
        p,
        r_dl,
        r_pr,
        abs_diff: (r_pr - r_dl).abs(),
        class_fraction_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;
    use proptest::prelude::*;

    fn raster(w: u32, h: u32, v: &[u8]) -> LabelMap {
        LabelMap::from_raw(w, h, v.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_example() {
        let gt = raster(2, 2, &[0, 0, 1, 1]);
        let pred = raster(2, 2, &[0, 1, 1, 1]);
        let cm = confusion(&pred, &gt).unwrap();
        assert_eq!(cm.counts[0][0], 1);
        assert_eq!(cm.counts[0][1], 1);
        assert_eq!(cm.counts[1][1], 2);
        assert_eq!(cm.total(), 4);
        let m = segmentation_metrics(&cm).unwrap();
        assert_eq!(m.per_class_iou[0], Some(0.5));
        assert!((m.per_class_iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-15);
        assert!((m.precision - 5.0 / 6.0).abs() < 1e-15);
        assert!((m.recall - 0.75).abs() < 1e-15);
        assert_eq!(m.per_class_iou[4], None);
    }

    #[test]
    fn perfect_and_disjoint() {
        let gt = LabelMap::from_fn(7, 3, |x, _| Luma([x as u8]));
        let cm = confusion(&gt, &gt).unwrap();
        for g in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                assert_eq!(cm.counts[g][p] > 0, g == p);
            }
        }
        let m = segmentation_metrics(&cm).unwrap();
        assert_eq!((m.miou, m.precision, m.recall), (1.0, 1.0, 1.0));

        let gt = LabelMap::from_pixel(4, 4, Luma([1]));
        let pred = LabelMap::from_pixel(4, 4, Luma([2]));
        let m = segmentation_metrics(&confusion(&pred, &gt).unwrap()).unwrap();
        assert_eq!(m.miou, 0.0);
    }

    #[test]
    fn errors() {
        assert!(segmentation_metrics(&ConfusionMatrix::default()).is_err());
        assert!(confusion(&raster(1, 2, &[0, 0]), &raster(2, 1, &[0, 0])).is_err());
        assert!(confusion(&raster(1, 1, &[8]), &raster(1, 1, &[0])).is_err());
    }

    #[test]
    fn absent_policy_zero() {
        let gt = raster(2, 2, &[0, 0, 1, 1]);
        let pred = raster(2, 2, &[0, 1, 1, 1]);
        let cm = confusion(&pred, &gt).unwrap();
        let m = segmentation_metrics_with(&cm, AbsentClassPolicy::Zero).unwrap();
        assert!((m.miou - 7.0 / 12.0 * 2.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn necrosis_formula() {
        let counts = [0, 100, 50, 30, 15, 5, 0];
        assert_eq!(necrosis_rate_from_counts(&counts).unwrap(), 0.5);
        assert_eq!(
            necrosis_rate(&LabelMap::from_pixel(3, 3, Luma([1]))).unwrap(),
            0.0
        );
        assert_eq!(
            necrosis_rate(&LabelMap::from_pixel(3, 3, Luma([2]))).unwrap(),
            1.0
        );
        assert!(matches!(
            necrosis_rate(&LabelMap::from_pixel(3, 3, Luma([6]))),
            Err(Error::UndefinedRate)
        ));
        // BG and NT do not enter the ratio
        assert_eq!(
            necrosis_rate_from_counts(&[1000, 1, 1, 0, 0, 0, 1000]).unwrap(),
            0.5
        );
    }

    #[test]
    fn tnr_report_values() {
        let gt = raster(4, 1, &[1, 1, 2, 2]);
        let same = tnr_report(&gt, &gt).unwrap();
        assert_eq!(same.abs_diff, 0.0);
        assert!(same.class_fraction_diff.iter().all(|d| *d == 0.0));

        let pred = raster(4, 1, &[1, 2, 2, 2]);
        let rep = tnr_report(&pred, &gt).unwrap();
        assert_eq!((rep.r_pr, rep.r_dl, rep.abs_diff), (0.5, 0.75, 0.25));
        assert_eq!(rep.class_fraction_diff[1], 0.25);
        assert_eq!(rep.p, [0, 1, 3, 0, 0, 0, 0]);

        assert!(tnr_report(&gt, &raster(4, 1, &[0, 6, 6, 0])).is_err());
    }

    fn labels_strategy(n: usize) -> impl Strategy<Value = Vec<u8>> {
        proptest::collection::vec(0u8..NUM_CLASSES as u8, n)
    }

    proptest! {
        #[test]
        fn batch_additivity(a in labels_strategy(24), b in labels_strategy(24), c in labels_strategy(24), d in labels_strategy(24)) {
            let (pa, ga, pb, gb) = (raster(6, 4, &a), raster(6, 4, &b), raster(6, 4, &c), raster(6, 4, &d));
            let joint = confusion(
                &raster(6, 8, &[a.clone(), c.clone()].concat()),
                &raster(6, 8, &[b.clone(), d.clone()].concat()),
            ).unwrap();
            prop_assert_eq!(joint, confusion(&pa, &ga).unwrap() + confusion(&pb, &gb).unwrap());
        }

        #[test]
        fn permutation_invariance(p in labels_strategy(64), g in labels_strategy(64), perm in Just([0u8, 1, 2, 3, 4, 5, 6]).prop_shuffle()) {
            let m = segmentation_metrics(&confusion(&raster(8, 8, &p), &raster(8, 8, &g)).unwrap()).unwrap();
            let pp: Vec<u8> = p.iter().map(|v| perm[*v as usize]).collect();
            let gp: Vec<u8> = g.iter().map(|v| perm[*v as usize]).collect();
            let mp = segmentation_metrics(&confusion(&raster(8, 8, &pp), &raster(8, 8, &gp)).unwrap()).unwrap();
            prop_assert!((m.miou - mp.miou).abs() < 1e-12);
            for c in 0..NUM_CLASSES {
                prop_assert_eq!(m.per_class_iou[c], mp.per_class_iou[perm[c] as usize]);
                prop_assert_eq!(m.per_class_recall[c], mp.per_class_recall[perm[c] as usize]);
            }
        }

        #[test]
        fn rate_bounded_and_monotone(g in labels_strategy(64), flips in proptest::collection::vec(any::<bool>(), 64)) {
            let labels = raster(8, 8, &g);
            if let Ok(r) = necrosis_rate(&labels) {
                prop_assert!((0.0..=1.0).contains(&r));
                let moved: Vec<u8> = g.iter().zip(&flips).map(|(v, f)| if *v == 1 && *f { 2 } else { *v }).collect();
                let r2 = necrosis_rate(&raster(8, 8, &moved)).unwrap();
                prop_assert!(r2 >= r);
            }
        }
    }
}
