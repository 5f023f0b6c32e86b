//! Confusion matrices, mIoU, mAvg and the cross-level consistency rate.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::inference::{segment_both, Prediction};
use crate::model::{Network, Real};
use crate::taxonomy::{ObjectClassId, PartClassId, Taxonomy};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    /// `None` for classes absent from both ground truth and prediction.
    pub ious: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, gt: ArrayView2<u16>, pred: ArrayView2<u16>) -> Result<()> {
        if gt.dim() != pred.dim() {
            return Err(Error::Shape(format!(
                "ground truth is {:?}, prediction is {:?}",
                gt.dim(),
                pred.dim()
            )));
        }
        if let Some(&bad) = gt.iter().chain(pred.iter()).find(|&&v| v as usize >= self.classes) {
            return Err(Error::ClassOutOfRange {
                level: "confusion",
                id: bad as usize,
                count: self.classes,
            });
        }
        for (&g, &p) in gt.iter().zip(pred.iter()) {
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class and their mean. With `include_absent`, classes missing
    /// from both maps count as IoU 0 in the mean.
    pub fn miou(&self, include_absent: bool) -> MiouReport {
        let n = self.classes;
        let ious: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let diag = self.get(c, c);
                let row: u64 = (0..n).map(|k| self.get(c, k)).sum();
                let col: u64 = (0..n).map(|k| self.get(k, c)).sum();
                let union = row + col - diag;
                (union > 0).then(|| diag as f64 / union as f64)
            })
            .collect();
        let values: Vec<f64> = if include_absent {
            ious.iter().map(|v| v.unwrap_or(0.0)).collect()
        } else {
            ious.iter().flatten().copied().collect()
        };
        let miou = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        MiouReport { miou, ious }
    }
}

/// Mean over non-background objects of the average IoU of their parts.
/// Parts without an IoU are ignored; objects with none are left out.
pub fn mavg(part_ious: &[Option<f64>], taxonomy: &Taxonomy) -> f64 {
    let mut per_object = Vec::new();
    for o in 0..taxonomy.num_objects() {
        let object = ObjectClassId(o as u16);
        if object == taxonomy.object_background() {
            continue;
        }
        let ious: Vec<f64> = taxonomy
            .parts_of(object)
            .filter_map(|p| part_ious.get(p.index()).copied().flatten())
            .collect();
        if !ious.is_empty() {
            per_object.push(ious.iter().sum::<f64>() / ious.len() as f64);
        }
    }
    if per_object.is_empty() {
        0.0
    } else {
        per_object.iter().sum::<f64>() / per_object.len() as f64
    }
}

fn consistent_count(part_map: ArrayView2<u16>, object_map: ArrayView2<u16>, taxonomy: &Taxonomy) -> Result<u64> {
    if part_map.dim() != object_map.dim() {
        return Err(Error::Shape("part and object maps differ in size".into()));
    }
    let mut count = 0;
    for (&p, &o) in part_map.iter().zip(object_map.iter()) {
        if taxonomy.parent_of(PartClassId(p))? == ObjectClassId(o) {
            count += 1;
        }
    }
    Ok(count)
}

/// Fraction of pixels whose part's parent equals the predicted object;
/// 1.0 for an empty map.
pub fn consistency_rate(part_map: ArrayView2<u16>, object_map: ArrayView2<u16>, taxonomy: &Taxonomy) -> Result<f64> {
    let n = part_map.len();
    let count = consistent_count(part_map, object_map, taxonomy)?;
    Ok(if n == 0 { 1.0 } else { count as f64 / n as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub name: String,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub part_miou: f64,
    pub object_miou: f64,
    pub mavg: f64,
    pub consistency: f64,
    pub part_ious: Vec<ClassIou>,
    pub object_ious: Vec<ClassIou>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub pixels: u64,
    pub raw: LevelMetrics,
    pub postprocessed: LevelMetrics,
}

/// Running totals for one prediction mode.
#[derive(Clone, Debug)]
pub struct Accumulator {
    pub parts: ConfusionMatrix,
    pub objects: ConfusionMatrix,
    consistent: u64,
    pixels: u64,
}

impl Accumulator {
    pub fn new(taxonomy: &Taxonomy) -> Self {
        Self {
            parts: ConfusionMatrix::new(taxonomy.num_parts()),
            objects: ConfusionMatrix::new(taxonomy.num_objects()),
            consistent: 0,
            pixels: 0,
        }
    }

    pub fn add(&mut self, sample: &Sample, prediction: &Prediction, taxonomy: &Taxonomy) -> Result<()> {
        self.parts.accumulate(sample.part_labels.view(), prediction.part_map.view())?;
        self.objects.accumulate(sample.object_labels.view(), prediction.object_map.view())?;
        self.consistent += consistent_count(prediction.part_map.view(), prediction.object_map.view(), taxonomy)?;
        self.pixels += prediction.part_map.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &Accumulator) -> Result<()> {
        self.parts.merge(&other.parts)?;
        self.objects.merge(&other.objects)?;
        self.consistent += other.consistent;
        self.pixels += other.pixels;
        Ok(())
    }

    pub fn finish(&self, taxonomy: &Taxonomy) -> LevelMetrics {
        let parts = self.parts.miou(false);
        let objects = self.objects.miou(false);
        let named = |names: &[String], ious: &[Option<f64>]| {
            names
                .iter()
                .zip(ious)
                .map(|(name, &iou)| ClassIou {
                    name: name.clone(),
                    iou,
                })
                .collect()
        };
        LevelMetrics {
            part_miou: parts.miou,
            object_miou: objects.miou,
            mavg: mavg(&parts.ious, taxonomy),
            consistency: if self.pixels == 0 {
                1.0
            } else {
                self.consistent as f64 / self.pixels as f64
            },
            part_ious: named(taxonomy.part_names(), &parts.ious),
            object_ious: named(taxonomy.object_names(), &objects.ious),
        }
    }
}

/// Scores a model on a labelled split, with and without post-processing.
pub fn evaluate<T: Real>(network: &Network<T>, samples: &[Sample], taxonomy: &Taxonomy) -> Result<EvalReport> {
    network.check_taxonomy(taxonomy)?;
    let per_image: Vec<Result<(Accumulator, Accumulator)>> = samples
        .par_iter()
        .map(|sample| {
            sample.validate(taxonomy)?;
            let (raw, post) = segment_both(&sample.image, network, taxonomy)?;
            let mut a = Accumulator::new(taxonomy);
            a.add(sample, &raw, taxonomy)?;
            let mut b = Accumulator::new(taxonomy);
            b.add(sample, &post, taxonomy)?;
            Ok((a, b))
        })
        .collect();
    let mut raw = Accumulator::new(taxonomy);
    let mut post = Accumulator::new(taxonomy);
    for r in per_image {
        let (a, b) = r?;
        raw.merge(&a)?;
        post.merge(&b)?;
    }
    Ok(EvalReport {
        images: samples.len(),
        pixels: raw.pixels,
        raw: raw.finish(taxonomy),
        postprocessed: post.finish(taxonomy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, concatenate, Array2, Axis};
    use proptest::prelude::*;

    #[test]
    fn identical_maps_are_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        let m = array![[0u16, 1], [2, 2]];
        cm.accumulate(m.view(), m.view()).unwrap();
        assert_eq!(cm.get(2, 2), 2);
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.miou(false).miou, 1.0);
    }

    #[test]
    fn empty_maps_leave_counts() {
        let mut cm = ConfusionMatrix::new(2);
        let e = Array2::<u16>::zeros((0, 0));
        cm.accumulate(e.view(), e.view()).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
    }

    #[test]
    fn two_by_two_case() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(array![[1u16, 1], [2, 0]].view(), array![[1u16, 2], [2, 0]].view())
            .unwrap();
        let r = cm.miou(false);
        assert_eq!(r.ious, vec![Some(1.0), Some(0.5), Some(0.5)]);
        assert_eq!(r.miou, 2.0 / 3.0);
    }

    #[test]
    fn absent_classes() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(array![[0u16, 1]].view(), array![[0u16, 1]].view()).unwrap();
        assert_eq!(cm.miou(false).miou, 1.0);
        assert_eq!(cm.miou(true).miou, 0.5);
        assert_eq!(cm.miou(false).ious[3], None);
    }

    #[test]
    fn out_of_range_and_shape_errors() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(array![[2u16]].view(), array![[0u16]].view()).is_err());
        assert!(cm.accumulate(array![[0u16, 0]].view(), array![[0u16]].view()).is_err());
    }

    #[test]
    fn accumulation_is_additive() {
        let a_gt = array![[0u16, 1, 2]];
        let a_pr = array![[0u16, 2, 2]];
        let b_gt = array![[1u16, 1, 0]];
        let b_pr = array![[1u16, 0, 0]];
        let mut split = ConfusionMatrix::new(3);
        split.accumulate(a_gt.view(), a_pr.view()).unwrap();
        split.accumulate(b_gt.view(), b_pr.view()).unwrap();
        let mut joined = ConfusionMatrix::new(3);
        let gt = concatenate![Axis(0), a_gt, b_gt];
        let pr = concatenate![Axis(0), a_pr, b_pr];
        joined.accumulate(gt.view(), pr.view()).unwrap();
        assert_eq!(split, joined);
    }

    fn toy() -> Taxonomy {
        let doc = serde_json::from_str(
            r#"{"objects": [{"name": "a", "parts": ["x", "y"]}, {"name": "b", "parts": ["z", "w"]}]}"#,
        )
        .unwrap();
        Taxonomy::from_document(&doc).unwrap()
    }

    #[test]
    fn mavg_cases() {
        let t = toy();
        // parts a-x, a-y, b-z, b-w, background
        assert_eq!(mavg(&[Some(0.5), Some(1.0), None, None, Some(0.2)], &t), 0.75);
        assert!((mavg(&[Some(0.6), Some(0.6), Some(0.8), Some(0.8), None], &t) - 0.7).abs() < 1e-15);
        assert_eq!(mavg(&[Some(0.3); 5], &t), 0.3);
    }

    #[test]
    fn consistency_cases() {
        let t = Taxonomy::synthetic_default();
        let head = t.part_id("quad-head").unwrap().0;
        let quad = t.object_id("quad").unwrap().0;
        let fish = t.object_id("fish").unwrap().0;
        let parts = Array2::from_elem((2, 2), head);
        let fishes = Array2::from_elem((2, 2), fish);
        assert_eq!(consistency_rate(parts.view(), fishes.view(), &t).unwrap(), 0.0);
        let half = array![[quad, quad], [fish, fish]];
        assert_eq!(consistency_rate(parts.view(), half.view(), &t).unwrap(), 0.5);
        let e = Array2::<u16>::zeros((0, 3));
        assert_eq!(consistency_rate(e.view(), e.view(), &t).unwrap(), 1.0);
    }

    fn labels(n: usize, classes: u16) -> impl Strategy<Value = Vec<u16>> {
        proptest::collection::vec(0..classes, n)
    }

    proptest! {
        #[test]
        fn miou_permutation_equivariant(gt in labels(30, 5), pred in labels(30, 5), perm in Just(vec![3u16, 0, 4, 1, 2]).prop_shuffle()) {
            let gt = Array2::from_shape_vec((5, 6), gt).unwrap();
            let pred = Array2::from_shape_vec((5, 6), pred).unwrap();
            let mut a = ConfusionMatrix::new(5);
            a.accumulate(gt.view(), pred.view()).unwrap();
            let mut b = ConfusionMatrix::new(5);
            b.accumulate(gt.mapv(|v| perm[v as usize]).view(), pred.mapv(|v| perm[v as usize]).view()).unwrap();
            let (ra, rb) = (a.miou(false), b.miou(false));
            for c in 0..5 {
                prop_assert_eq!(ra.ious[c], rb.ious[perm[c] as usize]);
            }
            prop_assert!((ra.miou - rb.miou).abs() < 1e-12);
            for iou in ra.ious.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(iou));
            }
        }

        #[test]
        fn mavg_within_object_hull(ious in proptest::collection::vec(proptest::option::of(0.0f64..1.0), 5)) {
            let t = toy();
            let m = mavg(&ious, &t);
            let objs: Vec<f64> = [[0usize, 1], [2, 3]].iter().filter_map(|ps| {
                let v: Vec<f64> = ps.iter().filter_map(|&p| ious[p]).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            }).collect();
            if !objs.is_empty() {
                let lo = objs.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = objs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
            }
        }
    }
}
