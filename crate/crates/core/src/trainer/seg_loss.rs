//! Segmentation proxy: per-pixel cross-entropy at both levels plus a soft
//! Dice overlap on the classes present in the image.

use ndarray::{Array2, ArrayView2};

use crate::dataset::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SegLoss {
    pub total: f64,
    pub part_ce: f64,
    pub object_ce: f64,
    pub dice: f64,
    /// `d total / d part logits`, `HW x P`.
    pub grad_part: Array2<f64>,
    pub grad_object: Array2<f64>,
}

fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut p = logits.to_owned();
    for mut row in p.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    p
}

struct Level {
    probs: Array2<f64>,
    ce: f64,
    // d ce / d logits
    grad_ce: Array2<f64>,
    // per present class: (class, intersection, prob mass, mask size)
    overlaps: Vec<(usize, f64, f64, f64)>,
}

fn level(logits: ArrayView2<f64>, labels: &[usize]) -> Level {
    let (n, classes) = logits.dim();
    let probs = softmax_rows(logits);
    let mut ce = 0.0;
    let mut grad_ce = probs.clone();
    let mut inter = vec![0.0; classes];
    let mut mask_size = vec![0.0; classes];
    for (p, &y) in labels.iter().enumerate() {
        let row = logits.row(p);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        ce += lse - row[y];
        grad_ce[[p, y]] -= 1.0;
        inter[y] += probs[[p, y]];
        mask_size[y] += 1.0;
    }
    let scale = 1.0 / n as f64;
    grad_ce.mapv_inplace(|v| v * scale);
    let mass = probs.sum_axis(ndarray::Axis(0));
    let overlaps = (0..classes)
        .filter(|&c| mask_size[c] > 0.0)
        .map(|c| (c, inter[c], mass[c], mask_size[c]))
        .collect();
    Level {
        probs,
        ce: ce * scale,
        grad_ce,
        overlaps,
    }
}

/// Dice gradient w.r.t. probabilities, pulled through the softmax and added
/// to `grad`.
fn add_dice_grad(level: &Level, labels: &[usize], present_total: usize, grad: &mut Array2<f64>) {
    let classes = level.probs.ncols();
    // d dice / d prob[:, c] = -2 (m (S + M) - I) / (S + M)^2 / K
    let mut coef = vec![None; classes];
    for &(c, i, s, m) in &level.overlaps {
        let denom = s + m;
        coef[c] = Some((2.0 / (denom * present_total as f64), i / denom));
    }
    let mut g = vec![0.0; classes];
    for (p, &y) in labels.iter().enumerate() {
        let probs = level.probs.row(p);
        for c in 0..classes {
            g[c] = match coef[c] {
                Some((a, ratio)) => -a * (if y == c { 1.0 } else { 0.0 } - ratio),
                None => 0.0,
            };
        }
        let inner: f64 = g.iter().zip(probs.iter()).map(|(a, b)| a * b).sum();
        for c in 0..classes {
            grad[[p, c]] += probs[c] * (g[c] - inner);
        }
    }
}

/// Proxy loss on `HW x P` part and `HW x P~` object logits (pixel-major rows).
pub fn seg_loss(part_logits: ArrayView2<f64>, object_logits: ArrayView2<f64>, sample: &Sample) -> Result<SegLoss> {
    let n = sample.num_pixels();
    for (name, logits) in [("part", &part_logits), ("object", &object_logits)] {
        if logits.nrows() != n {
            return Err(Error::Shape(format!(
                "{name} logits cover {} pixels, sample has {n}",
                logits.nrows()
            )));
        }
    }
    let part_labels: Vec<usize> = sample.part_labels.iter().map(|&l| l as usize).collect();
    let object_labels: Vec<usize> = sample.object_labels.iter().map(|&l| l as usize).collect();
    for (name, labels, classes) in [
        ("part", &part_labels, part_logits.ncols()),
        ("object", &object_labels, object_logits.ncols()),
    ] {
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Shape(format!(
                "{name} label {bad} has no logit column ({classes} classes)"
            )));
        }
    }

    let part = level(part_logits, &part_labels);
    let object = level(object_logits, &object_labels);
    let present = part.overlaps.len() + object.overlaps.len();
    let dice = part
        .overlaps
        .iter()
        .chain(&object.overlaps)
        .map(|&(_, i, s, m)| 1.0 - 2.0 * i / (s + m))
        .sum::<f64>()
        / present as f64;

    let mut grad_part = part.grad_ce.clone();
    let mut grad_object = object.grad_ce.clone();
    add_dice_grad(&part, &part_labels, present, &mut grad_part);
    add_dice_grad(&object, &object_labels, present, &mut grad_object);
    Ok(SegLoss {
        total: part.ce + object.ce + dice,
        part_ce: part.ce,
        object_ce: object.ce,
        dice,
        grad_part,
        grad_object,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::Taxonomy;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sample(taxonomy: &Taxonomy, h: usize, w: usize, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = Array2::from_shape_fn((h, w), |_| rng.random_range(0..taxonomy.num_parts() as u16));
        Sample::from_parts(Array3::zeros((h, w, 3)), parts, taxonomy).unwrap()
    }

    fn one_hot(labels: &Array2<u16>, classes: usize, margin: f64) -> Array2<f64> {
        let mut out = Array2::zeros((labels.len(), classes));
        for (p, &l) in labels.iter().enumerate() {
            out[[p, l as usize]] = margin;
        }
        out
    }

    #[test]
    fn perfect_prediction_limit() {
        let taxonomy = Taxonomy::synthetic_default();
        let sample = random_sample(&taxonomy, 4, 4, 1);
        let pl = one_hot(&sample.part_labels, taxonomy.num_parts(), 200.0);
        let ol = one_hot(&sample.object_labels, taxonomy.num_objects(), 200.0);
        let loss = seg_loss(pl.view(), ol.view(), &sample).unwrap();
        assert!(loss.total < 1e-12, "{loss:?}");
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let taxonomy = Taxonomy::synthetic_default();
        let sample = random_sample(&taxonomy, 3, 5, 2);
        let pl = Array2::zeros((15, taxonomy.num_parts()));
        let ol = Array2::zeros((15, taxonomy.num_objects()));
        let loss = seg_loss(pl.view(), ol.view(), &sample).unwrap();
        assert!((loss.part_ce - (taxonomy.num_parts() as f64).ln()).abs() < 1e-12);
        assert!((loss.object_ce - (taxonomy.num_objects() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let taxonomy = Taxonomy::synthetic_default();
        let sample = random_sample(&taxonomy, 3, 3, 3);
        let pl = Array2::zeros((8, taxonomy.num_parts()));
        let ol = Array2::zeros((9, taxonomy.num_objects()));
        assert!(matches!(seg_loss(pl.view(), ol.view(), &sample), Err(Error::Shape(_))));
        let pl = Array2::zeros((9, 2));
        assert!(seg_loss(pl.view(), ol.view(), &sample).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let taxonomy = Taxonomy::synthetic_default();
        let sample = random_sample(&taxonomy, 8, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pl = Array2::from_shape_fn((64, taxonomy.num_parts()), |_| rng.random_range(-2.0..2.0));
        let ol = Array2::from_shape_fn((64, taxonomy.num_objects()), |_| rng.random_range(-2.0..2.0));
        let loss = seg_loss(pl.view(), ol.view(), &sample).unwrap();
        let h = 1e-5;
        for idx in [(0, 0), (13, 4), (63, 8)] {
            let mut plus = pl.clone();
            plus[idx] += h;
            let mut minus = pl.clone();
            minus[idx] -= h;
            let fd = (seg_loss(plus.view(), ol.view(), &sample).unwrap().total
                - seg_loss(minus.view(), ol.view(), &sample).unwrap().total)
                / (2.0 * h);
            assert!((fd - loss.grad_part[idx]).abs() < 1e-8, "{idx:?}: {fd} vs {}", loss.grad_part[idx]);
        }
        for idx in [(2, 1), (40, 3)] {
            let mut plus = ol.clone();
            plus[idx] += h;
            let mut minus = ol.clone();
            minus[idx] -= h;
            let fd = (seg_loss(pl.view(), plus.view(), &sample).unwrap().total
                - seg_loss(pl.view(), minus.view(), &sample).unwrap().total)
                / (2.0 * h);
            assert!((fd - loss.grad_object[idx]).abs() < 1e-8);
        }
    }
}
