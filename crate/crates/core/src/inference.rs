//! Nearest-component prediction and logical-path post-processing.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::model::{Network, Real};
use crate::taxonomy::{ObjectClassId, PartClassId, Taxonomy};

/// Scores of the valid `(part, parent)` paths, `HW x |paths|`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathScores {
    pub paths: Vec<(PartClassId, ObjectClassId)>,
    pub scores: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub part_map: Array2<u16>,
    pub object_map: Array2<u16>,
    pub path_scores: Option<PathScores>,
}

impl Prediction {
    pub fn height(&self) -> usize {
        self.part_map.nrows()
    }

    pub fn width(&self) -> usize {
        self.part_map.ncols()
    }

    /// `H x W x |paths|` score volume, when present.
    pub fn path_volume(&self) -> Option<Array3<f64>> {
        self.path_scores.as_ref().map(|s| {
            s.scores
                .clone()
                .into_shape_with_order((self.height(), self.width(), s.paths.len()))
                .expect("scores are contiguous")
        })
    }
}

fn argmax<T: PartialOrd + Copy>(row: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_value = None;
    for (i, v) in row.into_iter().enumerate() {
        if best_value.is_none_or(|b| v > b) {
            best = i;
            best_value = Some(v);
        }
    }
    best
}

fn to_map(classes: Vec<usize>, height: usize, width: usize) -> Array2<u16> {
    Array2::from_shape_vec((height, width), classes.into_iter().map(|c| c as u16).collect())
        .expect("one class per pixel")
}

fn check_rows(name: &str, logits: &ArrayView2<f64>, height: usize, width: usize) -> Result<()> {
    if logits.nrows() != height * width {
        return Err(Error::Shape(format!(
            "{name} logits have {} rows for a {height}x{width} map",
            logits.nrows()
        )));
    }
    Ok(())
}

/// Per-pixel argmax at both levels; ties go to the lower index. Logits are
/// `HW x classes` in row-major pixel order.
pub fn nn_predict(
    part_logits: ArrayView2<f64>,
    object_logits: ArrayView2<f64>,
    height: usize,
    width: usize,
) -> Result<Prediction> {
    check_rows("part", &part_logits, height, width)?;
    check_rows("object", &object_logits, height, width)?;
    let parts = part_logits.outer_iter().map(|r| argmax(r.iter().copied())).collect();
    let objects = object_logits.outer_iter().map(|r| argmax(r.iter().copied())).collect();
    Ok(Prediction {
        part_map: to_map(parts, height, width),
        object_map: to_map(objects, height, width),
        path_scores: None,
    })
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

/// `p[i] * q[parent(i)]` for every valid path, from per-pixel probabilities.
pub fn path_scores_from_probabilities(
    part_probs: ArrayView2<f64>,
    object_probs: ArrayView2<f64>,
    taxonomy: &Taxonomy,
) -> Result<PathScores> {
    if part_probs.ncols() != taxonomy.num_parts() || object_probs.ncols() != taxonomy.num_objects() {
        return Err(Error::Shape(format!(
            "probabilities have {} / {} classes, taxonomy defines {} / {}",
            part_probs.ncols(),
            object_probs.ncols(),
            taxonomy.num_parts(),
            taxonomy.num_objects()
        )));
    }
    if part_probs.nrows() != object_probs.nrows() {
        return Err(Error::Shape("part and object maps differ in size".into()));
    }
    let paths = taxonomy.valid_paths();
    let mut scores = Array2::zeros((part_probs.nrows(), paths.len()));
    for (mut out, (p, q)) in scores.outer_iter_mut().zip(part_probs.outer_iter().zip(object_probs.outer_iter())) {
        for (k, (part, object)) in paths.iter().enumerate() {
            out[k] = p[part.index()] * q[object.index()];
        }
    }
    Ok(PathScores { paths, scores })
}

/// Path scores from similarity logits that already include the `1 / tau_sim`
/// scaling; each level is softmaxed per pixel.
pub fn path_scores(part_logits: ArrayView2<f64>, object_logits: ArrayView2<f64>, taxonomy: &Taxonomy) -> Result<PathScores> {
    path_scores_from_probabilities(
        softmax_rows(part_logits).view(),
        softmax_rows(object_logits).view(),
        taxonomy,
    )
}

/// Labels every pixel with its top-scoring path. Paths are ordered by part
/// index, so ties go to the lowest part index.
pub fn assign_top_path(scores: PathScores, height: usize, width: usize) -> Result<Prediction> {
    if scores.scores.nrows() != height * width {
        return Err(Error::Shape(format!(
            "path scores have {} rows for a {height}x{width} map",
            scores.scores.nrows()
        )));
    }
    let mut parts = Vec::with_capacity(height * width);
    let mut objects = Vec::with_capacity(height * width);
    for row in scores.scores.outer_iter() {
        let (part, object) = scores.paths[argmax(row.iter().copied())];
        parts.push(part.index());
        objects.push(object.index());
    }
    Ok(Prediction {
        part_map: to_map(parts, height, width),
        object_map: to_map(objects, height, width),
        path_scores: Some(scores),
    })
}

/// Encoder, decoder and nearest-component prediction, optionally followed by
/// path post-processing.
pub fn segment<T: Real>(
    image: &Array3<f32>,
    network: &Network<T>,
    taxonomy: &Taxonomy,
    postprocess: bool,
) -> Result<Prediction> {
    network.check_taxonomy(taxonomy)?;
    let (height, width, _) = image.dim();
    let logits = network.forward(image)?.logits().to_f64();
    if postprocess {
        let scores = path_scores(logits.part.view(), logits.object.view(), taxonomy)?;
        assign_top_path(scores, height, width)
    } else {
        nn_predict(logits.part.view(), logits.object.view(), height, width)
    }
}

/// Raw and post-processed predictions from a single forward pass.
pub fn segment_both<T: Real>(
    image: &Array3<f32>,
    network: &Network<T>,
    taxonomy: &Taxonomy,
) -> Result<(Prediction, Prediction)> {
    network.check_taxonomy(taxonomy)?;
    let (height, width, _) = image.dim();
    let logits = network.forward(image)?.logits().to_f64();
    let raw = nn_predict(logits.part.view(), logits.object.view(), height, width)?;
    let scores = path_scores(logits.part.view(), logits.object.view(), taxonomy)?;
    Ok((raw, assign_top_path(scores, height, width)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::taxonomy::TaxonomyDocument;
    use ndarray::array;

    fn ab_taxonomy() -> Taxonomy {
        let doc: TaxonomyDocument = serde_json::from_str(
            r#"{"objects": [{"name": "A", "parts": ["head", "body"]}, {"name": "B", "parts": ["head", "body"]}]}"#,
        )
        .unwrap();
        Taxonomy::from_document(&doc).unwrap()
    }

    #[test]
    fn argmax_and_ties() {
        let part = array![[0.1, 2.0, -1.0], [1.0, 1.0, 0.0]];
        let object = array![[0.0, 0.0], [0.0, 3.0]];
        let pred = nn_predict(part.view(), object.view(), 1, 2).unwrap();
        assert_eq!(pred.part_map, array![[1u16, 0]]);
        assert_eq!(pred.object_map, array![[0u16, 1]]);
    }

    #[test]
    fn raw_prediction_may_be_inconsistent() {
        let taxonomy = Taxonomy::synthetic_default();
        let head = taxonomy.part_id("quad-head").unwrap().index();
        let fish = taxonomy.object_id("fish").unwrap().index();
        let mut part = Array2::zeros((1, taxonomy.num_parts()));
        part[[0, head]] = 5.0;
        let mut object = Array2::zeros((1, taxonomy.num_objects()));
        object[[0, fish]] = 5.0;
        let pred = nn_predict(part.view(), object.view(), 1, 1).unwrap();
        assert_eq!(pred.part_map[[0, 0]] as usize, head);
        assert_eq!(pred.object_map[[0, 0]] as usize, fish);
    }

    #[test]
    fn worked_example() {
        let taxonomy = ab_taxonomy();
        let p = array![[0.4, 0.1, 0.45, 0.0, 0.05]];
        let q = array![[0.6, 0.35, 0.05]];
        let scores = path_scores_from_probabilities(p.view(), q.view(), &taxonomy).unwrap();
        let expected = [0.24, 0.06, 0.1575, 0.0, 0.0025];
        for (s, e) in scores.scores.row(0).iter().zip(expected) {
            assert!((s - e).abs() < 1e-15);
        }
        assert!((scores.scores.sum() - 0.46).abs() < 1e-12);
        let pred = assign_top_path(scores, 1, 1).unwrap();
        assert_eq!(taxonomy.part_name(PartClassId(pred.part_map[[0, 0]])), "A-head");
        assert_eq!(taxonomy.object_name(ObjectClassId(pred.object_map[[0, 0]])), "A");
    }

    #[test]
    fn one_hot_path_scores_one() {
        let taxonomy = ab_taxonomy();
        let p = array![[0.0, 0.0, 0.0, 1.0, 0.0]];
        let q = array![[0.0, 1.0, 0.0]];
        let scores = path_scores_from_probabilities(p.view(), q.view(), &taxonomy).unwrap();
        assert_eq!(scores.scores.row(0).to_vec(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn background_logits_choose_background_path() {
        let taxonomy = ab_taxonomy();
        let mut part = Array2::zeros((1, 5));
        part[[0, 4]] = 10.0;
        let mut object = Array2::zeros((1, 3));
        object[[0, 2]] = 10.0;
        let scores = path_scores(part.view(), object.view(), &taxonomy).unwrap();
        let pred = assign_top_path(scores, 1, 1).unwrap();
        assert_eq!(pred.part_map[[0, 0]], taxonomy.part_background().0);
        assert_eq!(pred.object_map[[0, 0]], taxonomy.object_background().0);
    }

    #[test]
    fn segment_modes() {
        let taxonomy = Taxonomy::synthetic_default();
        let net = Network::<f32>::init(&ModelConfig::default(), 9, 4, 2).unwrap();
        let img = Array3::from_shape_fn((12, 10, 3), |(y, x, c)| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
        let raw = segment(&img, &net, &taxonomy, false).unwrap();
        let logits = net.forward(&img).unwrap().logits().to_f64();
        assert_eq!(raw, nn_predict(logits.part.view(), logits.object.view(), 12, 10).unwrap());
        let post = segment(&img, &net, &taxonomy, true).unwrap();
        assert_eq!(post, segment(&img, &net, &taxonomy, true).unwrap());
        let (r2, p2) = segment_both(&img, &net, &taxonomy).unwrap();
        assert_eq!((r2, p2), (raw, post));

        let other = Network::<f32>::init(&ModelConfig::default(), 5, 3, 2).unwrap();
        assert!(segment(&img, &other, &taxonomy, true).is_err());
    }
}
