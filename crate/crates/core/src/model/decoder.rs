//! Dictionary-based cluster decoder.
//!
//! Each level (parts, objects) owns a dictionary whose row `i` is bound to
//! class `i`. A stage assigns pixels to components by argmax affinity,
//! pools their values into the components and applies a residual
//! feed-forward transform. Logits compare the level's pixel keys with the
//! final components.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::cluster::{aggregate, assign, cluster_counts, Aggregation};
use super::similarity::{similarity_backward, similarity_logits, Similarity};
use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub stages: usize,
    /// Channel count `D` shared by pixel features and components.
    pub channels: usize,
    pub ffn_hidden: usize,
    pub aggregation: Aggregation,
    pub similarity: Similarity,
    /// `tau_sim`; cosine logits are divided by it.
    pub similarity_temperature: f64,
    pub init_scale: f64,
    /// Use the part-level key/value/query projections for objects too.
    pub share_projections: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            channels: 32,
            ffn_hidden: 64,
            aggregation: Aggregation::Mean,
            similarity: Similarity::Cosine,
            similarity_temperature: 0.1,
            init_scale: 0.02,
            share_projections: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("decoder needs at least one stage".into()));
        }
        if self.channels == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if !(self.similarity_temperature > 0.0) {
            return Err(Error::Config("similarity_temperature must be positive".into()));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Class-bound component matrices: parts `P x D`, objects `P~ x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary<T> {
    pub part_components: Array2<T>,
    pub object_components: Array2<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Part,
    Object,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Part => "part",
            Level::Object => "object",
        }
    }
}

/// Learned linear maps of one level (or of both, when shared).
#[derive(Clone, Debug, PartialEq)]
pub struct Projections<T> {
    /// Pixel features to keys, `D x D`; also the embedding the logits use.
    pub key: Array2<T>,
    /// Per stage, pixel features to values.
    pub values: Vec<Array2<T>>,
    /// Per stage, components to queries.
    pub queries: Vec<Array2<T>>,
}

impl<T: Real> Projections<T> {
    pub(crate) fn init<R: Rng>(config: &DecoderConfig, rng: &mut R) -> Self {
        let d = config.channels;
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).unwrap();
        Self {
            key: Array2::from_shape_fn((d, d), |_| T::from(normal.sample(rng)).unwrap()),
            // zero values: components start out as the bare dictionary
            values: (0..config.stages).map(|_| Array2::zeros((d, d))).collect(),
            queries: (0..config.stages).map(|_| Array2::eye(d)).collect(),
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            key: Array2::zeros(self.key.dim()),
            values: self.values.iter().map(|v| Array2::zeros(v.dim())).collect(),
            queries: self.queries.iter().map(|q| Array2::zeros(q.dim())).collect(),
        }
    }

    pub fn identity(stages: usize, channels: usize) -> Self {
        Self {
            key: Array2::eye(channels),
            values: (0..stages).map(|_| Array2::eye(channels)).collect(),
            queries: (0..stages).map(|_| Array2::eye(channels)).collect(),
        }
    }
}

/// Per-component two-layer transform applied with a residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Real> FeedForward<T> {
    pub(crate) fn init<R: Rng>(config: &DecoderConfig, rng: &mut R) -> Self {
        let (d, hidden) = (config.channels, config.ffn_hidden);
        let normal = Normal::new(0.0, (2.0 / d as f64).sqrt()).unwrap();
        Self {
            w1: Array2::from_shape_fn((d, hidden), |_| T::from(normal.sample(rng)).unwrap()),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, d)),
            b2: Array1::zeros(d),
        }
    }

    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            w1: Array2::zeros((channels, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, channels)),
            b2: Array1::zeros(channels),
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self::zeros(self.w1.nrows(), self.w1.ncols())
    }
}

/// Hard assignments of every stage, recorded so a forward pass can be replayed
/// with the same clusters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageAssignments(pub Vec<Vec<usize>>);

struct StageCache<T> {
    assignment: Vec<usize>,
    counts: Vec<usize>,
    updated: Array2<T>,
    hidden: Array2<T>,
}

pub(crate) struct LevelCache<T> {
    keys: Array2<T>,
    stages: Vec<StageCache<T>>,
}

impl<T> LevelCache<T> {
    pub(crate) fn assignments(&self) -> StageAssignments {
        StageAssignments(self.stages.iter().map(|s| s.assignment.clone()).collect())
    }
}

pub(crate) struct LevelOutput<T> {
    pub components: Array2<T>,
    pub logits: Array2<T>,
    pub cache: LevelCache<T>,
}

pub(crate) fn level_forward<T: Real>(
    config: &DecoderConfig,
    features: ArrayView2<T>,
    dictionary: ArrayView2<T>,
    projections: &Projections<T>,
    ffn: &[FeedForward<T>],
    fixed: Option<&StageAssignments>,
) -> LevelOutput<T> {
    let keys = features.dot(&projections.key);
    let mut components = dictionary.to_owned();
    let mut stages = Vec::with_capacity(config.stages);
    for s in 0..config.stages {
        let assignment = match fixed {
            Some(a) => a.0[s].clone(),
            None => {
                let queries = components.dot(&projections.queries[s]);
                assign(queries.view(), keys.view())
            }
        };
        let counts = cluster_counts(&assignment, components.nrows());
        let values = features.dot(&projections.values[s]);
        let pooled = aggregate(&assignment, &counts, values.view(), config.aggregation);
        let updated = &components + &pooled;

        let f = &ffn[s];
        let mut hidden = updated.dot(&f.w1);
        hidden += &f.b1;
        hidden.mapv_inplace(|v| v.max(T::zero()));
        let mut next = hidden.dot(&f.w2);
        next += &f.b2;
        next += &updated;

        stages.push(StageCache {
            assignment,
            counts,
            updated,
            hidden,
        });
        components = next;
    }
    let temperature = T::from(config.similarity_temperature).unwrap();
    let logits = similarity_logits(keys.view(), components.view(), config.similarity, temperature);
    LevelOutput {
        components,
        logits,
        cache: LevelCache { keys, stages },
    }
}

/// Backpropagates `grad_logits` (`HW x N`) and `grad_components` (`N x D`,
/// gradient w.r.t. the final components). Assignments are held fixed, so the
/// query projections receive no gradient. Returns `d loss / d features`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn level_backward<T: Real>(
    config: &DecoderConfig,
    features: ArrayView2<T>,
    projections: &Projections<T>,
    ffn: &[FeedForward<T>],
    output: &LevelOutput<T>,
    grad_logits: ArrayView2<T>,
    grad_components: ArrayView2<T>,
    grad_dictionary: &mut Array2<T>,
    grad_projections: &mut Projections<T>,
    grad_ffn: &mut [FeedForward<T>],
) -> Array2<T> {
    let cache = &output.cache;
    let temperature = T::from(config.similarity_temperature).unwrap();
    let (grad_keys, grad_final) = similarity_backward(
        cache.keys.view(),
        output.components.view(),
        config.similarity,
        temperature,
        grad_logits,
    );
    let mut grad_c = grad_final + &grad_components;
    let mut grad_features = grad_keys.dot(&projections.key.t());
    general_mat_mul(T::one(), &features.t(), &grad_keys, T::one(), &mut grad_projections.key);

    for s in (0..config.stages).rev() {
        let stage = &cache.stages[s];
        let f = &ffn[s];
        let g = &mut grad_ffn[s];

        general_mat_mul(T::one(), &stage.hidden.t(), &grad_c, T::one(), &mut g.w2);
        g.b2 += &grad_c.sum_axis(Axis(0));
        let mut grad_hidden = grad_c.dot(&f.w2.t());
        Zip::from(&mut grad_hidden).and(&stage.hidden).for_each(|gh, &h| {
            if h <= T::zero() {
                *gh = T::zero();
            }
        });
        general_mat_mul(T::one(), &stage.updated.t(), &grad_hidden, T::one(), &mut g.w1);
        g.b1 += &grad_hidden.sum_axis(Axis(0));
        general_mat_mul(T::one(), &grad_hidden, &f.w1.t(), T::one(), &mut grad_c);

        // pooled values: each pixel receives its cluster's gradient
        let mut grad_values = Array2::zeros((features.nrows(), grad_c.ncols()));
        for (mut row, &a) in grad_values.outer_iter_mut().zip(&stage.assignment) {
            row.assign(&grad_c.row(a));
            if config.aggregation == Aggregation::Mean {
                let scale = T::from(stage.counts[a]).unwrap();
                row.mapv_inplace(|v| v / scale);
            }
        }
        general_mat_mul(
            T::one(),
            &features.t(),
            &grad_values,
            T::one(),
            &mut grad_projections.values[s],
        );
        general_mat_mul(
            T::one(),
            &grad_values,
            &projections.values[s].t(),
            T::one(),
            &mut grad_features,
        );
        // residual path carries grad_c to the stage input unchanged
    }
    *grad_dictionary += &grad_c;
    grad_features
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::cluster::cluster_update;
    use ndarray::array;

    #[test]
    fn degenerate_stage_is_cluster_update_plus_logits() {
        let config = DecoderConfig {
            stages: 1,
            channels: 2,
            ffn_hidden: 3,
            aggregation: Aggregation::Sum,
            similarity: Similarity::Dot,
            ..DecoderConfig::default()
        };
        let features = array![[2.0, 0.0], [0.0, 3.0], [1.0, 0.5]];
        let dictionary = array![[1.0, 0.0], [0.0, 1.0]];
        let proj = Projections::identity(1, 2);
        let ffn = vec![FeedForward::zeros(2, 3)];
        let out = level_forward(&config, features.view(), dictionary.view(), &proj, &ffn, None);

        let reference = cluster_update(dictionary.view(), features.view(), features.view(), Aggregation::Sum);
        assert_eq!(out.components, reference.updated);
        let logits = similarity_logits(features.view(), reference.updated.view(), Similarity::Dot, 1.0);
        assert_eq!(out.logits, logits);
    }
}
