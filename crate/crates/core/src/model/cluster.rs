//! Cluster (k-means) attention and its softmax cross-attention counterpart.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::Real;

/// How the values of the pixels assigned to a component are pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Plain sum, `C + A V` with one-hot `A`.
    Sum,
    /// Sum divided by the cluster's pixel count; empty clusters add zero.
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterUpdate<T> {
    /// `N x D` updated components.
    pub updated: Array2<T>,
    /// Winning component per pixel.
    pub assignment: Vec<usize>,
    /// Pixels per component; sums to the pixel count.
    pub counts: Vec<usize>,
}

/// Hard assignment of every pixel to the component with the largest affinity
/// `query . key`. Ties go to the lowest component index.
pub fn assign<T: Real>(queries: ArrayView2<T>, keys: ArrayView2<T>) -> Vec<usize> {
    let affinity = keys.dot(&queries.t());
    affinity
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_value = row[0];
            for (n, &v) in row.iter().enumerate().skip(1) {
                if v > best_value {
                    best = n;
                    best_value = v;
                }
            }
            best
        })
        .collect()
}

pub fn cluster_counts(assignment: &[usize], clusters: usize) -> Vec<usize> {
    let mut counts = vec![0; clusters];
    for &a in assignment {
        counts[a] += 1;
    }
    counts
}

/// Pools `values` per cluster, visiting pixels in order.
pub fn aggregate<T: Real>(
    assignment: &[usize],
    counts: &[usize],
    values: ArrayView2<T>,
    aggregation: Aggregation,
) -> Array2<T> {
    let mut pooled = Array2::zeros((counts.len(), values.ncols()));
    for (&a, v) in assignment.iter().zip(values.outer_iter()) {
        let mut row = pooled.row_mut(a);
        row += &v;
    }
    if aggregation == Aggregation::Mean {
        for (mut row, &count) in pooled.outer_iter_mut().zip(counts) {
            if count > 0 {
                let scale = T::from(count).unwrap();
                row.mapv_inplace(|x| x / scale);
            }
        }
    }
    pooled
}

/// `components + argmax_N(components keys^T) values`.
pub fn cluster_update<T: Real>(
    components: ArrayView2<T>,
    keys: ArrayView2<T>,
    values: ArrayView2<T>,
    aggregation: Aggregation,
) -> ClusterUpdate<T> {
    assert_eq!(components.ncols(), keys.ncols(), "component/key channels differ");
    assert_eq!(keys.nrows(), values.nrows(), "key/value pixel counts differ");
    let assignment = assign(components, keys);
    let counts = cluster_counts(&assignment, components.nrows());
    let pooled = aggregate(&assignment, &counts, values, aggregation);
    ClusterUpdate {
        updated: &components + &pooled,
        assignment,
        counts,
    }
}

/// `components + softmax_HW(components keys^T) values`.
pub fn softmax_update<T: Real>(
    components: ArrayView2<T>,
    keys: ArrayView2<T>,
    values: ArrayView2<T>,
) -> Array2<T> {
    assert_eq!(components.ncols(), keys.ncols(), "component/key channels differ");
    assert_eq!(keys.nrows(), values.nrows(), "key/value pixel counts differ");
    let mut affinity = components.dot(&keys.t());
    for mut row in affinity.axis_iter_mut(Axis(0)) {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    &components + &affinity.dot(&values)
}
