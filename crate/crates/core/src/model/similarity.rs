//! Per-pixel similarity of embeddings to dictionary components.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Dot,
    /// Inner product of L2-normalized vectors divided by the temperature.
    #[default]
    Cosine,
}

/// Row L2 norms and normalized rows; zero rows stay zero.
pub(crate) fn normalize_rows<T: Real>(x: ArrayView2<T>) -> (Array2<T>, Array1<T>) {
    let norms = x.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    let mut unit = x.to_owned();
    for (mut row, &n) in unit.outer_iter_mut().zip(norms.iter()) {
        if n > T::zero() {
            row.mapv_inplace(|v| v / n);
        } else {
            row.fill(T::zero());
        }
    }
    (unit, norms)
}

/// `HW x N` logits of `embeddings` (`HW x D`) against `components` (`N x D`).
///
/// Under cosine, a zero-norm vector scores 0 against everything.
pub fn similarity_logits<T: Real>(
    embeddings: ArrayView2<T>,
    components: ArrayView2<T>,
    similarity: Similarity,
    temperature: T,
) -> Array2<T> {
    match similarity {
        Similarity::Dot => embeddings.dot(&components.t()),
        Similarity::Cosine => {
            let (e, e_norm) = normalize_rows(embeddings);
            let (c, c_norm) = normalize_rows(components);
            let zero_e = e_norm.iter().filter(|&&n| n == T::zero()).count();
            let zero_c = c_norm.iter().filter(|&&n| n == T::zero()).count();
            if zero_e + zero_c > 0 {
                log::warn!("cosine similarity: {zero_e} zero-norm embeddings, {zero_c} zero-norm components scored as 0");
            }
            let mut logits = e.dot(&c.t());
            logits.mapv_inplace(|v| v / temperature);
            logits
        }
    }
}

/// Gradients of a scalar through [`similarity_logits`], given `d loss / d logits`.
pub fn similarity_backward<T: Real>(
    embeddings: ArrayView2<T>,
    components: ArrayView2<T>,
    similarity: Similarity,
    temperature: T,
    grad_logits: ArrayView2<T>,
) -> (Array2<T>, Array2<T>) {
    match similarity {
        Similarity::Dot => (grad_logits.dot(&components), grad_logits.t().dot(&embeddings)),
        Similarity::Cosine => {
            let (e, e_norm) = normalize_rows(embeddings);
            let (c, c_norm) = normalize_rows(components);
            let g = grad_logits.mapv(|v| v / temperature);
            let grad_e_unit = g.dot(&c);
            let grad_c_unit = g.t().dot(&e);
            (
                normalize_backward(&e, &e_norm, grad_e_unit),
                normalize_backward(&c, &c_norm, grad_c_unit),
            )
        }
    }
}

/// Pulls a gradient w.r.t. unit rows back to the raw rows:
/// `(g - (g . u) u) / |x|`.
pub(crate) fn normalize_backward<T: Real>(unit: &Array2<T>, norms: &Array1<T>, mut grad: Array2<T>) -> Array2<T> {
    Zip::from(grad.rows_mut())
        .and(unit.rows())
        .and(norms)
        .for_each(|mut g, u, &n| {
            if n > T::zero() {
                let proj = g.dot(&u);
                Zip::from(&mut g).and(&u).for_each(|gv, &uv| *gv = (*gv - proj * uv) / n);
            } else {
                g.fill(T::zero());
            }
        });
    grad
}

/// Index of the nearest component per pixel by exhaustive scan, lowest index on ties.
pub fn nearest_component<T: Real>(logits: ArrayView2<T>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (n, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = n;
                }
            }
            best
        })
        .collect()
}
