use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::MemoryBank;
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

/// Number of hardest negatives kept in the denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "HardKRepr", into = "HardKRepr")]
pub enum HardK {
    All,
    TopK(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum HardKRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<HardKRepr> for HardK {
    type Error = String;

    fn try_from(value: HardKRepr) -> std::result::Result<Self, String> {
        match value {
            HardKRepr::Count(k) => Ok(HardK::TopK(k)),
            HardKRepr::Word(w) if w.eq_ignore_ascii_case("all") => Ok(HardK::All),
            HardKRepr::Word(w) => Err(format!("hard_k must be a count or \"all\", got `{w}`")),
        }
    }
}

impl From<HardK> for HardKRepr {
    fn from(value: HardK) -> Self {
        match value {
            HardK::All => HardKRepr::Word("all".into()),
            HardK::TopK(k) => HardKRepr::Count(k),
        }
    }
}

/// Which of the three contrastive terms a temperature applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContrastKind {
    Part,
    Object,
    Logic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastConfig {
    pub temperature: f64,
    /// Ring capacity `S` per class.
    pub bank_size: usize,
    pub hard_k: HardK,
    /// Cosine similarity when set, plain dot product otherwise.
    pub normalize: bool,
    pub part_temperature: Option<f64>,
    pub object_temperature: Option<f64>,
    pub logic_temperature: Option<f64>,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            temperature: 0.3,
            bank_size: 100,
            hard_k: HardK::TopK(100),
            normalize: true,
            part_temperature: None,
            object_temperature: None,
            logic_temperature: None,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        let temps = [
            Some(self.temperature),
            self.part_temperature,
            self.object_temperature,
            self.logic_temperature,
        ];
        if temps.iter().flatten().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::Config("contrastive temperatures must be positive".into()));
        }
        if self.hard_k == HardK::TopK(0) {
            return Err(Error::Config("hard_k must be at least 1".into()));
        }
        if self.bank_size == 0 {
            return Err(Error::Config("bank_size must be at least 1".into()));
        }
        Ok(())
    }

    /// This configuration with the per-loss temperature override applied.
    pub fn for_loss(&self, kind: ContrastKind) -> ContrastConfig {
        let tau = match kind {
            ContrastKind::Part => self.part_temperature,
            ContrastKind::Object => self.object_temperature,
            ContrastKind::Logic => self.logic_temperature,
        };
        ContrastConfig {
            temperature: tau.unwrap_or(self.temperature),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastOutput {
    /// Summed over contributing anchors.
    pub loss: f64,
    /// `d loss / d anchor`, one row per anchor.
    pub grads: Array2<f64>,
    pub used: usize,
    /// Anchors without positives in the bank.
    pub skipped: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d > 0.0 {
        dot(a, b) / d
    } else {
        0.0
    }
}

/// Loss of a single anchor and its gradient:
/// `mean_pos -log(exp(s_pos / tau) / sum_{pos + neg} exp(s / tau))`.
///
/// Returns zero loss and gradient when `positives` is empty.
pub fn anchor_loss(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    temperature: f64,
    normalize: bool,
) -> (f64, Vec<f64>) {
    let d = anchor.len();
    if positives.is_empty() {
        return (0.0, vec![0.0; d]);
    }
    let anchor_norm = norm(anchor);
    let unit = |v: &[f64]| -> Vec<f64> {
        let n = norm(v);
        if n > 0.0 {
            v.iter().map(|x| x / n).collect()
        } else {
            vec![0.0; v.len()]
        }
    };
    let a_hat = if normalize { unit(anchor) } else { anchor.to_vec() };
    let others: Vec<Vec<f64>> = positives
        .iter()
        .chain(negatives)
        .map(|v| if normalize { unit(v) } else { v.to_vec() })
        .collect();
    let sims: Vec<f64> = others.iter().map(|o| dot(&a_hat, o)).collect();
    let scaled: Vec<f64> = sims.iter().map(|s| s / temperature).collect();
    let max = scaled.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let total: f64 = scaled.iter().map(|v| (v - max).exp()).sum();
    let lse = max + total.ln();
    let np = positives.len() as f64;
    let pos_mean = scaled[..positives.len()].iter().sum::<f64>() / np;
    let loss = lse - pos_mean;

    // d loss / d sim_k = (softmax_k - [k positive] / |P|) / tau
    let mut grad_hat = vec![0.0; d];
    for (k, o) in others.iter().enumerate() {
        let mut w = (scaled[k] - max).exp() / total;
        if k < positives.len() {
            w -= 1.0 / np;
        }
        w /= temperature;
        for (g, x) in grad_hat.iter_mut().zip(o) {
            *g += w * x;
        }
    }
    if !normalize {
        return (loss, grad_hat);
    }
    if anchor_norm == 0.0 {
        return (loss, vec![0.0; d]);
    }
    let proj = dot(&grad_hat, &a_hat);
    let grad = grad_hat
        .iter()
        .zip(&a_hat)
        .map(|(g, u)| (g - proj * u) / anchor_norm)
        .collect();
    (loss, grad)
}

/// Canonical-order indices of the selected negatives among `candidates`.
fn select_hard(anchor: &[f64], candidates: &[&[f64]], k: HardK) -> Vec<usize> {
    match k {
        HardK::TopK(k) if k < candidates.len() => {
            let mut ranked = rank_by_cosine(anchor, candidates);
            ranked.truncate(k);
            ranked.sort_unstable();
            ranked
        }
        _ => (0..candidates.len()).collect(),
    }
}

/// Indices sorted by descending cosine to `anchor`; earlier entries win ties.
fn rank_by_cosine(anchor: &[f64], candidates: &[&[f64]]) -> Vec<usize> {
    let sims: Vec<f64> = candidates.iter().map(|c| cosine(anchor, c)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(Ordering::Equal));
    order
}

/// The `k` entries outside `anchor_class` most cosine-similar to `anchor`,
/// most similar first.
pub fn hard_negatives<'a>(
    anchor: &[f64],
    bank: &'a MemoryBank,
    anchor_class: usize,
    k: HardK,
) -> Vec<(usize, &'a [f64])> {
    let candidates: Vec<(usize, &[f64])> = bank.all_entries().filter(|(c, _)| *c != anchor_class).collect();
    let vectors: Vec<&[f64]> = candidates.iter().map(|(_, v)| *v).collect();
    let mut ranked = rank_by_cosine(anchor, &vectors);
    if let HardK::TopK(k) = k {
        ranked.truncate(k);
    }
    ranked.into_iter().map(|i| candidates[i]).collect()
}

fn contrast(
    anchors: ArrayView2<f64>,
    positive_classes: &[usize],
    bank: &MemoryBank,
    cfg: &ContrastConfig,
) -> Result<ContrastOutput> {
    if anchors.ncols() != bank.dim() {
        return Err(Error::Shape(format!(
            "anchors have {} channels, bank stores {}",
            anchors.ncols(),
            bank.dim()
        )));
    }
    let mut out = ContrastOutput {
        loss: 0.0,
        grads: Array2::zeros(anchors.dim()),
        used: 0,
        skipped: 0,
    };
    for (i, &class) in positive_classes.iter().enumerate() {
        if class >= bank.num_classes() {
            return Err(Error::ClassOutOfRange {
                level: "bank",
                id: class,
                count: bank.num_classes(),
            });
        }
        let positives: Vec<&[f64]> = bank.entries(class).collect();
        if positives.is_empty() {
            out.skipped += 1;
            continue;
        }
        let anchor = anchors.row(i).to_vec();
        let candidates: Vec<&[f64]> = bank
            .all_entries()
            .filter(|(c, _)| *c != class)
            .map(|(_, v)| v)
            .collect();
        let negatives: Vec<&[f64]> = select_hard(&anchor, &candidates, cfg.hard_k)
            .into_iter()
            .map(|j| candidates[j])
            .collect();
        let (loss, grad) = anchor_loss(&anchor, &positives, &negatives, cfg.temperature, cfg.normalize);
        out.loss += loss;
        for (g, v) in out.grads.row_mut(i).iter_mut().zip(grad) {
            *g = v;
        }
        out.used += 1;
    }
    Ok(out)
}

/// Anchors contrasted against the bank of their own level: positives are
/// entries of the anchor's class.
pub fn loss_within_level(
    anchors: ArrayView2<f64>,
    anchor_classes: &[usize],
    bank: &MemoryBank,
    cfg: &ContrastConfig,
) -> Result<ContrastOutput> {
    if anchors.nrows() != anchor_classes.len() {
        return Err(Error::Shape(format!(
            "{} anchors but {} classes",
            anchors.nrows(),
            anchor_classes.len()
        )));
    }
    contrast(anchors, anchor_classes, bank, cfg)
}

/// Part anchors contrasted against the object bank: positives are entries of
/// the part's parent object.
pub fn loss_logic(
    part_anchors: ArrayView2<f64>,
    part_classes: &[usize],
    object_bank: &MemoryBank,
    taxonomy: &Taxonomy,
    cfg: &ContrastConfig,
) -> Result<ContrastOutput> {
    if part_anchors.nrows() != part_classes.len() {
        return Err(Error::Shape(format!(
            "{} anchors but {} classes",
            part_anchors.nrows(),
            part_classes.len()
        )));
    }
    let mut parents = Vec::with_capacity(part_classes.len());
    for &p in part_classes {
        if p >= taxonomy.num_parts() {
            return Err(Error::ClassOutOfRange {
                level: "part",
                id: p,
                count: taxonomy.num_parts(),
            });
        }
        parents.push(taxonomy.parent_index(p));
    }
    contrast(part_anchors, &parents, object_bank, cfg)
}
