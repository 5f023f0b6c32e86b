//! Fixed-matching targets, the weighted training objective and the
//! deterministic optimisation loop.

mod config;
mod optim;
mod seg_loss;
mod targets;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, LossWeights, TrainConfig};
pub use optim::AdamW;
pub use seg_loss::{seg_loss, SegLoss};
pub use targets::{fixed_targets, ClassMasks};

use crate::contrastive::{loss_logic, loss_within_level, ContrastKind, MemoryBank};
use crate::dataset::{present_classes, Sample};
use crate::error::{Error, Result};
use crate::model::{Network, OutputGrads};
use crate::taxonomy::Taxonomy;

/// Learned parameters together with the memory banks they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub network: Network<f32>,
    pub part_bank: MemoryBank,
    pub object_bank: MemoryBank,
}

impl TrainedModel {
    /// Freshly initialised model for `config`; depends only on the seed.
    pub fn init(config: &ExperimentConfig, taxonomy: &Taxonomy) -> Result<Self> {
        config.validate()?;
        let d = config.model.decoder.channels;
        let s = config.contrast.bank_size;
        Ok(Self {
            network: Network::init(&config.model, taxonomy.num_parts(), taxonomy.num_objects(), config.train.seed)?,
            part_bank: MemoryBank::new("part", taxonomy.num_parts(), s, d)?,
            object_bank: MemoryBank::new("object", taxonomy.num_objects(), s, d)?,
        })
    }
}

/// Batch-mean loss terms of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub seg: f64,
    pub part_ce: f64,
    pub object_ce: f64,
    pub dice: f64,
    pub part_contrast: f64,
    pub object_contrast: f64,
    pub logic: f64,
    /// Anchors left out for lack of positives, summed over the three terms.
    pub skipped_anchors: usize,
}

pub struct TrainOutput {
    pub model: TrainedModel,
    pub log: Vec<StepMetrics>,
}

struct SampleResult {
    grads: Network<f32>,
    metrics: StepMetrics,
    part_components: Array2<f64>,
    object_components: Array2<f64>,
    parts_present: Vec<usize>,
    objects_present: Vec<usize>,
}

fn sample_step(
    network: &Network<f32>,
    model: &TrainedModel,
    sample: &Sample,
    taxonomy: &Taxonomy,
    config: &ExperimentConfig,
    batch: usize,
) -> Result<SampleResult> {
    let fwd = network.forward(&sample.image)?;
    let part_logits = fwd.part_logits().mapv(f64::from);
    let object_logits = fwd.object_logits().mapv(f64::from);
    let part_components = fwd.part_components().mapv(f64::from);
    let object_components = fwd.object_components().mapv(f64::from);
    let seg = seg_loss(part_logits.view(), object_logits.view(), sample)?;

    let (parts, objects) = present_classes(sample);
    let parts_present: Vec<usize> = parts.iter().map(|p| p.index()).collect();
    let objects_present: Vec<usize> = objects.iter().map(|o| o.index()).collect();
    let part_anchors = part_components.select(ndarray::Axis(0), &parts_present);
    let object_anchors = object_components.select(ndarray::Axis(0), &objects_present);

    let c = &config.contrast;
    let part_con = loss_within_level(
        part_anchors.view(),
        &parts_present,
        &model.part_bank,
        &c.for_loss(ContrastKind::Part),
    )?;
    let object_con = loss_within_level(
        object_anchors.view(),
        &objects_present,
        &model.object_bank,
        &c.for_loss(ContrastKind::Object),
    )?;
    let logic = loss_logic(
        part_anchors.view(),
        &parts_present,
        &model.object_bank,
        taxonomy,
        &c.for_loss(ContrastKind::Logic),
    )?;

    let w = &config.loss;
    let total = w.total(seg.total, part_con.loss, object_con.loss, logic.loss);
    let scale = 1.0 / batch as f64;
    let to_f32 = |a: &Array2<f64>, weight: f64| a.mapv(|v| (v * weight * scale) as f32);

    let mut grad_part_components = Array2::<f64>::zeros(part_components.dim());
    let mut grad_object_components = Array2::<f64>::zeros(object_components.dim());
    for (row, &class) in parts_present.iter().enumerate() {
        let mut g = grad_part_components.row_mut(class);
        g.scaled_add(w.part_contrast, &part_con.grads.row(row));
        g.scaled_add(w.logic, &logic.grads.row(row));
    }
    for (row, &class) in objects_present.iter().enumerate() {
        grad_object_components
            .row_mut(class)
            .scaled_add(w.object_contrast, &object_con.grads.row(row));
    }
    let output_grads = OutputGrads {
        part_logits: to_f32(&seg.grad_part, w.seg),
        object_logits: to_f32(&seg.grad_object, w.seg),
        part_components: to_f32(&grad_part_components, 1.0),
        object_components: to_f32(&grad_object_components, 1.0),
    };
    let mut grads = network.zeros_like();
    network.backward(&fwd, &output_grads, &mut grads);

    Ok(SampleResult {
        grads,
        metrics: StepMetrics {
            total,
            seg: seg.total,
            part_ce: seg.part_ce,
            object_ce: seg.object_ce,
            dice: seg.dice,
            part_contrast: part_con.loss,
            object_contrast: object_con.loss,
            logic: logic.loss,
            skipped_anchors: part_con.skipped + object_con.skipped + logic.skipped,
            ..StepMetrics::default()
        },
        part_components,
        object_components,
        parts_present,
        objects_present,
    })
}

fn add_into(total: &mut Network<f32>, other: &Network<f32>) {
    for (dst, src) in total.tensors_mut().into_iter().zip(other.tensors()) {
        for (d, s) in dst.data.iter_mut().zip(src.data) {
            *d += *s;
        }
    }
}

/// Mean component per class over the batch samples containing it.
fn class_means(results: &[SampleResult], level_parts: bool) -> BTreeMap<usize, Vec<f64>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for r in results {
        let (present, comps) = if level_parts {
            (&r.parts_present, &r.part_components)
        } else {
            (&r.objects_present, &r.object_components)
        };
        for &c in present {
            let entry = sums.entry(c).or_insert_with(|| (vec![0.0; comps.ncols()], 0));
            for (s, v) in entry.0.iter_mut().zip(comps.row(c)) {
                *s += v;
            }
            entry.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

pub fn train(config: &ExperimentConfig, dataset: &[Sample], taxonomy: &Taxonomy) -> Result<TrainOutput> {
    train_with(config, dataset, taxonomy, |_| {})
}

/// Runs training, calling `observer` after every step.
pub fn train_with(
    config: &ExperimentConfig,
    dataset: &[Sample],
    taxonomy: &Taxonomy,
    mut observer: impl FnMut(&StepMetrics),
) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    for sample in dataset {
        sample.validate(taxonomy)?;
    }
    let mut model = TrainedModel::init(config, taxonomy)?;
    let mut optimizer = AdamW::new(&model.network, config.train.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let batch_size = config.train.batch_size;
    let mut log = Vec::with_capacity(config.train.steps);

    for step in 1..=config.train.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let results: Vec<Result<SampleResult>> = batch
            .par_iter()
            .map(|&i| sample_step(&model.network, &model, &dataset[i], taxonomy, config, batch_size))
            .collect();
        let mut samples = Vec::with_capacity(batch_size);
        for (position, r) in results.into_iter().enumerate() {
            let r = r?;
            if !r.metrics.total.is_finite() {
                log::error!("non-finite loss terms: {:?}", r.metrics);
                return Err(Error::NonFiniteLoss {
                    step,
                    position,
                    sample: batch[position],
                });
            }
            samples.push(r);
        }

        let mut grads = model.network.zeros_like();
        let mut metrics = StepMetrics::default();
        let n = samples.len() as f64;
        for r in &samples {
            add_into(&mut grads, &r.grads);
            let m = &r.metrics;
            metrics.total += m.total / n;
            metrics.seg += m.seg / n;
            metrics.part_ce += m.part_ce / n;
            metrics.object_ce += m.object_ce / n;
            metrics.dice += m.dice / n;
            metrics.part_contrast += m.part_contrast / n;
            metrics.object_contrast += m.object_contrast / n;
            metrics.logic += m.logic / n;
            metrics.skipped_anchors += m.skipped_anchors;
        }
        let lr = config.train.lr_at(step);
        optimizer.step(&mut model.network, &grads, lr);

        for (class, mean) in class_means(&samples, true) {
            model.part_bank.push(class, &mean)?;
        }
        for (class, mean) in class_means(&samples, false) {
            model.object_bank.push(class, &mean)?;
        }

        metrics.step = step;
        metrics.lr = lr;
        observer(&metrics);
        log.push(metrics);
    }
    Ok(TrainOutput { model, log })
}
