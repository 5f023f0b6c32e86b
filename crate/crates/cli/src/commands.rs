use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use cocal::checkpoint::Checkpoint;
use cocal::dataset::{generate_dataset, load_named_dataset, open_dataset, read_rgb_image, write_dataset, write_label_map, Sample, MANIFEST_FILE};
use cocal::inference::segment;
use cocal::metrics::{evaluate, EvalReport, LevelMetrics};
use cocal::taxonomy::Taxonomy;
use cocal::trainer::{train_with, StepMetrics};
use ndarray::Array2;
use serde::Serialize;

use crate::config::{create_dir, existing, require, RunConfig};
use crate::viz::composite;
use crate::Invalid;

pub fn gen_data(config: &RunConfig, out: PathBuf) -> anyhow::Result<()> {
    let taxonomy = match &config.paths.taxonomy {
        Some(path) => Taxonomy::load(path)?,
        None => Taxonomy::synthetic_default(),
    };
    let samples = generate_dataset(&config.scene, &taxonomy, config.count)?;
    let named: Vec<(String, Sample)> = samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("scene_{i:04}"), s))
        .collect();
    write_dataset(&out, &taxonomy, &named).with_context(|| format!("writing dataset to {}", out.display()))?;
    println!("wrote {} scenes to {}", named.len(), out.display());
    Ok(())
}

fn open_training_set(dir: &Path) -> anyhow::Result<(Taxonomy, Vec<Sample>)> {
    let dir = existing(dir.to_path_buf(), "dataset")?;
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(Invalid(format!("{} has no {MANIFEST_FILE}", dir.display())).into());
    }
    let (taxonomy, samples) = open_dataset(&dir)?;
    Ok((taxonomy, samples.into_iter().map(|(_, s)| s).collect()))
}

pub fn train(config: &RunConfig, dataset: PathBuf, out: PathBuf, checkpoint: Option<PathBuf>) -> anyhow::Result<()> {
    let (taxonomy, samples) = open_training_set(&dataset)?;
    create_dir(&out)?;
    let log_path = out.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut write_error = None;
    let result = train_with(&config.experiment, &samples, &taxonomy, |m: &StepMetrics| {
        if write_error.is_some() {
            return;
        }
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(log, "{line}") {
            write_error = Some(e);
        }
        if m.step % 100 == 0 {
            log::info!("step {} loss {:.4} lr {:.2e}", m.step, m.total, m.lr);
        }
    });
    log.flush()?;
    if let Some(e) = write_error {
        return Err(e).context("writing metrics log");
    }
    let output = result?;
    let path = checkpoint.unwrap_or_else(|| out.join("checkpoint.json"));
    Checkpoint::new(config.experiment.clone(), taxonomy, output.model).save(&path)?;
    println!("wrote {} and {}", path.display(), log_path.display());
    Ok(())
}

/// Loads a dataset against a checkpoint's taxonomy, rejecting mismatched
/// class counts.
fn open_eval_set(dir: &Path, taxonomy: &Taxonomy) -> anyhow::Result<Vec<Sample>> {
    let dir = existing(dir.to_path_buf(), "dataset")?;
    if dir.join(MANIFEST_FILE).exists() {
        let (own, samples) = open_dataset(&dir)?;
        if own.num_parts() != taxonomy.num_parts() || own.num_objects() != taxonomy.num_objects() {
            return Err(Invalid(format!(
                "dataset taxonomy has {} parts / {} objects, checkpoint has {} / {}",
                own.num_parts(),
                own.num_objects(),
                taxonomy.num_parts(),
                taxonomy.num_objects()
            ))
            .into());
        }
        return Ok(samples.into_iter().map(|(_, s)| s).collect());
    }
    Ok(load_named_dataset(&dir, taxonomy)?.into_iter().map(|(_, s)| s).collect())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: String,
    dataset: String,
    postprocess: bool,
    /// Metrics of the requested mode.
    selected: &'a LevelMetrics,
    consistency_delta: f64,
    object_miou_delta: f64,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn eval(checkpoint: PathBuf, dataset: PathBuf, out: Option<PathBuf>, postprocess: bool) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&existing(checkpoint.clone(), "checkpoint")?)?;
    let samples = open_eval_set(&dataset, &ckpt.taxonomy)?;
    let report = evaluate(&ckpt.model.network, &samples, &ckpt.taxonomy)?;
    let output = EvalOutput {
        checkpoint: checkpoint.display().to_string(),
        dataset: dataset.display().to_string(),
        postprocess,
        selected: if postprocess { &report.postprocessed } else { &report.raw },
        consistency_delta: report.postprocessed.consistency - report.raw.consistency,
        object_miou_delta: report.postprocessed.object_miou - report.raw.object_miou,
        report: &report,
    };
    let text = serde_json::to_string_pretty(&output)?;
    if let Some(dir) = out {
        create_dir(&dir)?;
        std::fs::write(dir.join("eval.json"), &text)?;
    }
    println!("{text}");
    Ok(())
}

fn input_images(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut images = Vec::new();
    for entry in std::fs::read_dir(input).with_context(|| format!("reading {}", input.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".png") && !name.ends_with(".part.png") && !name.ends_with(".object.png") && !name.ends_with(".viz.png") {
            images.push(path);
        }
    }
    images.sort();
    Ok(images)
}

#[derive(Serialize)]
struct PathSidecar {
    dtype: &'static str,
    byte_order: &'static str,
    /// `[height, width, paths]`, row-major.
    shape: [usize; 3],
    paths: Vec<[String; 2]>,
}

pub fn infer(checkpoint: PathBuf, input: PathBuf, out: PathBuf, postprocess: bool) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&existing(checkpoint, "checkpoint")?)?;
    let input = existing(input, "input")?;
    create_dir(&out)?;
    let taxonomy = &ckpt.taxonomy;
    let images = input_images(&input)?;
    for path in &images {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let image = read_rgb_image(path)?;
        let pred = segment(&image, &ckpt.model.network, taxonomy, postprocess)?;
        write_label_map(&out.join(format!("{name}.part.png")), &pred.part_map)?;
        write_label_map(&out.join(format!("{name}.object.png")), &pred.object_map)?;
        if let (Some(volume), Some(scores)) = (pred.path_volume(), &pred.path_scores) {
            let mut bytes = Vec::with_capacity(volume.len() * 4);
            for v in volume.iter() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            std::fs::write(out.join(format!("{name}.paths.f32")), bytes)?;
            let (h, w, k) = volume.dim();
            let sidecar = PathSidecar {
                dtype: "float32",
                byte_order: "little",
                shape: [h, w, k],
                paths: scores
                    .paths
                    .iter()
                    .map(|(p, o)| [taxonomy.part_name(*p).to_string(), taxonomy.object_name(*o).to_string()])
                    .collect(),
            };
            std::fs::write(out.join(format!("{name}.paths.json")), serde_json::to_string_pretty(&sidecar)?)?;
        }
        let viz = composite(&image, &pred.part_map, taxonomy.num_parts(), &pred.object_map, taxonomy.num_objects());
        viz.save(out.join(format!("{name}.viz.png")))?;
    }
    println!("segmented {} images into {}", images.len(), out.display());
    Ok(())
}

fn cosine_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let norm = |m: &Array2<f64>| {
        let mut m = m.clone();
        for mut row in m.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
        m
    };
    norm(a).dot(&norm(b).t())
}

fn write_csv(path: &Path, rows: &[String], cols: &[String], values: &Array2<f64>) -> anyhow::Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(f, "class,{}", cols.join(","))?;
    for (name, row) in rows.iter().zip(values.outer_iter()) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(f, "{name},{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum DictSource {
    /// Learned dictionary rows.
    Dictionary,
    /// Per-class mean of the memory bank entries.
    Bank,
}

fn bank_means(bank: &cocal::contrastive::MemoryBank) -> anyhow::Result<Array2<f64>> {
    let mut out = Array2::zeros((bank.num_classes(), bank.dim()));
    for c in 0..bank.num_classes() {
        let m = bank.class_matrix(c)?;
        if m.nrows() > 0 {
            out.row_mut(c).assign(&m.mean_axis(ndarray::Axis(0)).expect("non-empty"));
        }
    }
    Ok(out)
}

pub fn export_dict(checkpoint: PathBuf, out: PathBuf, source: DictSource) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&existing(checkpoint, "checkpoint")?)?;
    create_dir(&out)?;
    let (parts, objects) = match source {
        DictSource::Dictionary => (
            ckpt.model.network.dictionary.part_components.mapv(f64::from),
            ckpt.model.network.dictionary.object_components.mapv(f64::from),
        ),
        DictSource::Bank => (bank_means(&ckpt.model.part_bank)?, bank_means(&ckpt.model.object_bank)?),
    };
    let pn = ckpt.taxonomy.part_names();
    let on = ckpt.taxonomy.object_names();
    write_csv(&out.join("part_part.csv"), pn, pn, &cosine_matrix(&parts, &parts))?;
    write_csv(&out.join("object_object.csv"), on, on, &cosine_matrix(&objects, &objects))?;
    write_csv(&out.join("part_object.csv"), pn, on, &cosine_matrix(&parts, &objects))?;
    println!("wrote similarity matrices to {}", out.display());
    Ok(())
}

pub fn resolve_out(flag: Option<PathBuf>, config: &RunConfig) -> anyhow::Result<PathBuf> {
    require(flag, &config.paths.out, "output directory (--out)")
}
