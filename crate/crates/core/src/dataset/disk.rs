//! Directory layout:
//!
//! ```text
//! dataset.json          {"taxonomy": "taxonomy.json", "samples": ["scene_0000", ...]}
//! <name>.png            8-bit RGB image
//! <name>.part.png       8-bit grayscale or indexed map of part class ids
//! <name>.object.png     optional, object class ids
//! ```
//!
//! Without a manifest, every `*.part.png` in the directory is a sample.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{derive_object_labels, Sample};
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

pub const MANIFEST_FILE: &str = "dataset.json";
const TAXONOMY_FILE: &str = "taxonomy.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Path of the taxonomy file, relative to the dataset directory.
    pub taxonomy: String,
    pub samples: Vec<String>,
}

pub fn read_rgb_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn write_rgb_image(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = |c: usize| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        *px = Rgb([v(0), v(1), v(2)]);
    }
    img.save(path)?;
    Ok(())
}

/// Reads raw 8-bit class ids; palettes are not expanded.
pub fn read_label_map(path: &Path) -> Result<Array2<u16>> {
    let dataset_err = |message: String| Error::Dataset {
        path: path.to_path_buf(),
        message,
    };
    let file = BufReader::new(File::open(path)?);
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| dataset_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| dataset_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| dataset_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::Indexed)
    {
        return Err(dataset_err(format!(
            "label maps must be 8-bit grayscale or indexed, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w];
        for x in 0..w {
            out[[y, x]] = row[x] as u16;
        }
    }
    Ok(out)
}

pub fn write_label_map(path: &Path, labels: &Array2<u16>) -> Result<()> {
    let (h, w) = labels.dim();
    let mut data = Vec::with_capacity(h * w);
    for &v in labels.iter() {
        if v > u8::MAX as u16 {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                message: format!("class id {v} does not fit an 8-bit label map"),
            });
        }
        data.push(v as u8);
    }
    let encode_err = |e: png::EncodingError| Error::Dataset {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(&data).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(())
}

/// Writes samples, the taxonomy and the manifest into `dir`.
pub fn write_dataset(dir: &Path, taxonomy: &Taxonomy, samples: &[(String, Sample)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(TAXONOMY_FILE), taxonomy.to_json())?;
    for (name, sample) in samples {
        write_rgb_image(&dir.join(format!("{name}.png")), &sample.image)?;
        write_label_map(&dir.join(format!("{name}.part.png")), &sample.part_labels)?;
        write_label_map(&dir.join(format!("{name}.object.png")), &sample.object_labels)?;
    }
    let manifest = DatasetManifest {
        taxonomy: TAXONOMY_FILE.to_string(),
        samples: samples.iter().map(|(n, _)| n.clone()).collect(),
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads the manifest's taxonomy and every listed sample.
pub fn open_dataset(dir: &Path) -> Result<(Taxonomy, Vec<(String, Sample)>)> {
    let manifest = read_manifest(dir)?.ok_or_else(|| Error::Dataset {
        path: dir.to_path_buf(),
        message: format!("missing {MANIFEST_FILE}"),
    })?;
    let taxonomy = Taxonomy::load(&dir.join(&manifest.taxonomy))?;
    let samples = load_named_dataset(dir, &taxonomy)?;
    Ok((taxonomy, samples))
}

pub fn load_dataset(dir: &Path, taxonomy: &Taxonomy) -> Result<Vec<Sample>> {
    Ok(load_named_dataset(dir, taxonomy)?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

pub fn load_named_dataset(dir: &Path, taxonomy: &Taxonomy) -> Result<Vec<(String, Sample)>> {
    if !dir.is_dir() {
        return Err(Error::Dataset {
            path: dir.to_path_buf(),
            message: "not a directory".into(),
        });
    }
    let names = match read_manifest(dir)? {
        Some(m) => m.samples,
        None => scan_names(dir)?,
    };
    names
        .into_iter()
        .map(|name| {
            let sample = load_sample(dir, &name, taxonomy)?;
            Ok((name, sample))
        })
        .collect()
}

fn read_manifest(dir: &Path) -> Result<Option<DatasetManifest>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(path)?)?))
}

fn scan_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let file_name = entry?.file_name();
        if let Some(name) = file_name.to_str().and_then(|n| n.strip_suffix(".part.png")) {
            names.push(name.to_string());
        }
    }
    names.sort();
    Ok(names)
}

fn load_sample(dir: &Path, name: &str, taxonomy: &Taxonomy) -> Result<Sample> {
    let image_path = dir.join(format!("{name}.png"));
    let part_path = dir.join(format!("{name}.part.png"));
    let object_path = dir.join(format!("{name}.object.png"));

    let image = read_rgb_image(&image_path)?;
    let part_labels = read_label_map(&part_path)?;
    let (h, w, _) = image.dim();
    check_size(&part_path, part_labels.dim(), (h, w))?;

    let num_parts = taxonomy.num_parts();
    if let Some(((y, x), &label)) = part_labels
        .indexed_iter()
        .find(|(_, &v)| v as usize >= num_parts)
    {
        return Err(Error::LabelOutOfRange {
            path: part_path,
            x: x as u32,
            y: y as u32,
            label: label as u32,
            count: num_parts,
        });
    }

    let derived = derive_object_labels(&part_labels, taxonomy)?;
    let object_labels = if object_path.exists() {
        let stored = read_label_map(&object_path)?;
        check_size(&object_path, stored.dim(), (h, w))?;
        if let Some(((y, x), (&s, &d))) = stored
            .indexed_iter()
            .zip(derived.iter())
            .map(|((i, s), d)| (i, (s, d)))
            .find(|(_, (s, d))| s != d)
        {
            return Err(Error::Dataset {
                path: object_path,
                message: format!(
                    "object label {s} at pixel (x={x}, y={y}) contradicts part parent {d}"
                ),
            });
        }
        stored
    } else {
        derived
    };

    Ok(Sample {
        image,
        part_labels,
        object_labels,
    })
}

fn check_size(path: &Path, got: (usize, usize), expected: (usize, usize)) -> Result<()> {
    if got != expected {
        return Err(Error::Dataset {
            path: PathBuf::from(path),
            message: format!(
                "label map is {}x{} but image is {}x{}",
                got.1, got.0, expected.1, expected.0
            ),
        });
    }
    Ok(())
}
