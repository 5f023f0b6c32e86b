//! Samples with aligned part and object label maps, plus the synthetic scene
//! generator and the on-disk dataset format.

mod disk;
mod synth;

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::taxonomy::{ObjectClassId, PartClassId, Taxonomy};

pub use disk::{
    load_dataset, load_named_dataset, open_dataset, read_label_map, read_rgb_image,
    write_dataset, write_label_map, write_rgb_image, DatasetManifest, MANIFEST_FILE,
};
pub use synth::{generate_dataset, generate_scene, scene_seed, SceneSpec};

/// An RGB image in `[0, 1]` with per-pixel part and object labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `H x W x 3`.
    pub image: Array3<f32>,
    /// `H x W` part class indices.
    pub part_labels: Array2<u16>,
    /// `H x W` object class indices.
    pub object_labels: Array2<u16>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn num_pixels(&self) -> usize {
        self.height() * self.width()
    }

    /// Builds a sample whose object map is derived from the part map.
    pub fn from_parts(image: Array3<f32>, part_labels: Array2<u16>, taxonomy: &Taxonomy) -> Result<Self> {
        let object_labels = derive_object_labels(&part_labels, taxonomy)?;
        let sample = Self {
            image,
            part_labels,
            object_labels,
        };
        sample.validate(taxonomy)?;
        Ok(sample)
    }

    /// Checks shapes, label ranges and that every pixel lies on a valid path.
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        let (h, w, c) = self.image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("image has {c} channels, expected 3")));
        }
        if self.part_labels.dim() != (h, w) || self.object_labels.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "image is {h}x{w} but label maps are {:?} and {:?}",
                self.part_labels.dim(),
                self.object_labels.dim()
            )));
        }
        for ((y, x), (&p, &o)) in self
            .part_labels
            .indexed_iter()
            .zip(self.object_labels.iter())
            .map(|((idx, p), o)| (idx, (p, o)))
        {
            let parent = taxonomy.parent_of(PartClassId(p))?;
            if parent != ObjectClassId(o) {
                return Err(Error::Shape(format!(
                    "pixel (x={x}, y={y}) has part {p} under object {o}, expected object {}",
                    parent.0
                )));
            }
        }
        Ok(())
    }
}

pub fn derive_object_labels(part_labels: &Array2<u16>, taxonomy: &Taxonomy) -> Result<Array2<u16>> {
    let parents = taxonomy.parent_table();
    let mut out = Array2::zeros(part_labels.dim());
    for (o, &p) in out.iter_mut().zip(part_labels.iter()) {
        let parent = parents.get(p as usize).ok_or(Error::ClassOutOfRange {
            level: "part",
            id: p as usize,
            count: parents.len(),
        })?;
        *o = *parent as u16;
    }
    Ok(out)
}

/// Classes with at least one pixel in the sample, background included.
pub fn present_classes(sample: &Sample) -> (BTreeSet<PartClassId>, BTreeSet<ObjectClassId>) {
    let parts = sample.part_labels.iter().map(|&p| PartClassId(p)).collect();
    let objects = sample.object_labels.iter().map(|&o| ObjectClassId(o)).collect();
    (parts, objects)
}
