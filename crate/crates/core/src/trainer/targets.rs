use ndarray::Array2;

use crate::dataset::Sample;
use crate::taxonomy::Taxonomy;

/// Binary mask per class; mask `i` is always the target of component `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMasks {
    pub masks: Vec<Array2<bool>>,
    pub present: Vec<bool>,
}

impl ClassMasks {
    fn from_labels(labels: &Array2<u16>, classes: usize) -> Self {
        let mut masks = vec![Array2::from_elem(labels.dim(), false); classes];
        let mut present = vec![false; classes];
        for ((y, x), &l) in labels.indexed_iter() {
            let l = l as usize;
            masks[l][[y, x]] = true;
            present[l] = true;
        }
        Self { masks, present }
    }
}

/// Per-class indicator masks at both levels.
pub fn fixed_targets(sample: &Sample, taxonomy: &Taxonomy) -> (ClassMasks, ClassMasks) {
    (
        ClassMasks::from_labels(&sample.part_labels, taxonomy.num_parts()),
        ClassMasks::from_labels(&sample.object_labels, taxonomy.num_objects()),
    )
}
