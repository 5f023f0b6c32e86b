use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Ring {
    entries: Vec<Vec<f64>>,
    cursor: usize,
}

/// Per-class ring buffers of detached component snapshots.
///
/// Equality compares the entries in age order, not the physical ring layout,
/// so a bank rebuilt from its class matrices equals the original.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    level: &'static str,
    capacity: usize,
    dim: usize,
    rings: Vec<Ring>,
}

impl PartialEq for MemoryBank {
    fn eq(&self, other: &Self) -> bool {
        self.level == other.level
            && self.capacity == other.capacity
            && self.dim == other.dim
            && self.rings.len() == other.rings.len()
            && (0..self.rings.len()).all(|c| self.entries(c).eq(other.entries(c)))
    }
}

impl MemoryBank {
    pub fn new(level: &'static str, num_classes: usize, capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory bank capacity must be at least 1".into()));
        }
        Ok(Self {
            level,
            capacity,
            dim,
            rings: vec![
                Ring {
                    entries: Vec::new(),
                    cursor: 0,
                };
                num_classes
            ],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.rings.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn ring(&self, class: usize) -> Result<&Ring> {
        self.rings.get(class).ok_or(Error::ClassOutOfRange {
            level: self.level,
            id: class,
            count: self.rings.len(),
        })
    }

    pub fn fill(&self, class: usize) -> Result<usize> {
        Ok(self.ring(class)?.entries.len())
    }

    /// Slot the next push writes to.
    pub fn cursor(&self, class: usize) -> Result<usize> {
        Ok(self.ring(class)?.cursor)
    }

    pub fn is_empty(&self) -> bool {
        self.rings.iter().all(|r| r.entries.is_empty())
    }

    /// Stores a copy of `embedding`, evicting the oldest entry when full.
    pub fn push(&mut self, class: usize, embedding: &[f64]) -> Result<()> {
        self.ring(class)?;
        if embedding.len() != self.dim {
            return Err(Error::Shape(format!(
                "bank entry has {} channels, expected {}",
                embedding.len(),
                self.dim
            )));
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} bank entry for class {class}", self.level)));
        }
        let capacity = self.capacity;
        let ring = &mut self.rings[class];
        if ring.entries.len() < capacity {
            ring.entries.push(embedding.to_vec());
        } else {
            ring.entries[ring.cursor] = embedding.to_vec();
        }
        ring.cursor = (ring.cursor + 1) % capacity;
        Ok(())
    }

    /// Entries of one class, oldest first. Out-of-range classes yield nothing.
    pub fn entries(&self, class: usize) -> impl Iterator<Item = &[f64]> {
        let (head, tail): (&[Vec<f64>], &[Vec<f64>]) = match self.rings.get(class) {
            Some(r) if r.entries.len() == self.capacity => {
                let (a, b) = r.entries.split_at(r.cursor);
                (b, a)
            }
            Some(r) => (&r.entries, &[]),
            None => (&[], &[]),
        };
        head.iter().chain(tail).map(Vec::as_slice)
    }

    /// Every entry as `(class, embedding)`, by class then age.
    pub fn all_entries(&self) -> impl Iterator<Item = (usize, &[f64])> {
        (0..self.rings.len()).flat_map(move |c| self.entries(c).map(move |e| (c, e)))
    }

    /// `fill x D` matrix of one class, oldest first.
    pub fn class_matrix(&self, class: usize) -> Result<Array2<f64>> {
        let fill = self.fill(class)?;
        let data: Vec<f64> = self.entries(class).flatten().copied().collect();
        Ok(Array2::from_shape_vec((fill, self.dim), data).expect("bank entries have fixed width"))
    }

    /// Rebuilds a bank from per-class matrices in oldest-first order.
    pub fn from_matrices(level: &'static str, capacity: usize, dim: usize, matrices: &[Array2<f64>]) -> Result<Self> {
        let mut bank = Self::new(level, matrices.len(), capacity, dim)?;
        for (class, m) in matrices.iter().enumerate() {
            if m.nrows() > capacity {
                return Err(Error::Checkpoint(format!(
                    "{level} bank class {class} holds {} entries, capacity is {capacity}",
                    m.nrows()
                )));
            }
            for row in m.outer_iter() {
                bank.push(class, &row.to_vec())?;
            }
        }
        Ok(bank)
    }
}
