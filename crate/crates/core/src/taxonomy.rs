//! Two-level semantic hierarchy: part classes grouped under object classes.
//!
//! Both index spaces end with an implicit background class. Part ids are
//! allocated object by object in document order, so the parts of one object
//! occupy a contiguous id range.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: &str = "background";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartClassId(pub u16);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectClassId(pub u16);

impl PartClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl ObjectClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for PartClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "part#{}", self.0)
    }
}

impl fmt::Display for ObjectClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "object#{}", self.0)
    }
}

/// On-disk taxonomy layout. Parts may be nested under their object or listed
/// in the flat `parts` table with an explicit object reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyDocument {
    pub objects: Vec<ObjectEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parts: Vec<PartEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub name: String,
    #[serde(default)]
    pub parts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartEntry {
    pub name: String,
    pub object: String,
}

/// Validated hierarchy. Immutable after construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    object_names: Vec<String>,
    part_short_names: Vec<String>,
    part_names: Vec<String>,
    parent: Vec<ObjectClassId>,
}

impl Taxonomy {
    pub fn from_document(doc: &TaxonomyDocument) -> Result<Self> {
        let mut object_names = Vec::with_capacity(doc.objects.len() + 1);
        let mut seen_objects = HashSet::new();
        for object in &doc.objects {
            check_name(&object.name)?;
            if !seen_objects.insert(object.name.as_str()) {
                return Err(Error::DuplicateClass(object.name.clone()));
            }
            object_names.push(object.name.clone());
        }
        for part in &doc.parts {
            if !seen_objects.contains(part.object.as_str()) {
                return Err(Error::UnknownObject {
                    part: part.name.clone(),
                    object: part.object.clone(),
                });
            }
        }

        let mut part_short_names = Vec::new();
        let mut part_names = Vec::new();
        let mut parent = Vec::new();
        let mut seen_parts = HashSet::new();
        for (index, object) in doc.objects.iter().enumerate() {
            let flat = doc
                .parts
                .iter()
                .filter(|p| p.object == object.name)
                .map(|p| &p.name);
            let mut count = 0;
            let mut local = HashSet::new();
            for short in object.parts.iter().chain(flat) {
                check_name(short)?;
                let qualified = format!("{}-{}", object.name, short);
                if !local.insert(short.as_str()) || !seen_parts.insert(qualified.clone()) {
                    return Err(Error::DuplicateClass(qualified));
                }
                part_short_names.push(short.clone());
                part_names.push(qualified);
                parent.push(ObjectClassId(index as u16));
                count += 1;
            }
            if count == 0 {
                return Err(Error::EmptyObject(object.name.clone()));
            }
        }

        let object_background = ObjectClassId(object_names.len() as u16);
        object_names.push(BACKGROUND.to_string());
        part_short_names.push(BACKGROUND.to_string());
        part_names.push(BACKGROUND.to_string());
        parent.push(object_background);

        if part_names.len() > u16::MAX as usize {
            return Err(Error::Config(format!(
                "{} part classes exceed the supported maximum",
                part_names.len()
            )));
        }

        Ok(Self {
            object_names,
            part_short_names,
            part_names,
            parent,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TaxonomyDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Nested document form; backgrounds are omitted.
    pub fn to_document(&self) -> TaxonomyDocument {
        let objects = (0..self.num_objects() - 1)
            .map(|o| ObjectEntry {
                name: self.object_names[o].clone(),
                parts: self
                    .parts_of(ObjectClassId(o as u16))
                    .map(|p| self.part_short_names[p.index()].clone())
                    .collect(),
            })
            .collect();
        TaxonomyDocument {
            objects,
            parts: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("taxonomy document serializes")
    }

    /// P, including the part background.
    pub fn num_parts(&self) -> usize {
        self.part_names.len()
    }

    /// P̃, including the object background.
    pub fn num_objects(&self) -> usize {
        self.object_names.len()
    }

    pub fn part_background(&self) -> PartClassId {
        PartClassId((self.num_parts() - 1) as u16)
    }

    pub fn object_background(&self) -> ObjectClassId {
        ObjectClassId((self.num_objects() - 1) as u16)
    }

    /// Qualified `object-part` name.
    pub fn part_name(&self, part: PartClassId) -> &str {
        &self.part_names[part.index()]
    }

    pub fn object_name(&self, object: ObjectClassId) -> &str {
        &self.object_names[object.index()]
    }

    pub fn part_names(&self) -> &[String] {
        &self.part_names
    }

    pub fn object_names(&self) -> &[String] {
        &self.object_names
    }

    pub fn part_id(&self, qualified: &str) -> Option<PartClassId> {
        self.part_names
            .iter()
            .position(|n| n == qualified)
            .map(|i| PartClassId(i as u16))
    }

    pub fn object_id(&self, name: &str) -> Option<ObjectClassId> {
        self.object_names
            .iter()
            .position(|n| n == name)
            .map(|i| ObjectClassId(i as u16))
    }

    pub fn parent_of(&self, part: PartClassId) -> Result<ObjectClassId> {
        self.parent
            .get(part.index())
            .copied()
            .ok_or(Error::ClassOutOfRange {
                level: "part",
                id: part.index(),
                count: self.num_parts(),
            })
    }

    /// Parent lookup by raw index; callers guarantee the index is valid.
    pub(crate) fn parent_index(&self, part: usize) -> usize {
        self.parent[part].index()
    }

    /// Parent object index for every part class, in part order.
    pub fn parent_table(&self) -> Vec<usize> {
        self.parent.iter().map(|o| o.index()).collect()
    }

    pub fn parts_of(&self, object: ObjectClassId) -> impl Iterator<Item = PartClassId> + '_ {
        self.parent
            .iter()
            .enumerate()
            .filter(move |(_, &o)| o == object)
            .map(|(p, _)| PartClassId(p as u16))
    }

    /// One `(part, parent)` pair per part class, in part order.
    pub fn valid_paths(&self) -> Vec<(PartClassId, ObjectClassId)> {
        self.parent
            .iter()
            .enumerate()
            .map(|(p, &o)| (PartClassId(p as u16), o))
            .collect()
    }

    /// Three objects with two or three parts each; the default synthetic benchmark.
    pub fn synthetic_default() -> Self {
        let doc = TaxonomyDocument {
            objects: vec![
                ObjectEntry {
                    name: "quad".into(),
                    parts: vec!["head".into(), "torso".into(), "tail".into()],
                },
                ObjectEntry {
                    name: "fish".into(),
                    parts: vec!["head".into(), "body".into(), "fin".into()],
                },
                ObjectEntry {
                    name: "bird".into(),
                    parts: vec!["head".into(), "body".into()],
                },
            ],
            parts: Vec::new(),
        };
        Self::from_document(&doc).expect("built-in taxonomy is valid")
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::Config("class names must be non-empty".into()));
    }
    if name == BACKGROUND {
        return Err(Error::ReservedName(name.to_string()));
    }
    Ok(())
}
