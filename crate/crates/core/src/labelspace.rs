//! Label catalogs and their co-occurrence constraints.
//!
//! A [`LabelSpace`] is an ordered list of named labels plus two kinds of
//! constraint groups: pair groups (labels that usually co-occur; violations
//! are advisory) and exclusion groups (labels that must not co-occur;
//! violations are hard). Label order is fixed for the life of a corpus:
//! index `i` always refers to the same label.
//!
//! The bundled catalogs carry 24 instructional activity labels and 19
//! instructional discourse labels.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One catalog entry: a verbatim label name and a one-sentence definition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDef {
    pub name: String,
    pub description: String,
}

/// Catalog file record: a label plus optional constraint-group tags.
/// Labels sharing a `pair_tags` entry form a pair group; labels sharing an
/// `exclusion_tags` entry form an exclusion group.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CatalogRecord {
    name: String,
    description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pair_tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    exclusion_tags: Vec<String>,
}

/// An ordered label catalog with pairing/exclusion constraint sets.
///
/// Immutable after load; safe to share across threads.
#[derive(Debug, Clone, Serialize)]
pub struct LabelSpace {
    name: String,
    labels: Vec<LabelDef>,
    pair_groups: Vec<Vec<String>>,
    exclusion_groups: Vec<Vec<String>>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

/// A constraint finding from [`LabelSpace::check_constraints`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// Two or more members of an exclusion group are active. Hard violation.
    Exclusion {
        group: Vec<String>,
        active: Vec<String>,
    },
    /// Exactly one member of a pair group is active. Advisory only: the
    /// catalogs say "usually paired", never "always".
    Unpaired {
        group: Vec<String>,
        active: String,
    },
}

impl Violation {
    pub fn is_advisory(&self) -> bool {
        matches!(self, Violation::Unpaired { .. })
    }
}

impl LabelSpace {
    /// Parses a label space from catalog text (UTF-8, one JSON record per
    /// line). File order fixes the label order.
    pub fn from_catalog_str(name: &str, text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        let mut index = HashMap::new();
        // tag -> member names, in first-seen order
        let mut pair_tags: Vec<(String, Vec<String>)> = Vec::new();
        let mut exclusion_tags: Vec<(String, Vec<String>)> = Vec::new();

        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: CatalogRecord =
                serde_json::from_str(line).map_err(|e| Error::Record {
                    path: format!("catalog {name}"),
                    line: lineno + 1,
                    msg: e.to_string(),
                })?;
            if rec.name.trim().is_empty() {
                return Err(Error::invalid(format!(
                    "catalog {name} line {}: empty label name",
                    lineno + 1
                )));
            }
            if rec.description.trim().is_empty() {
                return Err(Error::invalid(format!(
                    "catalog {name} line {}: empty description for {:?}",
                    lineno + 1,
                    rec.name
                )));
            }
            if index.contains_key(&rec.name) {
                return Err(Error::DuplicateLabel(rec.name));
            }
            index.insert(rec.name.clone(), labels.len());
            for tag in &rec.pair_tags {
                push_tag(&mut pair_tags, tag, &rec.name);
            }
            for tag in &rec.exclusion_tags {
                push_tag(&mut exclusion_tags, tag, &rec.name);
            }
            labels.push(LabelDef {
                name: rec.name,
                description: rec.description,
            });
        }
        if labels.is_empty() {
            return Err(Error::invalid(format!("catalog {name} has no labels")));
        }

        let collect = |tags: Vec<(String, Vec<String>)>, kind: &str| -> Result<Vec<Vec<String>>> {
            let mut groups = Vec::new();
            for (tag, members) in tags {
                if members.len() < 2 {
                    return Err(Error::invalid(format!(
                        "catalog {name}: {kind} tag {tag:?} has fewer than two members"
                    )));
                }
                groups.push(members);
            }
            Ok(groups)
        };

        Ok(LabelSpace {
            name: name.to_string(),
            labels,
            pair_groups: collect(pair_tags, "pair")?,
            exclusion_groups: collect(exclusion_tags, "exclusion")?,
            index,
        })
    }

    /// Loads a label space from a catalog file. The space name is the file
    /// stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "space".to_string());
        let text = std::fs::read_to_string(path)?;
        Self::from_catalog_str(&name, &text)
    }

    /// The bundled 24-label instructional activity catalog.
    pub fn bundled_activity() -> Arc<LabelSpace> {
        static SPACE: OnceLock<Arc<LabelSpace>> = OnceLock::new();
        SPACE
            .get_or_init(|| {
                Arc::new(
                    LabelSpace::from_catalog_str(
                        "activity",
                        include_str!("../assets/labels/activity.jsonl"),
                    )
                    .expect("bundled activity catalog is valid"),
                )
            })
            .clone()
    }

    /// The bundled 19-label instructional discourse catalog.
    pub fn bundled_discourse() -> Arc<LabelSpace> {
        static SPACE: OnceLock<Arc<LabelSpace>> = OnceLock::new();
        SPACE
            .get_or_init(|| {
                Arc::new(
                    LabelSpace::from_catalog_str(
                        "discourse",
                        include_str!("../assets/labels/discourse.jsonl"),
                    )
                    .expect("bundled discourse catalog is valid"),
                )
            })
            .clone()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[LabelDef] {
        &self.labels
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(|l| l.name.as_str())
    }

    /// Index of a label by exact (byte-equal) name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn pair_groups(&self) -> &[Vec<String>] {
        &self.pair_groups
    }

    pub fn exclusion_groups(&self) -> &[Vec<String>] {
        &self.exclusion_groups
    }

    /// Checks a multi-hot vector against the constraint sets.
    ///
    /// Returns one [`Violation::Exclusion`] per exclusion group with two or
    /// more active members and one advisory [`Violation::Unpaired`] per pair
    /// group with exactly one active member.
    pub fn check_constraints(&self, v: &[u8]) -> Result<Vec<Violation>> {
        if v.len() != self.labels.len() {
            return Err(Error::LengthMismatch {
                expected: self.labels.len(),
                got: v.len(),
            });
        }
        let active = |name: &str| v[self.index[name]] != 0;
        let mut out = Vec::new();
        for group in &self.exclusion_groups {
            let on: Vec<String> = group.iter().filter(|n| active(n)).cloned().collect();
            if on.len() >= 2 {
                out.push(Violation::Exclusion {
                    group: group.clone(),
                    active: on,
                });
            }
        }
        for group in &self.pair_groups {
            let on: Vec<String> = group.iter().filter(|n| active(n)).cloned().collect();
            if on.len() == 1 {
                out.push(Violation::Unpaired {
                    group: group.clone(),
                    active: on.into_iter().next().unwrap(),
                });
            }
        }
        Ok(out)
    }
}

fn push_tag(tags: &mut Vec<(String, Vec<String>)>, tag: &str, name: &str) {
    if let Some((_, members)) = tags.iter_mut().find(|(t, _)| t == tag) {
        members.push(name.to_string());
    } else {
        tags.push((tag.to_string(), vec![name.to_string()]));
    }
}
