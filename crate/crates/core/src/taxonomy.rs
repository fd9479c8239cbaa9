//! Multi-level label trees.
//!
//! Levels are indexed from 0 (coarsest) to `L - 1` (finest). Class ids are
//! dense per level and assigned in file order. Every class below the root
//! level has exactly one parent in the level above it; the classes of the
//! root level hang off an implicit root and are therefore mutual siblings.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One class per level, ordered coarse to fine.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelPath(pub Vec<usize>);

impl LabelPath {
    pub fn new(ids: Vec<usize>) -> Self {
        LabelPath(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn leaf(&self) -> Option<usize> {
        self.0.last().copied()
    }
}

impl std::ops::Index<usize> for LabelPath {
    type Output = usize;

    fn index(&self, level: usize) -> &usize {
        &self.0[level]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    name: String,
    classes: Vec<String>,
    /// Parent id in the previous level; empty for the root level.
    parents: Vec<usize>,
    children: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
}

impl Level {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class_names(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Children in the next level, in id order.
    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }
}

/// Immutable label hierarchy with eagerly built parent, child and sibling indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    levels: Vec<Level>,
}

/// On-disk shape of a taxonomy file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyDocument {
    pub levels: Vec<LevelDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelDocument {
    pub name: String,
    pub classes: Vec<ClassDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDocument {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

impl Taxonomy {
    pub fn from_document(doc: &TaxonomyDocument) -> Result<Self> {
        if doc.levels.is_empty() {
            return Err(Error::NoLevels);
        }
        let mut levels: Vec<Level> = Vec::with_capacity(doc.levels.len());
        for (l, level_doc) in doc.levels.iter().enumerate() {
            if level_doc.classes.is_empty() {
                return Err(Error::EmptyLevel {
                    level: l,
                    name: level_doc.name.clone(),
                });
            }
            let mut classes = Vec::with_capacity(level_doc.classes.len());
            let mut parents = Vec::new();
            let mut index: HashMap<String, usize> = HashMap::new();
            let mut parent_names: Vec<Option<&str>> = Vec::new();
            for class in &level_doc.classes {
                if let Some(&prev) = index.get(&class.name) {
                    return Err(if parent_names[prev] != class.parent.as_deref() {
                        Error::MultipleParents {
                            level: l,
                            class: class.name.clone(),
                        }
                    } else {
                        Error::DuplicateClass {
                            level: l,
                            class: class.name.clone(),
                        }
                    });
                }
                match (l, &class.parent) {
                    (0, Some(_)) => {
                        return Err(Error::RootWithParent {
                            class: class.name.clone(),
                        })
                    }
                    (0, None) => {}
                    (_, None) => {
                        return Err(Error::MissingParent {
                            level: l,
                            class: class.name.clone(),
                        })
                    }
                    (_, Some(parent)) => {
                        let pid = levels[l - 1].id_of(parent).ok_or_else(|| Error::OrphanClass {
                            level: l,
                            class: class.name.clone(),
                            parent: parent.clone(),
                        })?;
                        parents.push(pid);
                    }
                }
                index.insert(class.name.clone(), classes.len());
                parent_names.push(class.parent.as_deref());
                classes.push(class.name.clone());
            }
            if l > 0 {
                let prev = &mut levels[l - 1];
                for (id, &p) in parents.iter().enumerate() {
                    prev.children[p].push(id);
                }
            }
            levels.push(Level {
                name: level_doc.name.clone(),
                children: vec![Vec::new(); classes.len()],
                classes,
                parents,
                index,
            });
        }
        Ok(Taxonomy { levels })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: TaxonomyDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }

    /// Reads and validates a taxonomy file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: TaxonomyDocument = serde_json::from_str(&text).map_err(|e| Error::Format {
            kind: "taxonomy",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_document(&doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_document())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn to_document(&self) -> TaxonomyDocument {
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(l, level)| LevelDocument {
                name: level.name.clone(),
                classes: level
                    .classes
                    .iter()
                    .enumerate()
                    .map(|(id, name)| ClassDocument {
                        name: name.clone(),
                        parent: (l > 0).then(|| self.levels[l - 1].classes[level.parents[id]].clone()),
                    })
                    .collect(),
            })
            .collect();
        TaxonomyDocument { levels }
    }

    /// Balanced tree where level `l` gives every class of level `l - 1`
    /// `branching[l]` children (`branching[0]` is the number of roots).
    /// Class `j` at level `l` has parent `j / branching[l]`.
    pub fn balanced(branching: &[usize]) -> Result<Self> {
        if branching.is_empty() {
            return Err(Error::NoLevels);
        }
        if branching.contains(&0) {
            return Err(Error::invalid("branching", "every factor must be at least 1"));
        }
        let mut levels = Vec::with_capacity(branching.len());
        let mut width = 1usize;
        for (l, &b) in branching.iter().enumerate() {
            let prev_width = width;
            width *= b;
            let classes = (0..width)
                .map(|j| ClassDocument {
                    name: format!("l{}_{}", l + 1, j),
                    parent: (l > 0).then(|| format!("l{}_{}", l, j / b)),
                })
                .collect();
            debug_assert_eq!(width / b, prev_width);
            levels.push(LevelDocument {
                name: format!("level{}", l + 1),
                classes,
            });
        }
        Self::from_document(&TaxonomyDocument { levels })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, level: usize) -> Result<&Level> {
        self.levels.get(level).ok_or(Error::LevelOutOfRange {
            level,
            levels: self.levels.len(),
        })
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    /// Class counts per level, coarse to fine.
    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Level::len).collect()
    }

    pub fn total_classes(&self) -> usize {
        self.levels.iter().map(Level::len).sum()
    }

    fn check_class(&self, level: usize, id: usize) -> Result<&Level> {
        let lvl = self.level(level)?;
        if id >= lvl.len() {
            return Err(Error::ClassOutOfRange {
                level,
                id,
                classes: lvl.len(),
            });
        }
        Ok(lvl)
    }

    /// Parent id at `level - 1`, or `None` for root-level classes.
    pub fn parent(&self, level: usize, id: usize) -> Result<Option<usize>> {
        let lvl = self.check_class(level, id)?;
        Ok((level > 0).then(|| lvl.parents[id]))
    }

    /// Classes at `level` sharing `id`'s parent, excluding `id`, in id order.
    pub fn siblings(&self, level: usize, id: usize) -> Result<Vec<usize>> {
        let lvl = self.check_class(level, id)?;
        let group: Vec<usize> = if level == 0 {
            (0..lvl.len()).collect()
        } else {
            self.levels[level - 1].children[lvl.parents[id]].clone()
        };
        Ok(group.into_iter().filter(|&j| j != id).collect())
    }

    pub fn check_path(&self, path: &LabelPath) -> Result<()> {
        if path.len() != self.levels.len() {
            return Err(Error::PathLength {
                expected: self.levels.len(),
                got: path.len(),
            });
        }
        for (l, &id) in path.ids().iter().enumerate() {
            self.check_class(l, id)?;
        }
        Ok(())
    }

    /// True iff every class in the path is the parent of the next one.
    pub fn is_valid_path(&self, path: &LabelPath) -> Result<bool> {
        self.check_path(path)?;
        Ok(self.path_is_consistent(path.ids()))
    }

    /// Unchecked variant of [`Taxonomy::is_valid_path`] for in-range ids.
    pub(crate) fn path_is_consistent(&self, ids: &[usize]) -> bool {
        (1..ids.len()).all(|l| self.levels[l].parents[ids[l]] == ids[l - 1])
    }

    /// Root-to-leaf path ending at `leaf`.
    pub fn ancestor_path(&self, leaf: usize) -> Result<LabelPath> {
        let last = self.levels.len() - 1;
        self.check_class(last, leaf)?;
        let mut ids = vec![0; self.levels.len()];
        ids[last] = leaf;
        for l in (1..=last).rev() {
            ids[l - 1] = self.levels[l].parents[ids[l]];
        }
        Ok(LabelPath(ids))
    }

    pub fn num_leaves(&self) -> usize {
        self.levels[self.levels.len() - 1].len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Root R -> Parent1{B,C,D}, Parent2{F,G}.
    pub(crate) fn fig2() -> Taxonomy {
        Taxonomy::from_json_str(
            r#"{"levels":[
                {"name":"parent","classes":[{"name":"Parent1"},{"name":"Parent2"}]},
                {"name":"child","classes":[
                    {"name":"B","parent":"Parent1"},{"name":"C","parent":"Parent1"},
                    {"name":"D","parent":"Parent1"},{"name":"F","parent":"Parent2"},
                    {"name":"G","parent":"Parent2"}]}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn loads_three_levels() {
        let t = Taxonomy::balanced(&[2, 2, 2]).unwrap();
        assert_eq!(t.num_levels(), 3);
        assert_eq!(t.level_sizes(), vec![2, 4, 8]);
    }

    #[test]
    fn orphan_is_rejected() {
        let err = Taxonomy::from_json_str(
            r#"{"levels":[{"name":"a","classes":[{"name":"A"}]},
                {"name":"b","classes":[{"name":"X","parent":"Nope"}]}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OrphanClass { .. }));
        assert!(err.to_string().contains("orphan class"));
    }

    #[test]
    fn structural_errors() {
        let dup = r#"{"levels":[{"name":"a","classes":[{"name":"A"},{"name":"A"}]}]}"#;
        assert!(matches!(
            Taxonomy::from_json_str(dup),
            Err(Error::DuplicateClass { .. })
        ));
        let multi = r#"{"levels":[{"name":"a","classes":[{"name":"A"},{"name":"B"}]},
            {"name":"b","classes":[{"name":"x","parent":"A"},{"name":"x","parent":"B"}]}]}"#;
        assert!(matches!(
            Taxonomy::from_json_str(multi),
            Err(Error::MultipleParents { .. })
        ));
        let empty = r#"{"levels":[{"name":"a","classes":[{"name":"A"}]},{"name":"b","classes":[]}]}"#;
        assert!(matches!(
            Taxonomy::from_json_str(empty),
            Err(Error::EmptyLevel { level: 1, .. })
        ));
        let missing = r#"{"levels":[{"name":"a","classes":[{"name":"A"}]},
            {"name":"b","classes":[{"name":"x"}]}]}"#;
        assert!(matches!(
            Taxonomy::from_json_str(missing),
            Err(Error::MissingParent { .. })
        ));
        let root = r#"{"levels":[{"name":"a","classes":[{"name":"A","parent":"R"}]}]}"#;
        assert!(matches!(
            Taxonomy::from_json_str(root),
            Err(Error::RootWithParent { .. })
        ));
        assert!(matches!(
            Taxonomy::from_json_str(r#"{"levels":[]}"#),
            Err(Error::NoLevels)
        ));
    }

    #[test]
    fn fig2_siblings() {
        let t = fig2();
        let b = t.level(1).unwrap().id_of("B").unwrap();
        let names: Vec<&str> = t
            .siblings(1, b)
            .unwrap()
            .into_iter()
            .map(|j| t.level(1).unwrap().class_names()[j].as_str())
            .collect();
        assert_eq!(names, vec!["C", "D"]);
        // implicit root
        assert_eq!(t.siblings(0, 0).unwrap(), vec![1]);
        assert!(matches!(t.siblings(2, 0), Err(Error::LevelOutOfRange { .. })));
        assert!(matches!(t.siblings(1, 5), Err(Error::ClassOutOfRange { .. })));
    }

    #[test]
    fn only_child_has_no_siblings() {
        let t = Taxonomy::balanced(&[3, 1]).unwrap();
        assert!(t.siblings(1, 2).unwrap().is_empty());
        assert_eq!(t.siblings(0, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn path_validity() {
        let t = fig2();
        // (Parent2, B)
        assert!(!t.is_valid_path(&LabelPath(vec![1, 0])).unwrap());
        assert!(t.is_valid_path(&LabelPath(vec![0, 0])).unwrap());
        let single = Taxonomy::balanced(&[4]).unwrap();
        for id in 0..4 {
            assert!(single.is_valid_path(&LabelPath(vec![id])).unwrap());
        }
        assert!(matches!(
            t.is_valid_path(&LabelPath(vec![0])),
            Err(Error::PathLength { .. })
        ));
    }

    #[test]
    fn ancestor_paths() {
        let t = fig2();
        let c = t.level(1).unwrap().id_of("C").unwrap();
        assert_eq!(t.ancestor_path(c).unwrap(), LabelPath(vec![0, c]));
        let single = Taxonomy::balanced(&[1]).unwrap();
        assert_eq!(single.ancestor_path(0).unwrap(), LabelPath(vec![0]));
        assert!(t.ancestor_path(5).is_err());
    }

    /// Enumerates the balanced layout by nested loops, independent of the
    /// parent-pointer walk.
    #[test]
    fn balanced_ancestor_matches_enumeration() {
        let branching = [2, 2, 2];
        let t = Taxonomy::balanced(&branching).unwrap();
        let mut leaf = 0;
        let mut mid = 0;
        for top in 0..2 {
            for _ in 0..2 {
                for _ in 0..2 {
                    assert_eq!(t.ancestor_path(leaf).unwrap(), LabelPath(vec![top, mid, leaf]));
                    leaf += 1;
                }
                mid += 1;
            }
        }
        assert_eq!(t.ancestor_path(7).unwrap(), LabelPath(vec![1, 3, 7]));
    }

    #[test]
    fn document_round_trip() {
        let t = fig2();
        let again = Taxonomy::from_document(&t.to_document()).unwrap();
        assert_eq!(t, again);
    }
}
