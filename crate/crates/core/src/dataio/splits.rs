use std::collections::{BTreeMap, BTreeSet};

use super::Split;
use crate::error::{Error, Result};

/// Training-pool images assigned to `train` on the real dataset; the rest of
/// the pool is validation.
pub const REAL_TRAIN_COUNT: usize = 24;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, image_id: &str) -> Option<Split> {
        self.assignment.get(image_id).copied()
    }

    /// Ids in `split`, in lexicographic order.
    pub fn ids(&self, split: Split) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Split)> {
        self.assignment.iter()
    }

    /// `image_id<TAB>split` per line.
    pub fn to_tsv(&self) -> String {
        self.assignment
            .iter()
            .map(|(id, s)| format!("{id}\t{s}\n"))
            .collect()
    }

    /// Parses a split file; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut assignment = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let (Some(id), Some(split), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::Config(format!("split file line {}: expected `image_id split`", n + 1)));
            };
            let split: Split = split.parse()?;
            if assignment.insert(id.to_string(), split).is_some() {
                return Err(Error::Config(format!("split file line {}: duplicate image id {id}", n + 1)));
            }
        }
        Ok(SplitAssignment { assignment })
    }
}

/// Assigns the training pool to train/val and the test images to test.
///
/// With a split file the pool assignment is taken verbatim: every pool id
/// must appear and every listed id must exist. Without one the pool is sorted
/// lexicographically and the first `train_count` ids become train.
pub fn make_splits(
    pool_ids: &[String],
    test_ids: &[String],
    train_count: usize,
    split_file: Option<&str>,
) -> Result<SplitAssignment> {
    let pool: BTreeSet<&String> = pool_ids.iter().collect();
    let test: BTreeSet<&String> = test_ids.iter().collect();
    if pool.len() != pool_ids.len() || test.len() != test_ids.len() {
        return Err(Error::Config("duplicate image id in dataset".into()));
    }
    if let Some(id) = pool.intersection(&test).next() {
        return Err(Error::Config(format!("image {id} is in both the training pool and the test set")));
    }
    let mut assignment: BTreeMap<String, Split> = test.iter().map(|id| ((*id).clone(), Split::Test)).collect();
    match split_file {
        Some(text) => {
            let file = SplitAssignment::parse(text)?;
            for (id, split) in file.assignment {
                if !pool.contains(&id) && !test.contains(&id) {
                    return Err(Error::Config(format!("split file references unknown image id {id}")));
                }
                assignment.insert(id, split);
            }
            if let Some(id) = pool.iter().find(|id| !assignment.contains_key(id.as_str())) {
                return Err(Error::Config(format!("split file does not assign image {id}")));
            }
        }
        None => {
            if train_count > pool.len() {
                return Err(Error::Config(format!(
                    "train_count {train_count} exceeds the {} pool images",
                    pool.len()
                )));
            }
            for (i, id) in pool.iter().enumerate() {
                let split = if i < train_count { Split::Train } else { Split::Val };
                assignment.insert((*id).clone(), split);
            }
        }
    }
    Ok(SplitAssignment { assignment })
}
