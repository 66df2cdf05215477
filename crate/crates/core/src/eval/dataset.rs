use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{EvalError, Result};
use crate::store::{ConceptId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" | "tune" | "valid" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Item {
    pub concept: ConceptId,
    pub class: u32,
    pub positive: bool,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            dev: 0.2,
        }
    }
}

impl SplitRatios {
    /// Sizes for a class of `n` positives; the test split takes the rest.
    pub fn sizes(self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train * n as f64).round() as usize).min(n);
        let dev = ((self.dev * n as f64).round() as usize).min(n - train);
        (train, dev, n - train - dev)
    }
}

/// Positive and negative (concept, class) items with their splits.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub classes: Vec<String>,
    pub items: Vec<Item>,
    /// Classes dropped because a split would have been empty.
    pub skipped_classes: Vec<String>,
    /// Concepts that belong to every class and so got no negatives.
    pub without_negatives: Vec<ConceptId>,
}

impl LabeledDataset {
    pub fn new(classes: Vec<String>, items: Vec<Item>) -> Self {
        Self {
            classes,
            items,
            skipped_classes: Vec::new(),
            without_negatives: Vec::new(),
        }
    }

    pub fn items_in(&self, split: Split) -> impl Iterator<Item = &Item> + '_ {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn class_items(&self, class: u32, split: Split) -> impl Iterator<Item = &Item> + '_ {
        self.items
            .iter()
            .filter(move |i| i.class == class && i.split == split)
    }

    /// Keeps only items whose concept passes `keep`; returns how many
    /// distinct concepts were removed.
    pub fn retain_concepts(&mut self, keep: impl Fn(ConceptId) -> bool) -> usize {
        let mut removed: Vec<ConceptId> = self
            .items
            .iter()
            .map(|i| i.concept)
            .filter(|&c| !keep(c))
            .collect();
        removed.sort_unstable();
        removed.dedup();
        self.items.retain(|i| keep(i.concept));
        removed.len()
    }
}

/// One row of a dataset TSV, resolved against a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRow {
    pub concept: ConceptId,
    pub class: String,
    pub split: Option<Split>,
}

/// Parses `word<TAB>class[<TAB>split]`. Words missing from `vocab` are
/// returned separately instead of failing.
pub fn read_dataset<R: BufRead>(
    input: R,
    vocab: &Vocabulary,
) -> Result<(Vec<DatasetRow>, Vec<String>)> {
    let mut rows = Vec::new();
    let mut unknown = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if !(2..=3).contains(&fields.len()) || fields[0].is_empty() || fields[1].is_empty() {
            return Err(EvalError::Parse {
                line: line_no,
                msg: "expected word<TAB>class[<TAB>split]".into(),
            });
        }
        let split = match fields.get(2) {
            Some(s) => Some(
                s.parse()
                    .map_err(|msg| EvalError::Parse { line: line_no, msg })?,
            ),
            None => None,
        };
        match vocab.id(fields[0]) {
            Some(concept) => rows.push(DatasetRow {
                concept,
                class: fields[1].to_string(),
                split,
            }),
            None => unknown.push(fields[0].to_string()),
        }
    }
    unknown.sort();
    unknown.dedup();
    Ok((rows, unknown))
}

pub fn read_dataset_file(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
) -> Result<(Vec<DatasetRow>, Vec<String>)> {
    read_dataset(BufReader::new(File::open(path)?), vocab)
}

/// Splits each class's positives at the given ratios (or keeps the splits
/// given in the rows when every row has one) and draws, per concept,
/// `negatives_per_concept` classes it does not belong to.
///
/// A negative item inherits the split of the concept's positive item in
/// its lowest class, so a concept never crosses splits.
pub fn split_and_negatives<R: Rng + ?Sized>(
    rows: &[DatasetRow],
    ratios: SplitRatios,
    negatives_per_concept: usize,
    rng: &mut R,
) -> Result<LabeledDataset> {
    let mut by_class: BTreeMap<&str, Vec<(ConceptId, Option<Split>)>> = BTreeMap::new();
    for r in rows {
        let members = by_class.entry(r.class.as_str()).or_default();
        if !members.iter().any(|m| m.0 == r.concept) {
            members.push((r.concept, r.split));
        }
    }
    if by_class.len() < 2 {
        return Err(EvalError::TooFewClasses(by_class.len()));
    }
    let explicit = rows.iter().all(|r| r.split.is_some());

    let mut classes = Vec::new();
    let mut skipped = Vec::new();
    let mut items = Vec::new();
    for (name, mut members) in by_class {
        members.sort_unstable_by_key(|m| m.0);
        let assigned: Vec<(ConceptId, Split)> = if explicit {
            members.iter().map(|&(c, s)| (c, s.unwrap())).collect()
        } else {
            let mut shuffled: Vec<ConceptId> = members.iter().map(|m| m.0).collect();
            shuffled.shuffle(rng);
            let (train, dev, _) = ratios.sizes(shuffled.len());
            shuffled
                .into_iter()
                .enumerate()
                .map(|(i, c)| {
                    let s = if i < train {
                        Split::Train
                    } else if i < train + dev {
                        Split::Dev
                    } else {
                        Split::Test
                    };
                    (c, s)
                })
                .collect()
        };
        let has = |s: Split| assigned.iter().any(|a| a.1 == s);
        if !(has(Split::Train) && has(Split::Dev) && has(Split::Test)) {
            warn!("class {name:?} is too small to populate every split; skipped");
            skipped.push(name.to_string());
            continue;
        }
        let class = classes.len() as u32;
        classes.push(name.to_string());
        items.extend(assigned.into_iter().map(|(concept, split)| Item {
            concept,
            class,
            positive: true,
            split,
        }));
    }
    if classes.len() < 2 {
        return Err(EvalError::TooFewClasses(classes.len()));
    }

    // concept -> (home split, classes it belongs to)
    let mut membership: BTreeMap<ConceptId, (Split, Vec<u32>)> = BTreeMap::new();
    for it in &items {
        membership
            .entry(it.concept)
            .or_insert_with(|| (it.split, Vec::new()))
            .1
            .push(it.class);
    }
    let mut without_negatives = Vec::new();
    let all: Vec<u32> = (0..classes.len() as u32).collect();
    for (concept, (split, own)) in membership {
        let candidates: Vec<u32> = all.iter().copied().filter(|c| !own.contains(c)).collect();
        if candidates.is_empty() {
            without_negatives.push(concept);
            continue;
        }
        let amount = negatives_per_concept.min(candidates.len());
        let mut chosen: Vec<u32> = rand::seq::index::sample(rng, candidates.len(), amount)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        chosen.sort_unstable();
        items.extend(chosen.into_iter().map(|class| Item {
            concept,
            class,
            positive: false,
            split,
        }));
    }
    if !without_negatives.is_empty() {
        warn!(
            "{} concepts belong to every class and get no negatives",
            without_negatives.len()
        );
    }
    items.sort_by_key(|i| (i.class, i.split, !i.positive, i.concept));
    Ok(LabeledDataset {
        classes,
        items,
        skipped_classes: skipped,
        without_negatives,
    })
}
