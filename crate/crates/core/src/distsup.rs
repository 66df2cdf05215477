//! Distant supervision from concept-property knowledge.
//!
//! A sentence that mentions both a concept and one of its known properties is
//! taken to express that property. Mentions grouped by property then yield
//! positive pairs.
//!
//! Matching is whole-token and case-insensitive: text is lowercased and split
//! on non-alphanumeric characters, and a multi-word surface form must appear
//! as a contiguous token run. Plural folding (`guns` matching `gun`) is off by
//! default.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use thiserror::Error;

use crate::mining::{Pair, PairSet, PairSource};
use crate::store::{ConceptId, MentionStore, Vocabulary};

#[derive(Debug, Error)]
pub enum DistSupError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("group file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, DistSupError>;

/// Properties shared by at most this many concepts are discarded.
pub const MIN_CONCEPTS_PER_PROPERTY: usize = 3;

/// Concept-property pairs after pruning rare properties.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptPropertyTable {
    entries: BTreeSet<(String, String)>,
    property_index: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    /// 1-based line numbers of malformed lines.
    pub malformed: Vec<usize>,
    pub pruned_properties: usize,
}

impl ConceptPropertyTable {
    /// Builds the table, dropping properties attached to fewer than three
    /// distinct concepts. Returns the number of dropped properties.
    pub fn from_pairs<I, C, P>(pairs: I) -> (Self, usize)
    where
        I: IntoIterator<Item = (C, P)>,
        C: Into<String>,
        P: Into<String>,
    {
        let mut property_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (c, p) in pairs {
            property_index.entry(p.into()).or_default().insert(c.into());
        }
        let before = property_index.len();
        property_index.retain(|_, cs| cs.len() >= MIN_CONCEPTS_PER_PROPERTY);
        let pruned = before - property_index.len();
        let entries = property_index
            .iter()
            .flat_map(|(p, cs)| cs.iter().map(move |c| (c.clone(), p.clone())))
            .collect();
        (
            Self {
                entries,
                property_index,
            },
            pruned,
        )
    }

    /// Parses `concept<TAB>property` lines. Blank lines and `#` comments are
    /// ignored; malformed lines are skipped and reported.
    pub fn parse<R: BufRead>(input: R) -> Result<(Self, LoadReport)> {
        let mut pairs = Vec::new();
        let mut malformed = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
            match fields.as_slice() {
                [c, p] if !c.is_empty() && !p.is_empty() => {
                    pairs.push((c.to_string(), p.to_string()))
                }
                _ => malformed.push(n + 1),
            }
        }
        if !malformed.is_empty() {
            warn!(
                "skipped {} malformed concept-property lines (first at line {})",
                malformed.len(),
                malformed[0]
            );
        }
        let (table, pruned_properties) = Self::from_pairs(pairs);
        Ok((
            table,
            LoadReport {
                malformed,
                pruned_properties,
            },
        ))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(c, p)| (c.as_str(), p.as_str()))
    }

    pub fn properties(&self) -> impl Iterator<Item = &str> {
        self.property_index.keys().map(String::as_str)
    }

    pub fn concepts_of(&self, property: &str) -> Option<&BTreeSet<String>> {
        self.property_index.get(property)
    }

    pub fn contains(&self, concept: &str, property: &str) -> bool {
        self.entries
            .contains(&(concept.to_string(), property.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_concept_property_table(
    path: impl AsRef<Path>,
) -> Result<(ConceptPropertyTable, LoadReport)> {
    ConceptPropertyTable::parse(BufReader::new(File::open(path)?))
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchOptions {
    /// Let a sentence token ending in `s` match a form without it when the
    /// exact token does not match.
    pub plural_folding: bool,
}

fn token_matches(sentence_tok: &str, phrase_tok: &str, opts: MatchOptions) -> bool {
    sentence_tok == phrase_tok
        || (opts.plural_folding
            && sentence_tok
                .strip_suffix('s')
                .is_some_and(|stem| stem == phrase_tok))
}

/// Finds which of a fixed set of token phrases occur in a token sequence.
struct PhraseMatcher {
    by_first: HashMap<String, Vec<(Vec<String>, usize)>>,
    opts: MatchOptions,
}

impl PhraseMatcher {
    fn new(phrases: &[Vec<String>], opts: MatchOptions) -> Self {
        let mut by_first: HashMap<String, Vec<(Vec<String>, usize)>> = HashMap::new();
        for (id, p) in phrases.iter().enumerate() {
            if let Some(first) = p.first() {
                by_first
                    .entry(first.clone())
                    .or_default()
                    .push((p.clone(), id));
            }
        }
        Self { by_first, opts }
    }

    fn candidates<'a>(&'a self, tok: &str) -> impl Iterator<Item = &'a (Vec<String>, usize)> {
        let exact = self.by_first.get(tok);
        let folded = if self.opts.plural_folding {
            tok.strip_suffix('s')
                .and_then(|stem| self.by_first.get(stem))
        } else {
            None
        };
        exact.into_iter().chain(folded).flatten()
    }

    /// Sorted ids of every phrase present in `tokens`.
    fn present(&self, tokens: &[String]) -> Vec<usize> {
        let mut found = BTreeSet::new();
        for start in 0..tokens.len() {
            for (phrase, id) in self.candidates(&tokens[start]) {
                let end = start + phrase.len();
                if end <= tokens.len()
                    && tokens[start..end]
                        .iter()
                        .zip(phrase)
                        .all(|(s, p)| token_matches(s, p, self.opts))
                {
                    found.insert(*id);
                }
            }
        }
        found.into_iter().collect()
    }
}

/// `S_p`: the (sentence, concept) pairs attesting property `property`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyGroup {
    pub property: String,
    /// Sorted by (sentence, concept).
    pub members: Vec<(u32, ConceptId)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchReport {
    /// Table concepts with no vocabulary entry; they cannot carry mentions.
    pub unknown_concepts: usize,
    pub sentences: usize,
}

/// Matches every sentence against the table. Sentence ids are 0-based line
/// numbers. Returns the non-empty groups sorted by property; a group's
/// position in the returned list is its group id.
pub fn match_corpus(
    sentences: &[String],
    table: &ConceptPropertyTable,
    vocab: &Vocabulary,
    opts: MatchOptions,
) -> (Vec<PropertyGroup>, MatchReport) {
    // vocabulary entries are matched by their token sequence
    let mut vocab_by_tokens: HashMap<Vec<String>, ConceptId> = HashMap::new();
    for id in vocab.ids() {
        let toks = tokenize(vocab.word(id).unwrap());
        if !toks.is_empty() {
            vocab_by_tokens.entry(toks).or_insert(id);
        }
    }

    let properties: Vec<&str> = table.properties().collect();
    let property_phrases: Vec<Vec<String>> = properties.iter().map(|p| tokenize(p)).collect();

    // table concept phrase -> vocab concept
    let mut concept_phrases: Vec<Vec<String>> = Vec::new();
    let mut concept_ids: Vec<ConceptId> = Vec::new();
    let mut phrase_slot: HashMap<Vec<String>, usize> = HashMap::new();
    // for each property, the concept-phrase slots that have it
    let mut holders: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); properties.len()];
    let mut unknown = BTreeSet::new();
    for (pi, p) in properties.iter().enumerate() {
        for c in table.concepts_of(p).unwrap() {
            let toks = tokenize(c);
            let Some(&cid) = vocab_by_tokens.get(&toks) else {
                unknown.insert(c.clone());
                continue;
            };
            let slot = *phrase_slot.entry(toks.clone()).or_insert_with(|| {
                concept_phrases.push(toks);
                concept_ids.push(cid);
                concept_ids.len() - 1
            });
            holders[pi].insert(slot);
        }
    }

    let concepts = PhraseMatcher::new(&concept_phrases, opts);
    let props = PhraseMatcher::new(&property_phrases, opts);

    let mut hits: Vec<(usize, u32, ConceptId)> = sentences
        .par_iter()
        .enumerate()
        .flat_map_iter(|(sid, text)| {
            let tokens = tokenize(text);
            let present_c = concepts.present(&tokens);
            let present_p = props.present(&tokens);
            let mut out = Vec::new();
            for &p in &present_p {
                for &c in &present_c {
                    if holders[p].contains(&c) {
                        out.push((p, sid as u32, concept_ids[c]));
                    }
                }
            }
            out
        })
        .collect();
    hits.sort_unstable();
    hits.dedup();

    let mut groups: Vec<PropertyGroup> = Vec::new();
    let mut last = None;
    for (p, s, c) in hits {
        if last != Some(p) {
            groups.push(PropertyGroup {
                property: properties[p].to_string(),
                members: Vec::new(),
            });
            last = Some(p);
        }
        groups.last_mut().unwrap().members.push((s, c));
    }
    (
        groups,
        MatchReport {
            unknown_concepts: unknown.len(),
            sentences: sentences.len(),
        },
    )
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let reader = BufReader::new(File::open(path)?);
    Ok(reader.lines().collect::<std::io::Result<_>>()?)
}

/// Record indices per group, with the count of members lacking a mention.
pub fn resolve_groups(groups: &[PropertyGroup], store: &MentionStore) -> (Vec<Vec<u32>>, usize) {
    let mut by_key: HashMap<(u32, ConceptId), Vec<u32>> = HashMap::new();
    for i in 0..store.len() as u32 {
        by_key
            .entry((store.sentence(i), store.concept(i)))
            .or_default()
            .push(i);
    }
    let mut dropped = 0;
    let resolved = groups
        .iter()
        .map(|g| {
            let mut records = Vec::new();
            for key in &g.members {
                match by_key.get(key) {
                    Some(rs) => records.extend_from_slice(rs),
                    None => dropped += 1,
                }
            }
            records.sort_unstable();
            records.dedup();
            records
        })
        .collect();
    (resolved, dropped)
}

/// All within-group pairs of mentions from distinct sentences, labelled with
/// the group id. Also returns how many members had no mention vector.
pub fn pairs_from_groups(groups: &[PropertyGroup], store: &MentionStore) -> (PairSet, usize) {
    let (resolved, dropped) = resolve_groups(groups, store);
    let mut pairs = Vec::new();
    for (g, records) in resolved.iter().enumerate() {
        for (i, &a) in records.iter().enumerate() {
            for &b in &records[i + 1..] {
                if store.sentence(a) != store.sentence(b) {
                    pairs.push(Pair {
                        a,
                        b,
                        group: Some(g as u32),
                    });
                }
            }
        }
    }
    if dropped > 0 {
        warn!("{dropped} group members have no mention vector and were dropped");
    }
    (
        PairSet::from_pairs(pairs, PairSource { k: 0, theta: None }),
        dropped,
    )
}

/// Sidecar rows `property<TAB>sentence<TAB>concept`, groups in id order.
pub fn write_groups<W: Write>(
    groups: &[PropertyGroup],
    vocab: &Vocabulary,
    mut out: W,
) -> std::io::Result<()> {
    for g in groups {
        for &(s, c) in &g.members {
            writeln!(
                out,
                "{}\t{}\t{}",
                g.property,
                s,
                vocab.word(c).unwrap_or("?")
            )?;
        }
    }
    out.flush()
}

pub fn read_groups<R: BufRead>(input: R, vocab: &Vocabulary) -> Result<Vec<PropertyGroup>> {
    let mut groups: Vec<PropertyGroup> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| DistSupError::Parse {
            line: n + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [p, s, c] = fields.as_slice() else {
            return Err(err("expected 3 tab-separated fields"));
        };
        let s: u32 = s.parse().map_err(|_| err("bad sentence id"))?;
        let c = vocab
            .id(c)
            .ok_or_else(|| err("concept not in vocabulary"))?;
        if groups.last().map(|g| g.property.as_str()) != Some(*p) {
            groups.push(PropertyGroup {
                property: p.to_string(),
                members: Vec::new(),
            });
        }
        groups.last_mut().unwrap().members.push((s, c));
    }
    Ok(groups)
}

pub fn write_groups_file(
    groups: &[PropertyGroup],
    vocab: &Vocabulary,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_groups(groups, vocab, BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn read_groups_file(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<PropertyGroup>> {
    read_groups(BufReader::new(File::open(path)?), vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::StoreBuilder;

    fn table(lines: &str) -> ConceptPropertyTable {
        ConceptPropertyTable::parse(lines.as_bytes()).unwrap().0
    }

    #[test]
    fn rare_properties_are_pruned() {
        let (t, report) = ConceptPropertyTable::parse(
            "gun\tdangerous\nknife\tdangerous\nfire\tdangerous\nlemon\tsour\nlime\tsour\n"
                .as_bytes(),
        )
        .unwrap();
        assert!(t.contains("gun", "dangerous"));
        assert_eq!(t.properties().collect::<Vec<_>>(), vec!["dangerous"]);
        assert!(!t.contains("lemon", "sour"));
        assert_eq!(report.pruned_properties, 1);
    }

    #[test]
    fn duplicate_entries_count_once() {
        let t = table("a\tp\na\tp\nb\tp\n");
        assert!(t.is_empty());
    }

    #[test]
    fn empty_file_and_malformed_lines() {
        let (t, r) = ConceptPropertyTable::parse("".as_bytes()).unwrap();
        assert!(t.is_empty());
        assert!(r.malformed.is_empty());
        let (_, r) =
            ConceptPropertyTable::parse("a\tb\nbroken\n\nx\ty\tz\n\tq\n".as_bytes()).unwrap();
        assert_eq!(r.malformed, vec![2, 4, 5]);
    }

    #[test]
    fn tokenizer() {
        assert_eq!(
            tokenize("A Gun, is dangerous!"),
            vec!["a", "gun", "is", "dangerous"]
        );
        assert_eq!(tokenize("gunship"), vec!["gunship"]);
        assert!(tokenize(" -- ").is_empty());
    }

    fn weapons() -> (ConceptPropertyTable, Vocabulary) {
        let t = table("gun\tdangerous\nknife\tdangerous\nfire\tdangerous\nice cream\tcold\nsnow\tcold\nice\tcold\n");
        let v =
            Vocabulary::from_words(["gun", "knife", "fire", "ice cream", "snow", "ice"]).unwrap();
        (t, v)
    }

    #[test]
    fn whole_token_matching() {
        let (t, v) = weapons();
        let corpus: Vec<String> = [
            "a gun is dangerous",
            "the gunship is dangerous",
            "Ice cream is cold",
            "guns are dangerous",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let (groups, _) = match_corpus(&corpus, &t, &v, MatchOptions::default());
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].property, "cold");
        // "ice cream" and "ice" both occur in sentence 2
        assert_eq!(
            groups[0].members,
            vec![(2, ConceptId(3)), (2, ConceptId(5))]
        );
        assert_eq!(groups[1].property, "dangerous");
        assert_eq!(groups[1].members, vec![(0, ConceptId(0))]);

        let (folded, _) = match_corpus(
            &corpus,
            &t,
            &v,
            MatchOptions {
                plural_folding: true,
            },
        );
        assert_eq!(
            folded[1].members,
            vec![(0, ConceptId(0)), (3, ConceptId(0))]
        );
    }

    #[test]
    fn empty_corpus_gives_no_groups() {
        let (t, v) = weapons();
        let (groups, report) = match_corpus(&[], &t, &v, MatchOptions::default());
        assert!(groups.is_empty());
        assert_eq!(report.sentences, 0);
    }

    #[test]
    fn pairs_need_distinct_sentences() {
        let v = Vocabulary::from_words(["a", "b", "c"]).unwrap();
        let mut b = StoreBuilder::new(1, v).unwrap();
        b.push(ConceptId(0), 1, &[1.0]).unwrap();
        b.push(ConceptId(1), 1, &[1.0]).unwrap();
        b.push(ConceptId(2), 2, &[1.0]).unwrap();
        let store = b.build();
        let groups = vec![PropertyGroup {
            property: "p".into(),
            members: vec![
                (1, ConceptId(0)),
                (1, ConceptId(1)),
                (2, ConceptId(2)),
                (9, ConceptId(2)),
            ],
        }];
        let (pairs, dropped) = pairs_from_groups(&groups, &store);
        assert_eq!(dropped, 1);
        let got: Vec<(u32, u32)> = pairs.pairs().iter().map(|p| (p.a, p.b)).collect();
        assert_eq!(got, vec![(0, 2), (1, 2)]);
        assert!(pairs.pairs().iter().all(|p| p.group == Some(0)));
    }

    #[test]
    fn three_members_three_pairs() {
        let v = Vocabulary::from_words(["a", "b", "c"]).unwrap();
        let mut b = StoreBuilder::new(1, v).unwrap();
        for c in 0..3 {
            b.push(ConceptId(c), c, &[1.0]).unwrap();
        }
        let store = b.build();
        let groups = vec![PropertyGroup {
            property: "p".into(),
            members: (0..3).map(|c| (c, ConceptId(c))).collect(),
        }];
        assert_eq!(pairs_from_groups(&groups, &store).0.len(), 3);
    }

    #[test]
    fn sidecar_round_trip() {
        let (t, v) = weapons();
        let corpus: Vec<String> = [
            "fire is dangerous",
            "snow is cold",
            "a knife and a gun are dangerous",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let (groups, _) = match_corpus(&corpus, &t, &v, MatchOptions::default());
        let mut buf = Vec::new();
        write_groups(&groups, &v, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "cold\t1\tsnow\ndangerous\t0\tfire\ndangerous\t2\tgun\ndangerous\t2\tknife\n"
        );
        assert_eq!(read_groups(buf.as_slice(), &v).unwrap(), groups);
    }
}
