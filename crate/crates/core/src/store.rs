//! Mention vectors, the concept vocabulary, and their binary formats.
//!
//! A [`MentionStore`] holds every mention vector together with the concept it
//! was extracted for and the sentence it came from. Records are identified by
//! their position in file order; that index is the mention identity used by
//! every other module.
//!
//! On-disk layout (`CMVS`, little-endian):
//!
//! ```text
//! magic "CMVS" | version u32 = 1 | dim u32 | concept_count u32 | record_count u64
//! concept_count x ([len u16][utf-8 bytes])
//! record_count  x ([concept u32][sentence u32][dim x f32])
//! ```
//!
//! Concept embedding tables (`CEMB`) use the same layout without the sentence
//! field.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::binfmt::{Decoder, Encoder, FormatError};

pub const STORE_MAGIC: &[u8; 4] = b"CMVS";
pub const TABLE_MAGIC: &[u8; 4] = b"CEMB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("vocabulary entry {id} is {len} bytes long (limit 65535)")]
    EntryTooLong { id: u32, len: usize },
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateWord(String),
    #[error("vector has dimension {found}, store dimension is {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("non-finite value in vector for record {0}")]
    NonFinite(usize),
    #[error("unknown concept id {0}")]
    UnknownConcept(u32),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("record index {0} out of range")]
    InvalidRecord(u32),
    #[error("too many records for 32-bit record indices")]
    TooManyRecords,
    #[error("duplicate table entry for concept {0}")]
    DuplicateEntry(u32),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Format(FormatError::Io(e))
    }
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Index of a concept in a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConceptId(pub u32);

impl ConceptId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Bijection between concept surface forms and [`ConceptId`]s.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    words: Vec<String>,
    lookup: HashMap<String, ConceptId>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for w in words {
            vocab.insert(w)?;
        }
        Ok(vocab)
    }

    /// Appends a new surface form. Duplicates are rejected.
    pub fn insert(&mut self, word: impl Into<String>) -> Result<ConceptId> {
        let word = word.into();
        if self.lookup.contains_key(&word) {
            return Err(StoreError::DuplicateWord(word));
        }
        let id = ConceptId(self.words.len() as u32);
        if word.len() > u16::MAX as usize {
            return Err(StoreError::EntryTooLong {
                id: id.0,
                len: word.len(),
            });
        }
        self.lookup.insert(word.clone(), id);
        self.words.push(word);
        Ok(id)
    }

    /// Returns the id of `word`, inserting it if needed.
    pub fn intern(&mut self, word: &str) -> Result<ConceptId> {
        match self.lookup.get(word) {
            Some(&id) => Ok(id),
            None => self.insert(word),
        }
    }

    pub fn id(&self, word: &str) -> Option<ConceptId> {
        self.lookup.get(word).copied()
    }

    pub fn word(&self, id: ConceptId) -> Option<&str> {
        self.words.get(id.index()).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn ids(&self) -> impl Iterator<Item = ConceptId> {
        (0..self.words.len() as u32).map(ConceptId)
    }
}

/// One mention vector with its concept and sentence identity.
#[derive(Debug, Clone, PartialEq)]
pub struct MentionRecord {
    pub concept: ConceptId,
    pub sentence: u32,
    pub vector: Vec<f32>,
}

/// Borrowed view of a record inside a [`MentionStore`].
#[derive(Debug, Clone, Copy)]
pub struct MentionRef<'a> {
    pub concept: ConceptId,
    pub sentence: u32,
    pub vector: &'a [f32],
}

/// All mention vectors, immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct MentionStore {
    dim: usize,
    vocab: Vocabulary,
    concepts: Vec<ConceptId>,
    sentences: Vec<u32>,
    vectors: Vec<f32>,
    concept_index: Vec<Vec<u32>>,
}

/// Accumulates records before freezing them into a [`MentionStore`].
#[derive(Debug, Clone)]
pub struct StoreBuilder {
    dim: usize,
    vocab: Vocabulary,
    concepts: Vec<ConceptId>,
    sentences: Vec<u32>,
    vectors: Vec<f32>,
}

impl StoreBuilder {
    pub fn new(dim: usize, vocab: Vocabulary) -> Result<Self> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        Ok(Self {
            dim,
            vocab,
            concepts: Vec::new(),
            sentences: Vec::new(),
            vectors: Vec::new(),
        })
    }

    pub fn with_capacity(mut self, records: usize) -> Self {
        self.concepts.reserve(records);
        self.sentences.reserve(records);
        self.vectors.reserve(records * self.dim);
        self
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Appends a record and returns its index.
    pub fn push(&mut self, concept: ConceptId, sentence: u32, vector: &[f32]) -> Result<u32> {
        if concept.index() >= self.vocab.len() {
            return Err(StoreError::UnknownConcept(concept.0));
        }
        if vector.len() != self.dim {
            return Err(StoreError::DimMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        let index = self.concepts.len();
        if index >= u32::MAX as usize {
            return Err(StoreError::TooManyRecords);
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite(index));
        }
        self.concepts.push(concept);
        self.sentences.push(sentence);
        self.vectors.extend_from_slice(vector);
        Ok(index as u32)
    }

    pub fn build(self) -> MentionStore {
        let mut concept_index = vec![Vec::new(); self.vocab.len()];
        for (i, c) in self.concepts.iter().enumerate() {
            concept_index[c.index()].push(i as u32);
        }
        MentionStore {
            dim: self.dim,
            vocab: self.vocab,
            concepts: self.concepts,
            sentences: self.sentences,
            vectors: self.vectors,
            concept_index,
        }
    }
}

impl MentionStore {
    pub fn from_records(dim: usize, vocab: Vocabulary, records: &[MentionRecord]) -> Result<Self> {
        let mut builder = StoreBuilder::new(dim, vocab)?.with_capacity(records.len());
        for r in records {
            builder.push(r.concept, r.sentence, &r.vector)?;
        }
        Ok(builder.build())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn vector(&self, index: u32) -> &[f32] {
        let start = index as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    pub fn concept(&self, index: u32) -> ConceptId {
        self.concepts[index as usize]
    }

    pub fn sentence(&self, index: u32) -> u32 {
        self.sentences[index as usize]
    }

    pub fn concepts(&self) -> &[ConceptId] {
        &self.concepts
    }

    pub fn sentences(&self) -> &[u32] {
        &self.sentences
    }

    /// Row-major `len() x dim()` vector data.
    pub fn raw_vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn get(&self, index: u32) -> Option<MentionRef<'_>> {
        ((index as usize) < self.len()).then(|| MentionRef {
            concept: self.concept(index),
            sentence: self.sentence(index),
            vector: self.vector(index),
        })
    }

    pub fn records(&self) -> impl Iterator<Item = MentionRef<'_>> + '_ {
        (0..self.len() as u32).map(move |i| MentionRef {
            concept: self.concept(i),
            sentence: self.sentence(i),
            vector: self.vector(i),
        })
    }

    pub fn check_index(&self, index: u32) -> Result<()> {
        if (index as usize) < self.len() {
            Ok(())
        } else {
            Err(StoreError::InvalidRecord(index))
        }
    }

    /// Record indices of every mention of `concept`, ascending.
    pub fn mentions_of(&self, concept: ConceptId) -> Result<&[u32]> {
        self.concept_index
            .get(concept.index())
            .map(Vec::as_slice)
            .ok_or(StoreError::UnknownConcept(concept.0))
    }

    /// Same identities, new vectors. Used by projection.
    pub fn with_vectors(&self, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        if vectors.len() != dim * self.len() {
            return Err(StoreError::DimMismatch {
                expected: dim * self.len(),
                found: vectors.len(),
            });
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite(pos / dim));
        }
        Ok(Self {
            dim,
            vocab: self.vocab.clone(),
            concepts: self.concepts.clone(),
            sentences: self.sentences.clone(),
            vectors,
            concept_index: self.concept_index.clone(),
        })
    }

    /// True when both stores describe the same mentions (vectors may differ).
    pub fn same_identities(&self, other: &Self) -> bool {
        self.vocab == other.vocab
            && self.concepts == other.concepts
            && self.sentences == other.sentences
    }

    pub fn encode<W: Write>(&self, out: W) -> Result<W> {
        let mut enc = Encoder::new(out);
        enc.raw(STORE_MAGIC)?;
        enc.u32(FORMAT_VERSION)?;
        enc.u32(self.dim as u32)?;
        write_vocab_header(&mut enc, &self.vocab, self.len() as u64)?;
        for i in 0..self.len() as u32 {
            enc.u32(self.concept(i).0)?;
            enc.u32(self.sentence(i))?;
            enc.f32s(self.vector(i))?;
        }
        Ok(enc.finish()?)
    }

    pub fn decode<R: Read>(input: R) -> Result<Self> {
        let mut dec = Decoder::new(input);
        dec.magic(STORE_MAGIC)?;
        dec.version(FORMAT_VERSION)?;
        let dim = dec.u32()? as usize;
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        let (vocab, record_count) = read_vocab_header(&mut dec)?;
        if record_count >= u32::MAX as u64 {
            return Err(StoreError::TooManyRecords);
        }
        let mut builder = StoreBuilder::new(dim, vocab)?;
        let mut buf = vec![0f32; dim];
        for r in 0..record_count {
            let concept = dec.u32()?;
            let sentence = dec.u32()?;
            dec.finite_f32s(&mut buf, r)?;
            builder.push(ConceptId(concept), sentence, &buf)?;
        }
        dec.finish()?;
        Ok(builder.build())
    }
}

fn write_vocab_header<W: Write>(
    enc: &mut Encoder<W>,
    vocab: &Vocabulary,
    entries: u64,
) -> Result<()> {
    enc.u32(vocab.len() as u32)?;
    enc.u64(entries)?;
    for (id, w) in vocab.words().iter().enumerate() {
        let len = u16::try_from(w.len()).map_err(|_| StoreError::EntryTooLong {
            id: id as u32,
            len: w.len(),
        })?;
        enc.u16(len)?;
        enc.raw(w.as_bytes())?;
    }
    Ok(())
}

fn read_vocab_header<R: Read>(dec: &mut Decoder<R>) -> Result<(Vocabulary, u64)> {
    let concept_count = dec.u32()?;
    let entries = dec.u64()?;
    let mut vocab = Vocabulary::new();
    for id in 0..concept_count {
        let len = dec.u16()? as usize;
        let bytes = dec.bytes(len)?;
        let word = String::from_utf8(bytes).map_err(|_| FormatError::Utf8(id))?;
        vocab.insert(word)?;
    }
    Ok((vocab, entries))
}

/// Writes `store` in the `CMVS` format.
pub fn write_store(store: &MentionStore, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    store.encode(BufWriter::new(file))?;
    Ok(())
}

/// Reads a `CMVS` file, validating every invariant.
pub fn read_store(path: impl AsRef<Path>) -> Result<MentionStore> {
    let file = File::open(path)?;
    MentionStore::decode(BufReader::new(file))
}

/// Static embedding per concept.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbeddingTable {
    dim: usize,
    vocab: Vocabulary,
    ids: Vec<ConceptId>,
    vectors: Vec<f32>,
    rows: HashMap<ConceptId, usize>,
}

impl ConceptEmbeddingTable {
    pub fn new(dim: usize, vocab: Vocabulary) -> Result<Self> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        Ok(Self {
            dim,
            vocab,
            ids: Vec::new(),
            vectors: Vec::new(),
            rows: HashMap::new(),
        })
    }

    pub fn insert(&mut self, concept: ConceptId, vector: &[f32]) -> Result<()> {
        if concept.index() >= self.vocab.len() {
            return Err(StoreError::UnknownConcept(concept.0));
        }
        if vector.len() != self.dim {
            return Err(StoreError::DimMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite(self.ids.len()));
        }
        if self.rows.contains_key(&concept) {
            return Err(StoreError::DuplicateEntry(concept.0));
        }
        self.rows.insert(concept, self.ids.len());
        self.ids.push(concept);
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Concepts in row order.
    pub fn concepts(&self) -> &[ConceptId] {
        &self.ids
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_of(&self, concept: ConceptId) -> Option<usize> {
        self.rows.get(&concept).copied()
    }

    pub fn get(&self, concept: ConceptId) -> Option<&[f32]> {
        self.row_of(concept).map(|r| self.row(r))
    }

    pub fn get_word(&self, word: &str) -> Option<&[f32]> {
        self.vocab.id(word).and_then(|c| self.get(c))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ConceptId, &[f32])> + '_ {
        self.ids.iter().enumerate().map(|(r, &c)| (c, self.row(r)))
    }

    pub fn encode<W: Write>(&self, out: W) -> Result<W> {
        let mut enc = Encoder::new(out);
        enc.raw(TABLE_MAGIC)?;
        enc.u32(FORMAT_VERSION)?;
        enc.u32(self.dim as u32)?;
        write_vocab_header(&mut enc, &self.vocab, self.len() as u64)?;
        for (c, v) in self.iter() {
            enc.u32(c.0)?;
            enc.f32s(v)?;
        }
        Ok(enc.finish()?)
    }

    pub fn decode<R: Read>(input: R) -> Result<Self> {
        let mut dec = Decoder::new(input);
        dec.magic(TABLE_MAGIC)?;
        dec.version(FORMAT_VERSION)?;
        let dim = dec.u32()? as usize;
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        let (vocab, entries) = read_vocab_header(&mut dec)?;
        let mut table = Self::new(dim, vocab)?;
        let mut buf = vec![0f32; dim];
        for e in 0..entries {
            let concept = dec.u32()?;
            dec.finite_f32s(&mut buf, e)?;
            table.insert(ConceptId(concept), &buf)?;
        }
        dec.finish()?;
        Ok(table)
    }
}

pub fn write_table(table: &ConceptEmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    table.encode(BufWriter::new(file))?;
    Ok(())
}

pub fn read_table(path: impl AsRef<Path>) -> Result<ConceptEmbeddingTable> {
    let file = File::open(path)?;
    ConceptEmbeddingTable::decode(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(store: &MentionStore) -> Vec<u8> {
        store.encode(Vec::new()).unwrap()
    }

    #[test]
    fn empty_store_is_header_only() {
        let store = StoreBuilder::new(4, Vocabulary::new()).unwrap().build();
        let bytes = encode(&store);
        assert_eq!(bytes.len(), 24);
        assert_eq!(MentionStore::decode(bytes.as_slice()).unwrap(), store);
    }

    #[test]
    fn single_record_round_trips_bitwise() {
        let vocab = Vocabulary::from_words(["lemon"]).unwrap();
        let mut b = StoreBuilder::new(2, vocab).unwrap();
        b.push(ConceptId(0), 0, &[1.0, 0.0]).unwrap();
        let store = b.build();
        let back = MentionStore::decode(encode(&store).as_slice()).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.vector(0)[0].to_bits(), 1.0f32.to_bits());
    }

    #[test]
    fn hand_built_file_decodes_in_order() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CMVS");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes()); // dim
        bytes.extend_from_slice(&2u32.to_le_bytes()); // concepts
        bytes.extend_from_slice(&2u64.to_le_bytes()); // records
        for w in ["ab", "c"] {
            bytes.extend_from_slice(&(w.len() as u16).to_le_bytes());
            bytes.extend_from_slice(w.as_bytes());
        }
        for (c, s, v) in [(1u32, 7u32, [0.5f32, -2.0]), (0, 3, [1.5, 4.0])] {
            bytes.extend_from_slice(&c.to_le_bytes());
            bytes.extend_from_slice(&s.to_le_bytes());
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let store = MentionStore::decode(bytes.as_slice()).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.vocab().words(), &["ab".to_string(), "c".to_string()]);
        assert_eq!(store.concept(0), ConceptId(1));
        assert_eq!(store.sentence(0), 7);
        assert_eq!(store.vector(0), &[0.5, -2.0]);
        assert_eq!(store.concept(1), ConceptId(0));
        assert_eq!(store.vector(1), &[1.5, 4.0]);
        assert_eq!(encode(&store), bytes);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let store = StoreBuilder::new(4, Vocabulary::new()).unwrap().build();
        let mut bytes = encode(&store);
        bytes[0] = b'X';
        let err = MentionStore::decode(bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncation_and_version_errors() {
        let vocab = Vocabulary::from_words(["a"]).unwrap();
        let mut b = StoreBuilder::new(3, vocab).unwrap();
        b.push(ConceptId(0), 1, &[1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&b.build());
        let err = MentionStore::decode(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut wrong = bytes.clone();
        wrong[4] = 2;
        assert!(matches!(
            MentionStore::decode(wrong.as_slice()),
            Err(StoreError::Format(FormatError::Version { found: 2, .. }))
        ));
    }

    #[test]
    fn non_finite_floats_are_rejected_on_read() {
        let vocab = Vocabulary::from_words(["a"]).unwrap();
        let mut b = StoreBuilder::new(1, vocab).unwrap();
        b.push(ConceptId(0), 1, &[1.0]).unwrap();
        let mut bytes = encode(&b.build());
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            MentionStore::decode(bytes.as_slice()),
            Err(StoreError::Format(FormatError::NonFinite {
                entry: 0,
                coord: 0
            }))
        ));
    }

    #[test]
    fn write_errors() {
        assert!(matches!(
            StoreBuilder::new(0, Vocabulary::new()),
            Err(StoreError::ZeroDim)
        ));
        let long = "x".repeat(70_000);
        assert!(matches!(
            Vocabulary::from_words([long]),
            Err(StoreError::EntryTooLong { .. })
        ));
    }

    #[test]
    fn mentions_of_matches_construction() {
        let vocab = Vocabulary::from_words((0..6).map(|i| format!("w{i}"))).unwrap();
        let mut b = StoreBuilder::new(1, vocab).unwrap();
        for c in [5, 1, 5, 0] {
            b.push(ConceptId(c), 0, &[1.0]).unwrap();
        }
        let store = b.build();
        assert_eq!(store.mentions_of(ConceptId(5)).unwrap(), &[0, 2]);
        assert!(store.mentions_of(ConceptId(3)).unwrap().is_empty());
        assert!(matches!(
            store.mentions_of(ConceptId(9)),
            Err(StoreError::UnknownConcept(9))
        ));
    }

    #[test]
    fn duplicate_concept_sentence_pairs_allowed() {
        let vocab = Vocabulary::from_words(["a"]).unwrap();
        let mut b = StoreBuilder::new(1, vocab).unwrap();
        b.push(ConceptId(0), 4, &[1.0]).unwrap();
        b.push(ConceptId(0), 4, &[1.0]).unwrap();
        assert_eq!(b.build().mentions_of(ConceptId(0)).unwrap(), &[0, 1]);
    }

    #[test]
    fn table_round_trip() {
        let vocab = Vocabulary::from_words(["a", "b", "c"]).unwrap();
        let mut t = ConceptEmbeddingTable::new(2, vocab).unwrap();
        t.insert(ConceptId(2), &[0.25, -1.0]).unwrap();
        t.insert(ConceptId(0), &[3.0, 1e-30]).unwrap();
        assert!(t.insert(ConceptId(0), &[0.0, 0.0]).is_err());
        let bytes = t.encode(Vec::new()).unwrap();
        let back = ConceptEmbeddingTable::decode(bytes.as_slice()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.encode(Vec::new()).unwrap(), bytes);
        assert_eq!(back.get_word("c").unwrap(), &[0.25, -1.0]);
        assert!(back.get_word("b").is_none());
    }
}
