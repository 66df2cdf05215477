//! Positive-pair mining from the neighbourhood structure of mention vectors,
//! the word-identity baseline, and the idiosyncratic-mention filter.
//!
//! Two mentions are compatible when the concepts found among their `k`
//! nearest neighbours overlap. The compatibility degree is a multiset Jaccard
//! over neighbour concepts and is kept as an exact rational so that threshold
//! comparisons never depend on float rounding.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::simsearch::{self, NeighborList, SearchError};
use crate::store::{ConceptId, MentionStore};

#[derive(Debug, Error)]
pub enum MiningError {
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("invalid threshold {0:?}: expected a value in (0, 1]")]
    Threshold(String),
    #[error("invalid mining config: {0}")]
    Config(String),
    #[error("record index {0} out of range")]
    InvalidIndex(u32),
    #[error("store has {records} records, filtering needs more than k = {k}")]
    TooFewRecords { records: usize, k: usize },
    #[error("pair file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MiningError>;

/// A rational threshold `num / den` in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Threshold {
    num: u32,
    den: u32,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Threshold {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(MiningError::Threshold(format!("{num}/{den}")));
        }
        let g = gcd(num as u64, den as u64) as u32;
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Self { num: 1, den: 2 }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Accepts `a/b` or a terminating decimal such as `0.5`.
impl FromStr for Threshold {
    type Err = MiningError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || MiningError::Threshold(s.to_string());
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Threshold::new(n, d).map_err(|_| bad());
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 9 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| bad())?
        };
        let den = 10u64.pow(frac.len() as u32);
        let frac_val: u64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| bad())?
        };
        let num = int * den + frac_val;
        let g = gcd(num, den).max(1);
        let (num, den) = (num / g, den / g);
        if num > u32::MAX as u64 || den > u32::MAX as u64 {
            return Err(bad());
        }
        Threshold::new(num as u32, den as u32).map_err(|_| bad())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    pub k_compat: usize,
    pub theta: Threshold,
    pub k_filter: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            k_compat: 5,
            theta: Threshold::default(),
            k_filter: 5,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_compat == 0 {
            return Err(MiningError::Config("k_compat must be at least 1".into()));
        }
        if self.k_filter == 0 {
            return Err(MiningError::Config("k_filter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Exact compatibility degree: `shared / union` over neighbour-concept multisets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Compatibility {
    pub shared: u32,
    pub union: u32,
}

impl Compatibility {
    pub fn value(self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            self.shared as f64 / self.union as f64
        }
    }

    pub fn meets(self, theta: Threshold) -> bool {
        self.union > 0
            && self.shared as u64 * theta.den as u64 >= theta.num as u64 * self.union as u64
    }
}

/// Number of records in `set` whose concept is `concept`.
pub fn freq(store: &MentionStore, concept: ConceptId, set: &[u32]) -> Result<usize> {
    let mut n = 0;
    for &i in set {
        if i as usize >= store.len() {
            return Err(MiningError::InvalidIndex(i));
        }
        if store.concept(i) == concept {
            n += 1;
        }
    }
    Ok(n)
}

/// Neighbour-concept multiset of one record, as `(concept, count)` sorted by concept.
pub type ConceptProfile = Vec<(ConceptId, u32)>;

pub fn concept_profile(store: &MentionStore, list: &NeighborList) -> ConceptProfile {
    let mut counts: BTreeMap<ConceptId, u32> = BTreeMap::new();
    for j in list.indices() {
        *counts.entry(store.concept(j)).or_default() += 1;
    }
    counts.into_iter().collect()
}

pub fn profiles(store: &MentionStore, lists: &[NeighborList]) -> Vec<ConceptProfile> {
    lists
        .par_iter()
        .map(|l| concept_profile(store, l))
        .collect()
}

fn profile_size(p: &ConceptProfile) -> u32 {
    p.iter().map(|&(_, n)| n).sum()
}

/// Multiset Jaccard of two profiles by sorted merge.
pub fn profile_compatibility(a: &ConceptProfile, b: &ConceptProfile) -> Compatibility {
    let (mut i, mut j) = (0, 0);
    let (mut shared, mut union) = (0u32, 0u32);
    while i < a.len() || j < b.len() {
        match (a.get(i), b.get(j)) {
            (Some(&(ca, na)), Some(&(cb, nb))) if ca == cb => {
                shared += na.min(nb);
                union += na.max(nb);
                i += 1;
                j += 1;
            }
            (Some(&(ca, na)), Some(&(cb, _))) if ca < cb => {
                union += na;
                i += 1;
            }
            (Some(_), Some(&(_, nb))) => {
                union += nb;
                j += 1;
            }
            (Some(&(_, na)), None) => {
                union += na;
                i += 1;
            }
            (None, Some(&(_, nb))) => {
                union += nb;
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    Compatibility { shared, union }
}

/// Compatibility of records `x` and `y` given precomputed neighbour lists.
pub fn compatibility(
    store: &MentionStore,
    lists: &[NeighborList],
    x: u32,
    y: u32,
) -> Result<Compatibility> {
    let get = |i: u32| lists.get(i as usize).ok_or(MiningError::InvalidIndex(i));
    let (lx, ly) = (get(x)?, get(y)?);
    Ok(profile_compatibility(
        &concept_profile(store, lx),
        &concept_profile(store, ly),
    ))
}

/// An unordered pair of record indices, stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pair {
    pub a: u32,
    pub b: u32,
    pub group: Option<u32>,
}

/// Provenance written into the pair-file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSource {
    pub k: u32,
    pub theta: Option<Threshold>,
}

/// Sorted set of unordered positive pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pairs: Vec<Pair>,
    pub source: PairSource,
}

impl PairSet {
    /// Normalises orientation, sorts, and keeps the first (lowest-group)
    /// occurrence of each unordered pair. Self-pairs are dropped.
    pub fn from_pairs(pairs: impl IntoIterator<Item = Pair>, source: PairSource) -> Self {
        let mut pairs: Vec<Pair> = pairs
            .into_iter()
            .filter(|p| p.a != p.b)
            .map(|p| Pair {
                a: p.a.min(p.b),
                b: p.a.max(p.b),
                group: p.group,
            })
            .collect();
        pairs.sort_unstable();
        pairs.dedup_by(|later, earlier| later.a == earlier.a && later.b == earlier.b);
        Self { pairs, source }
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, a: u32, b: u32) -> bool {
        let (a, b) = (a.min(b), a.max(b));
        self.pairs
            .binary_search_by(|p| (p.a, p.b).cmp(&(a, b)))
            .is_ok()
    }

    /// Checks `a != b`, index range and distinct sentences against `store`.
    pub fn validate(&self, store: &MentionStore) -> Result<()> {
        for p in &self.pairs {
            for i in [p.a, p.b] {
                if i as usize >= store.len() {
                    return Err(MiningError::InvalidIndex(i));
                }
            }
            if store.sentence(p.a) == store.sentence(p.b) {
                return Err(MiningError::Config(format!(
                    "pair ({}, {}) shares sentence {}",
                    p.a,
                    p.b,
                    store.sentence(p.a)
                )));
            }
        }
        Ok(())
    }

    pub fn header(&self) -> String {
        let theta = self
            .source
            .theta
            .map_or_else(|| "0/1".to_string(), |t| t.to_string());
        format!("#condist-pairs v1 k={} theta={}", self.source.k, theta)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.header())?;
        for p in &self.pairs {
            match p.group {
                Some(g) => writeln!(out, "{}\t{}\t{}", p.a, p.b, g)?,
                None => writeln!(out, "{}\t{}", p.a, p.b)?,
            }
        }
        out.flush()
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let parse_err = |line: usize, msg: &str| MiningError::Parse {
            line: line + 1,
            msg: msg.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| parse_err(0, "missing header"))?;
        let header = header?;
        let source = parse_header(&header).ok_or_else(|| parse_err(0, "bad header"))?;
        let mut pairs = Vec::new();
        for (n, line) in lines {
            let line = line?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(parse_err(n, "expected 2 or 3 tab-separated fields"));
            }
            let num = |s: &str| s.parse::<u32>().map_err(|_| parse_err(n, "bad integer"));
            let a = num(fields[0])?;
            let b = num(fields[1])?;
            let group = fields.get(2).map(|g| num(g)).transpose()?;
            if a >= b {
                return Err(parse_err(n, "pair not in ascending order"));
            }
            pairs.push(Pair { a, b, group });
        }
        let set = Self::from_pairs(pairs.iter().copied(), source);
        if set.pairs != pairs {
            return Err(parse_err(0, "pairs not sorted or duplicated"));
        }
        Ok(set)
    }
}

fn parse_header(line: &str) -> Option<PairSource> {
    let rest = line.strip_prefix("#condist-pairs v1 ")?;
    let mut k = None;
    let mut theta = None;
    for field in rest.split_whitespace() {
        if let Some(v) = field.strip_prefix("k=") {
            k = Some(v.parse().ok()?);
        } else if let Some(v) = field.strip_prefix("theta=") {
            theta = Some(if v == "0/1" {
                None
            } else {
                Some(v.parse().ok()?)
            });
        }
    }
    Some(PairSource {
        k: k?,
        theta: theta?,
    })
}

pub fn write_pairs(pairs: &PairSet, path: impl AsRef<Path>) -> Result<()> {
    pairs.write_to(BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<PairSet> {
    PairSet::read_from(BufReader::new(File::open(path)?))
}

/// Every unordered pair with compatibility >= theta and distinct sentences,
/// given neighbour lists computed with `k_compat`.
///
/// Only pairs sharing at least one neighbour concept can have non-zero
/// compatibility, so candidates come from a concept -> records inverted
/// index. Each query accumulates shared counts against later records only.
pub fn mine_from_neighbors(
    store: &MentionStore,
    lists: &[NeighborList],
    theta: Threshold,
) -> PairSet {
    let k = lists.first().map_or(0, |l| l.neighbors.len()) as u32;
    let profiles = profiles(store, lists);
    let sizes: Vec<u32> = profiles.iter().map(profile_size).collect();

    let mut buckets: Vec<Vec<(u32, u32)>> = vec![Vec::new(); store.vocab().len()];
    for (i, p) in profiles.iter().enumerate() {
        for &(c, n) in p {
            buckets[c.index()].push((i as u32, n));
        }
    }

    let n = store.len();
    let pairs: Vec<Pair> = (0..n as u32)
        .into_par_iter()
        .map_init(
            || (vec![0u32; n], Vec::<u32>::new()),
            |(shared, touched), x| {
                for &(c, nx) in &profiles[x as usize] {
                    // bucket entries are in ascending record order
                    let bucket = &buckets[c.index()];
                    let start = bucket.partition_point(|&(y, _)| y <= x);
                    for &(y, ny) in &bucket[start..] {
                        if shared[y as usize] == 0 {
                            touched.push(y);
                        }
                        shared[y as usize] += nx.min(ny);
                    }
                }
                let sx = store.sentence(x);
                let mut out = Vec::new();
                for &y in touched.iter() {
                    let s = shared[y as usize];
                    shared[y as usize] = 0;
                    let compat = Compatibility {
                        shared: s,
                        union: sizes[x as usize] + sizes[y as usize] - s,
                    };
                    if compat.meets(theta) && store.sentence(y) != sx {
                        out.push(Pair {
                            a: x,
                            b: y,
                            group: None,
                        });
                    }
                }
                touched.clear();
                out
            },
        )
        .flatten_iter()
        .collect();
    PairSet::from_pairs(
        pairs,
        PairSource {
            k,
            theta: Some(theta),
        },
    )
}

/// Neighbourhood-structure positive pairs.
pub fn mine_neighborhood_pairs(store: &MentionStore, config: &MiningConfig) -> Result<PairSet> {
    config.validate()?;
    let lists = simsearch::knn_all(store, config.k_compat)?;
    Ok(mine_from_neighbors(store, &lists, config.theta))
}

/// Word-identity baseline: all pairs of mentions of the same concept from
/// different sentences.
pub fn mine_word_identity_pairs(store: &MentionStore) -> PairSet {
    let mut pairs = Vec::new();
    for c in store.vocab().ids() {
        let ms = store.mentions_of(c).expect("vocabulary id");
        for (i, &a) in ms.iter().enumerate() {
            for &b in &ms[i + 1..] {
                if store.sentence(a) != store.sentence(b) {
                    pairs.push(Pair { a, b, group: None });
                }
            }
        }
    }
    PairSet::from_pairs(pairs, PairSource { k: 0, theta: None })
}

/// Records kept by the idiosyncratic filter, given lists computed with `k_filter`.
pub fn filter_with_neighbors(store: &MentionStore, lists: &[NeighborList]) -> Vec<u32> {
    lists
        .iter()
        .filter(|l| {
            let own = store.concept(l.query);
            l.indices().any(|j| store.concept(j) != own)
        })
        .map(|l| l.query)
        .collect()
}

/// Indices of mentions that are *not* idiosyncratic: at least one of their
/// `k_filter` nearest neighbours belongs to another concept. Ascending.
pub fn filter_idiosyncratic(store: &MentionStore, k_filter: usize) -> Result<Vec<u32>> {
    if k_filter == 0 {
        return Err(MiningError::Config("k_filter must be at least 1".into()));
    }
    if store.len() <= k_filter {
        return Err(MiningError::TooFewRecords {
            records: store.len(),
            k: k_filter,
        });
    }
    let lists = simsearch::knn_all(store, k_filter)?;
    Ok(filter_with_neighbors(store, &lists))
}

/// Kept-index file: header `#condist-kept v1 k=<k>` then one index per line.
pub fn write_kept<W: Write>(kept: &[u32], k_filter: usize, mut out: W) -> std::io::Result<()> {
    writeln!(out, "#condist-kept v1 k={k_filter}")?;
    for i in kept {
        writeln!(out, "{i}")?;
    }
    out.flush()
}

pub fn read_kept<R: BufRead>(input: R) -> Result<Vec<u32>> {
    let mut kept = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        kept.push(line.trim().parse().map_err(|_| MiningError::Parse {
            line: n + 1,
            msg: "bad index".into(),
        })?);
    }
    if kept.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MiningError::Parse {
            line: 0,
            msg: "indices not strictly ascending".into(),
        });
    }
    Ok(kept)
}
